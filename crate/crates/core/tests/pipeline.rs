//! Orchestration: determinism, resumption from partial artifacts, stage
//! error reporting and the CLI surface.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use softsrv::config::Method;
use softsrv::error::Error;
use softsrv::generator::MethodTag;
use softsrv::pipeline::{run_experiment, Run, Stage};
use softsrv::records::read_records;

const DOWNSTREAM: [&str; 7] =
    ["selected.jsonl", "final.jsonl", "removed.jsonl", "mauve.json", "student_eval.json", "summary.json", "config.toml"];

fn read_all(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap_or_else(|e| panic!("{n}: {e}"))).collect()
}

#[test]
fn deleting_downstream_artifacts_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    run_experiment(&cfg).unwrap();
    let mut names = DOWNSTREAM.to_vec();
    names.extend(["questions.jsonl", "answered.jsonl", "params.ckpt", "backbone.ckpt"]);
    let before = read_all(dir.path(), &names);

    for n in DOWNSTREAM {
        fs::remove_file(dir.path().join(n)).unwrap();
    }
    run_experiment(&cfg).unwrap();
    assert_eq!(read_all(dir.path(), &names), before);

    // Deeper: regenerate from the trained parameters onward.
    for n in ["questions.jsonl", "answered.jsonl"].iter().chain(DOWNSTREAM.iter()) {
        fs::remove_file(dir.path().join(n)).unwrap();
    }
    run_experiment(&cfg).unwrap();
    assert_eq!(read_all(dir.path(), &names), before);
}

#[test]
fn separate_runs_agree_on_everything_but_the_output_path() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut sa = run_experiment(&common::tiny_config(a.path())).unwrap();
    let mut sb = run_experiment(&common::tiny_config(b.path())).unwrap();
    sa.config.as_mut().unwrap().paths.out_dir = "x".into();
    sb.config.as_mut().unwrap().paths.out_dir = "x".into();
    assert_eq!(sa, sb);
    assert!(sa.final_records.unwrap() > 0);
    let m = sa.mauve.unwrap().score;
    assert!(m > 0.0 && m <= 1.0);
    let s = sa.student.unwrap();
    assert!(s.base_ppl > 0.0 && s.tuned_ppl > 0.0);
}

#[test]
fn corrupt_artifact_fails_in_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let mut run = Run::new(cfg.clone()).unwrap();
    run.run_until(Stage::Pretrain).unwrap();
    fs::write(dir.path().join("params.ckpt"), b"not a checkpoint").unwrap();
    let err = Run::new(cfg).unwrap().run_until(Stage::Train).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "train", .. }), "{err}");
}

#[test]
fn template_baseline_runs_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.generation.method = Method::Ptsr;
    cfg.generation.n_raw = 12;
    cfg.generation.refine_rounds = 1;
    cfg.backbone.max_len = 256;
    let mut run = Run::new(cfg).unwrap();
    run.run_until(Stage::Answers).unwrap();
    assert!(!dir.path().join("params.ckpt").exists());
    let recs = read_records(&dir.path().join("answered.jsonl")).unwrap();
    assert!(recs.len() <= 12);
    assert!(recs.iter().all(|r| r.method_tag == MethodTag::PtSr && r.provenance.refine_rounds.is_some()));
}

fn softsrv_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_softsrv")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[paths]\nout_dir = \"x\"\nbackbone = \"/nonexistent/backbone.ckpt\"\n").unwrap();
    let out = softsrv_cli(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = softsrv_cli(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&cfg, "[corpus]\nunknown_key = 1\n").unwrap();
    assert_eq!(softsrv_cli(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn cli_mauve_reports_the_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, format!("{}\n[paths]\nout_dir = {:?}\n", common::TINY_TOML, out_dir.display().to_string())).unwrap();
    let c = cfg.to_str().unwrap();
    assert!(softsrv_cli(&["generate", "--config", c]).status.success());
    let out = softsrv_cli(&[
        "mauve",
        "--config",
        c,
        "--gen",
        out_dir.join("answered.jsonl").to_str().unwrap(),
        "--ref",
        out_dir.join("test_questions.txt").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["curve"].as_array().unwrap().len(), 101);
    let score = report["score"].as_f64().unwrap();
    assert!(score > 0.0 && score <= 1.0);
}
