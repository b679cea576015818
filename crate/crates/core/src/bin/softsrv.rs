use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use softsrv::config::{ExperimentConfig, Method, Preset};
use softsrv::error::{Error, Result};
use softsrv::pipeline::{mauve_between, Run, Stage};
use softsrv::vocab::TokenSequence;

#[derive(Parser)]
#[command(name = "softsrv", version, about = "Contextual soft-prompt synthetic data generation")]
struct Cli {
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load) the backbone, embedder and student.
    Pretrain,
    /// Train the soft-prompt parameters against the frozen backbone.
    Train,
    /// Generate questions and answers.
    Generate {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Dedup, diverse subsampling and decontamination.
    Postprocess,
    /// MAUVE between two files of sequences.
    Mauve {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Fine-tune the student on the final records and report perplexity.
    StudentEval,
    /// The whole pipeline.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, cli.preset)?,
        None => ExperimentConfig::preset(cli.preset),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Generate { method: Some(m) } = &cli.command {
        cfg.generation.method = *m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One sequence per line: either a JSON record (its `question` is used) or raw text.
fn read_texts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Record { line: i + 1, message: e.to_string() })?;
            let q = v.get("question").and_then(|q| q.as_str()).ok_or_else(|| Error::Record {
                line: i + 1,
                message: "missing question field".into(),
            })?;
            out.push(q.to_string());
        } else {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(cli: &Cli, cfg: ExperimentConfig) -> std::result::Result<(), (Stage, Error)> {
    let last = match cli.command {
        Command::Pretrain => Stage::Pretrain,
        Command::Train => Stage::Train,
        Command::Generate { .. } => Stage::Answers,
        Command::Postprocess => Stage::Decontaminate,
        Command::Mauve { .. } => Stage::Pretrain,
        Command::StudentEval | Command::Run => Stage::StudentEval,
    };
    let mut run = Run::new(cfg).map_err(|e| (Stage::Data, e))?;
    run.run_until(last).map_err(|e| (failed_stage(&e), e))?;

    if let Command::Mauve { gen, reference } = &cli.command {
        let stage = Stage::Mauve;
        let vocab = &run.data().vocab;
        let encode = |p: &Path| -> Result<Vec<TokenSequence>> {
            Ok(read_texts(p)?.iter().map(|t| vocab.encode(t).with_eos()).collect())
        };
        let g = encode(gen).map_err(|e| (stage, e))?;
        let r = encode(reference).map_err(|e| (stage, e))?;
        let report = mauve_between(&run.models().embedder, &g, &r, &run.cfg.mauve, run.cfg.stage_seed("mauve"))
            .map_err(|e| (stage, e))?;
        print_json(&report);
    } else {
        print_json(&run.summary);
    }
    Ok(())
}

fn failed_stage(e: &Error) -> Stage {
    match e {
        Error::Stage { stage, .. } => Stage::from_name(stage).unwrap_or(Stage::Data),
        _ => Stage::Data,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("softsrv: config: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("softsrv: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Stage { ref source, .. } if matches!(**source, Error::Config(_)) => 2,
                _ => stage.exit_code(),
            };
            ExitCode::from(code as u8)
        }
    }
}
