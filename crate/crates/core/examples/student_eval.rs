//! Student proxy: fine-tune a small model on solved toy examples and
//! compare held-out perplexity before and after.

use softsrv::config::ExperimentConfig;
use softsrv::generator::{MethodTag, Provenance, SyntheticRecord};
use softsrv::pipeline::{encode_full, Run, Stage};
use softsrv::student::student_eval;

fn main() -> softsrv::error::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.paths.out_dir = std::env::temp_dir().join("softsrv-example-student");
    cfg.backbone.pretrain.steps = 1;
    cfg.embedder.pretrain.steps = 1;
    cfg.student.pretrain.steps = 400;
    cfg.student_eval.steps = 300;
    let mut run = Run::new(cfg)?;
    run.run_until(Stage::Pretrain)?;
    let vocab = &run.data().vocab;

    // Real train-fold examples stand in for generated records here.
    let records: Vec<SyntheticRecord> = run.data().target.train[..200]
        .iter()
        .enumerate()
        .map(|(i, e)| SyntheticRecord {
            question: vocab.encode(&e.question),
            answer: Some(vocab.encode(&format!("answer : {}", e.answer))),
            seed_index: i,
            method_tag: MethodTag::SsMc,
            provenance: Provenance {
                seed: 0,
                step: i,
                temperature: 0.0,
                candidate: 0,
                refine_rounds: None,
                answer_seed: None,
                answer_temperature: None,
            },
        })
        .collect();
    let test = encode_full(vocab, &run.data().target.test);
    let (report, _) = student_eval(&run.models().student, &records, &test, &run.cfg.student_train_config())?;
    println!("base ppl {:.2}, tuned ppl {:.2}, ratio {:.3}", report.base_ppl, report.tuned_ppl, report.ratio());
    Ok(())
}
