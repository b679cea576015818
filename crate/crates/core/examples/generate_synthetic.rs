//! Step 2 and 3 of the workflow on a short run: round-robin question
//! sampling from trained SS_MC prompts, then answers by continuation.

use softsrv::config::ExperimentConfig;
use softsrv::pipeline::{Run, Stage};

fn main() -> softsrv::error::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.paths.out_dir = std::env::temp_dir().join("softsrv-example-generate");
    cfg.backbone.pretrain.steps = 800;
    cfg.embedder.pretrain.steps = 300;
    cfg.student.pretrain.steps = 1;
    cfg.train.steps = 400;
    cfg.generation.n_raw = 12;
    let mut run = Run::new(cfg)?;
    run.run_until(Stage::Answers)?;
    let vocab = &run.data().vocab;
    for r in &run.records {
        let a = r.answer.as_ref().map(|a| vocab.decode(a)).unwrap_or_default();
        println!("[seed {:>3}] {} => {a}", r.seed_index, vocab.decode(&r.question));
    }
    println!("records written to {}", run.layout.path("answered.jsonl").display());
    Ok(())
}
