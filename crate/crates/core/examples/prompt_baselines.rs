//! The template baselines: few-shot question prompting and the
//! critique/refine loop, driven by a small pretrained backbone.

use softsrv::baselines::{pt_generate, ptsr_generate, RefineConfig, TemplateKind, TemplateSet};
use softsrv::config::ExperimentConfig;
use softsrv::generator::SamplingConfig;
use softsrv::pipeline::{Run, Stage};

fn main() -> softsrv::error::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.paths.out_dir = std::env::temp_dir().join("softsrv-example-baselines");
    cfg.backbone.pretrain.steps = 600;
    cfg.embedder.pretrain.steps = 1;
    cfg.student.pretrain.steps = 1;
    let mut run = Run::new(cfg)?;
    run.run_until(Stage::Pretrain)?;

    let templates = TemplateSet::builtin(run.cfg.grammar, true);
    println!("question template ({}):\n{}\n", TemplateKind::Question, templates.question.body());
    let seeds: Vec<String> = run.data().target.train[..4].iter().map(|e| e.question.clone()).collect();
    let scfg = SamplingConfig::new(1.0, 40, 3);
    let vocab = &run.data().vocab;
    let backbone = &run.models().backbone;

    for r in pt_generate(backbone, &templates, &seeds, 4, &scfg)? {
        println!("PT    {}", vocab.decode(&r.question));
    }
    let rcfg = RefineConfig { max_rounds: 2, ..RefineConfig::default() };
    for r in ptsr_generate(backbone, &templates, &seeds, &rcfg, 4, &scfg)? {
        println!("PT_SR {} (rounds {:?})", vocab.decode(&r.question), r.provenance.refine_rounds);
    }
    Ok(())
}
