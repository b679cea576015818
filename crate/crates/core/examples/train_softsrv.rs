//! Trains each soft-prompt parameterization against one frozen backbone and
//! prints the loss drop. The backbone checksum is compared before and after.

use softsrv::config::ExperimentConfig;
use softsrv::pipeline::{encode_questions, Run, Stage};
use softsrv::softsrv::{SoftSrvParams, Variant};
use softsrv::trainer::train;

fn main() -> softsrv::error::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.paths.out_dir = std::env::temp_dir().join("softsrv-example-train");
    cfg.backbone.pretrain.steps = 800;
    cfg.embedder.pretrain.steps = 300;
    cfg.student.pretrain.steps = 1;
    cfg.train.steps = 300;
    let mut run = Run::new(cfg)?;
    run.run_until(Stage::Pretrain)?;
    let m = run.models();
    let dataset = encode_questions(&run.data().vocab, &run.data().target.train);
    let before = m.backbone.checksum();
    for v in [Variant::NonContextual, Variant::Mixture, Variant::MlpConcat] {
        let init = SoftSrvParams::init(v, run.cfg.prompt_dims(), 0, &m.backbone)?;
        let r = train(&m.backbone, &m.embedder, &dataset, init, &run.cfg.train_config())?;
        println!(
            "{v}: loss {:.3} -> {:.3} in {:.1}s",
            r.trace.leading_mean(50),
            r.trace.trailing_mean(50),
            r.trace.wall_clock_secs
        );
    }
    println!("backbone unchanged: {}", before == m.backbone.checksum());
    Ok(())
}
