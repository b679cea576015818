//! The full desk-preset pipeline, as `softsrv run` does it. Takes a few
//! minutes on one core; artifacts land in `runs/desk` unless a directory is
//! given as the first argument.

use softsrv::config::ExperimentConfig;
use softsrv::pipeline::run_experiment;

fn main() -> softsrv::error::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    if let Some(dir) = std::env::args().nth(1) {
        cfg.paths.out_dir = dir.into();
    }
    let start = std::time::Instant::now();
    let s = run_experiment(&cfg)?;
    println!("generated {:?}, selected {:?}, final {:?}", s.generated, s.selected, s.final_records);
    if let Some(m) = &s.mauve {
        println!("mauve vs test fold {:.3}", m.score);
    }
    if let Some(e) = &s.student {
        println!("student ppl {:.2} -> {:.2}", e.base_ppl, e.tuned_ppl);
    }
    println!("{:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
