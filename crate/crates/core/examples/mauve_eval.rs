//! MAUVE on synthetic point clouds: identical, shifted and disjoint.

use rand::Rng as _;
use softsrv::embedder::ContextVector;
use softsrv::mauve::{mauve_score, MauveConfig};
use softsrv::rng;

fn cloud(n: usize, shift: f64, seed: u64) -> Vec<ContextVector> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| ContextVector::new(ndarray::Array1::from_shape_simple_fn(8, || shift + r.random_range(-1.0..1.0))).unwrap())
        .collect()
}

fn main() -> softsrv::error::Result<()> {
    let cfg = MauveConfig::default();
    let base = cloud(500, 0.0, 1);
    for shift in [0.0, 0.25, 0.5, 1.0, 3.0, 100.0] {
        let rep = mauve_score(&base, &cloud(500, shift, 2), &cfg, 0)?;
        println!("shift {shift:>6}: mauve {:.4}", rep.score);
    }
    Ok(())
}
