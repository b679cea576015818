//! Distribution similarity by quantized divergence frontiers: joint k-means
//! over both samples, then the area under the curve traced by mixtures.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedder::ContextVector;
use crate::error::{Error, Result};
use crate::postprocess::lloyd_kmeans;

const LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MauveConfig {
    pub k: usize,
    pub c: f64,
    pub grid_size: usize,
}

impl Default for MauveConfig {
    fn default() -> Self {
        Self { k: 32, c: 5.0, grid_size: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedPair {
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub k: usize,
    pub centroids: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MauveReport {
    pub score: f64,
    pub curve: Vec<(f64, f64)>,
    pub c: f64,
    pub lambda_grid: Vec<f64>,
    pub k: usize,
}

fn stack(vecs: &[&ContextVector]) -> Result<Array2<f64>> {
    let dim = vecs[0].dim();
    if vecs.iter().any(|v| v.dim() != dim) {
        return Err(Error::validation("context vectors differ in dimension"));
    }
    let mut out = Array2::zeros((vecs.len(), dim));
    for (i, v) in vecs.iter().enumerate() {
        out.row_mut(i).assign(v.values());
    }
    Ok(out)
}

/// Clusters the union of both samples and returns each side's normalized
/// cluster histogram.
pub fn quantize(gen: &[ContextVector], reference: &[ContextVector], k: usize, seed: u64) -> Result<QuantizedPair> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::validation("both samples must be nonempty"));
    }
    let n = gen.len() + reference.len();
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} needs between 1 and {n} points")));
    }
    // Clustering runs on the union in lexicographic row order so the result
    // does not depend on which side is called the reference.
    let mut all: Vec<(bool, &ContextVector)> =
        gen.iter().map(|v| (true, v)).chain(reference.iter().map(|v| (false, v))).collect();
    all.sort_by(|a, b| {
        a.1.values().iter().zip(b.1.values()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let rows = stack(&all.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
    let a = lloyd_kmeans(&rows, k, LLOYD_ITERS, seed)?;
    let mut p = Array1::zeros(k);
    let mut q = Array1::zeros(k);
    for (&(is_gen, _), &l) in all.iter().zip(&a.labels) {
        if is_gen {
            p[l] += 1.0;
        } else {
            q[l] += 1.0;
        }
    }
    p /= gen.len() as f64;
    q /= reference.len() as f64;
    Ok(QuantizedPair { p, q, k, centroids: a.centroids })
}

/// `KL(a || b)` in nats with `0 ln 0 = 0`.
pub fn kl_divergence(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
}

/// For each mixture weight `λ`, the point
/// `(exp(-c KL(q || r)), exp(-c KL(p || r)))` with `r = λ p + (1 - λ) q`.
pub fn divergence_curve(pair: &QuantizedPair, c: f64, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::validation(format!("scaling constant {c} must be positive")));
    }
    grid.iter()
        .map(|&lambda| {
            if !(lambda > 0.0 && lambda < 1.0) {
                return Err(Error::validation(format!("mixture weight {lambda} outside (0, 1)")));
            }
            let r = &pair.p * lambda + &pair.q * (1.0 - lambda);
            Ok(((-c * kl_divergence(&pair.q, &r)).exp(), (-c * kl_divergence(&pair.p, &r)).exp()))
        })
        .collect()
}

/// `n` evenly spaced weights on `[1e-6, 1 - 1e-6]`.
pub fn lambda_grid(n: usize) -> Vec<f64> {
    let (lo, hi) = (1e-6, 1.0 - 1e-6);
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Trapezoid area under the curve after adding `(0, 1)` and `(1, 0)` and
/// sorting by `x`.
pub fn curve_area(curve: &[(f64, f64)]) -> f64 {
    let mut pts = curve.to_vec();
    pts.push((0.0, 1.0));
    pts.push((1.0, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    area.clamp(0.0, 1.0)
}

pub fn mauve_score(gen: &[ContextVector], reference: &[ContextVector], cfg: &MauveConfig, seed: u64) -> Result<MauveReport> {
    if cfg.grid_size == 0 {
        return Err(Error::validation("grid must have at least one point"));
    }
    let pair = quantize(gen, reference, cfg.k, seed)?;
    let grid = lambda_grid(cfg.grid_size);
    let curve = divergence_curve(&pair, cfg.c, &grid)?;
    Ok(MauveReport { score: curve_area(&curve), curve, c: cfg.c, lambda_grid: grid, k: cfg.k })
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::Rng as _;

    use super::*;
    use crate::postprocess::nearest;
    use crate::rng;

    fn cloud(n: usize, dim: usize, offset: f64, seed: u64) -> Vec<ContextVector> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| ContextVector::new(Array1::from_shape_fn(dim, |_| offset + r.random_range(-1.0..1.0))).unwrap())
            .collect()
    }

    fn pair(p: Array1<f64>, q: Array1<f64>) -> QuantizedPair {
        let k = p.len();
        QuantizedPair { p, q, k, centroids: Array2::zeros((k, 1)) }
    }

    #[test]
    fn identical_samples_give_identical_histograms() {
        let x = cloud(40, 3, 0.0, 1);
        let qp = quantize(&x, &x, 8, 2).unwrap();
        assert_eq!(qp.p, qp.q);
        assert!((qp.p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_point_masses_split() {
        let a = vec![ContextVector::new(array![0.0, 0.0]).unwrap(); 5];
        let b = vec![ContextVector::new(array![10.0, 0.0]).unwrap(); 7];
        let qp = quantize(&a, &b, 2, 3).unwrap();
        let (p, q) = (qp.p.to_vec(), qp.q.to_vec());
        assert!(p == vec![1.0, 0.0] && q == vec![0.0, 1.0] || p == vec![0.0, 1.0] && q == vec![1.0, 0.0]);
    }

    #[test]
    fn histograms_sum_to_one_and_match_nearest_centroid() {
        for seed in 0..5 {
            let g = cloud(30 + seed as usize, 4, 0.0, seed);
            let r = cloud(25, 4, 0.5, seed + 100);
            let qp = quantize(&g, &r, 6, seed).unwrap();
            assert!((qp.p.sum() - 1.0).abs() < 1e-12 && (qp.q.sum() - 1.0).abs() < 1e-12);
            let mut p = Array1::<f64>::zeros(6);
            for v in &g {
                p[nearest(v.values().view(), &qp.centroids)] += 1.0 / g.len() as f64;
            }
            assert!((&p - &qp.p).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn quantize_rejects_bad_k_and_empty() {
        let x = cloud(3, 2, 0.0, 1);
        assert!(quantize(&x, &x, 7, 0).is_err());
        assert!(quantize(&x, &x, 0, 0).is_err());
        assert!(quantize(&[], &x, 1, 0).is_err());
    }

    #[test]
    fn equal_histograms_give_unit_points() {
        let qp = pair(array![0.2, 0.3, 0.5], array![0.2, 0.3, 0.5]);
        for (x, y) in divergence_curve(&qp, 5.0, &lambda_grid(11)).unwrap() {
            assert!((x - 1.0).abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_curve_has_closed_form() {
        let qp = pair(array![1.0, 0.0], array![0.0, 1.0]);
        let grid = lambda_grid(101);
        for (&l, (x, y)) in grid.iter().zip(divergence_curve(&qp, 5.0, &grid).unwrap()) {
            assert!((x - (1.0 - l).powi(5)).abs() < 1e-10);
            assert!((y - l.powi(5)).abs() < 1e-10);
        }
    }

    #[test]
    fn curve_is_monotone_in_lambda() {
        let mut r = rng::seeded(4);
        for _ in 0..50 {
            let mut p = Array1::from_shape_fn(6, |_| r.random_range(0.0..1.0));
            let mut q = Array1::from_shape_fn(6, |_| r.random_range(0.0..1.0));
            p /= p.sum();
            q /= q.sum();
            let curve = divergence_curve(&pair(p, q), 5.0, &lambda_grid(101)).unwrap();
            for w in curve.windows(2) {
                assert!(w[1].0 <= w[0].0 + 1e-12 && w[1].1 >= w[0].1 - 1e-12);
            }
        }
    }

    #[test]
    fn grid_outside_open_interval_is_rejected() {
        let qp = pair(array![1.0], array![1.0]);
        for bad in [0.0, 1.0, -0.5, 2.0] {
            assert!(divergence_curve(&qp, 5.0, &[bad]).is_err());
        }
        assert!(divergence_curve(&qp, 0.0, &[0.5]).is_err());
    }

    #[test]
    fn self_similarity() {
        let x = cloud(50, 3, 0.0, 5);
        let rep = mauve_score(&x, &x, &MauveConfig::default(), 1).unwrap();
        assert!(rep.score >= 0.99);
        assert_eq!(rep.lambda_grid.len(), 101);
        assert_eq!(rep.curve.len(), 101);
    }

    /// Trapezoid area of the augmented closed-form curve, computed straight.
    fn disjoint_area_oracle(c: i32) -> f64 {
        let grid = lambda_grid(101);
        let mut pts: Vec<(f64, f64)> = grid.iter().map(|&l| ((1.0 - l).powi(c), l.powi(c))).collect();
        pts.insert(0, (1.0, 0.0));
        pts.push((0.0, 1.0));
        pts.reverse();
        let mut area = 0.0;
        for i in 1..pts.len() {
            area += (pts[i].0 - pts[i - 1].0) * (pts[i].1 + pts[i - 1].1) / 2.0;
        }
        area
    }

    #[test]
    fn disjoint_clouds_score_near_zero() {
        let a = cloud(30, 2, 0.0, 6);
        let b = cloud(30, 2, 100.0, 7);
        let rep = mauve_score(&a, &b, &MauveConfig { k: 2, ..MauveConfig::default() }, 0).unwrap();
        let want = disjoint_area_oracle(5);
        assert!((rep.score - want).abs() < 1e-12, "{} vs {want}", rep.score);
        // Continuous limit: integral of lambda^5 d(1 - lambda)^5 = 5 B(6, 5).
        assert!((want - 5.0 / 1260.0).abs() < 2e-4);
        assert!(rep.score <= 0.05);
    }

    #[test]
    fn swapping_samples_keeps_score() {
        let a = cloud(40, 3, 0.0, 8);
        let b = cloud(35, 3, 0.8, 9);
        let cfg = MauveConfig { k: 6, ..MauveConfig::default() };
        let ab = mauve_score(&a, &b, &cfg, 2).unwrap().score;
        let ba = mauve_score(&b, &a, &cfg, 2).unwrap().score;
        assert!((ab - ba).abs() < 1e-9, "{ab} {ba}");
    }

    #[test]
    fn score_does_not_grow_with_separation() {
        let base = cloud(60, 3, 0.0, 10);
        let cfg = MauveConfig { k: 8, ..MauveConfig::default() };
        let scores: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&off| mauve_score(&cloud(60, 3, off, 11), &base, &cfg, 3).unwrap().score)
            .collect();
        for w in scores.windows(2) {
            assert!(w[1] <= w[0] + 0.02, "{scores:?}");
        }
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }
}
