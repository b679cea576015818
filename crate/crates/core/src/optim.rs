//! Adam with bias correction, over any collection of flat parameter tensors.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};

/// A set of trainable tensors exposed as flat slices in a fixed order.
/// Gradients use the same type as the parameters they belong to.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn sq_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += alpha * other`. Panics on layout mismatch; both sides are
    /// expected to come from the same constructor.
    fn add_scaled(&mut self, other: &Self, alpha: f64)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(a.len(), b.len());
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params<P: ParamSet>(params: &P) -> Self {
        Self::new(&params.shapes())
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }

    /// One bias-corrected Adam update. Returns the parameter deltas without
    /// applying them.
    pub fn step(&mut self, grads: &[&[f64]], cfg: &AdamConfig) -> Result<Vec<Vec<f64>>> {
        if grads.len() != self.first.len()
            || grads.iter().zip(&self.first).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::validation("gradient layout does not match optimizer state"));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut deltas = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(&mut self.first).zip(&mut self.second) {
            let mut d = vec![0.0; g.len()];
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                d[i] = -cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            deltas.push(d);
        }
        Ok(deltas)
    }

    /// Computes and applies one update to `params`.
    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P, cfg: &AdamConfig) -> Result<()> {
        let deltas = self.step(&grads.tensors(), cfg)?;
        for (p, d) in params.tensors_mut().into_iter().zip(deltas) {
            p.iter_mut().zip(d).for_each(|(x, dx)| *x += dx);
        }
        Ok(())
    }

    pub(crate) fn write_into(&self, c: &mut Container) {
        c.push("adam.step", vec![1], vec![self.step as f64]);
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            c.push(format!("adam.m.{i}"), vec![m.len()], m.clone());
            c.push(format!("adam.v.{i}"), vec![v.len()], v.clone());
        }
    }

    pub(crate) fn read_from(c: &mut Container, shapes: &[usize]) -> Result<Self> {
        let step = c.pop("adam.step", &[1])?[0];
        if step < 0.0 || step.fract() != 0.0 {
            return Err(Error::format("bad optimizer step counter"));
        }
        let mut first = Vec::with_capacity(shapes.len());
        let mut second = Vec::with_capacity(shapes.len());
        for (i, &n) in shapes.iter().enumerate() {
            first.push(c.pop(&format!("adam.m.{i}"), &[n])?);
            second.push(c.pop(&format!("adam.v.{i}"), &[n])?);
        }
        Ok(Self { step: step as u64, first, second })
    }
}
