//! Reconstruction training of SoftSRV parameters against a frozen backbone.
//!
//! Each example `x` is summarized as `z = E(x)`, turned into a prompt
//! `P_θ(z)`, and scored by the teacher-forced next-token loss of `x` given
//! that prompt. Gradients flow through the frozen body into the prompt and
//! from there into `θ`; only `θ` is updated.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::checkpoint::Container;
use crate::embedder::{ContextVector, SequenceEmbedder};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamState, ParamSet};
use crate::rng;
use crate::softsrv::{PromptDims, SoftSrvParams, Variant};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self { steps: 2000, lr: 1e-3, batch_size: 8, adam_betas: (0.9, 0.999), adam_eps: 1e-8, seed, grad_clip: Some(1.0) }
    }

    /// 20K steps at a fixed learning rate of 5e-6.
    pub fn paper(seed: u64) -> Self {
        Self { steps: 20_000, lr: 5e-6, ..Self::desk(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::validation("learning rate and batch size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation("gradient clip must be positive"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_betas.0, beta2: self.adam_betas.1, eps: self.adam_eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl LossTrace {
    pub fn leading_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses.iter().take(n).sum::<f64>() / n as f64
    }

    pub fn trailing_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(n).sum::<f64>() / n as f64
    }
}

/// Seeded epoch shuffling; batches run across epoch boundaries.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    batch_size: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), pos: 0, epoch: 0, batch_size, seed };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut r = rng::seeded(rng::stream_seed(self.seed, "epoch", self.epoch));
        self.order.sort_unstable();
        self.order.shuffle(&mut r);
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

pub struct TrainResult {
    pub params: SoftSrvParams,
    pub trace: LossTrace,
    pub optimizer: AdamState,
}

/// Loss and `∂ℓ/∂θ` for one example.
pub fn example_grad(
    backbone: &BackboneModel,
    params: &SoftSrvParams,
    z: Option<&ContextVector>,
    x: &TokenSequence,
) -> Result<(f64, SoftSrvParams)> {
    let prompt = params.materialize(z)?;
    let (loss, dprompt) = backbone.loss_grad_wrt_prefix(&prompt, x)?;
    Ok((loss, params.param_grad(z, &dprompt)?))
}

/// Minimizes `Σ_i ℓ(H(P_θ(E(x_i))), x_i)` over `θ` with Adam.
pub fn train(
    backbone: &BackboneModel,
    embedder: &SequenceEmbedder,
    dataset: &[TokenSequence],
    params: SoftSrvParams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let optimizer = AdamState::for_params(&params);
    train_from(backbone, embedder, dataset, params, optimizer, cfg)
}

/// Continues training from an existing optimizer state.
pub fn train_from(
    backbone: &BackboneModel,
    embedder: &SequenceEmbedder,
    dataset: &[TokenSequence],
    mut params: SoftSrvParams,
    mut optimizer: AdamState,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if !backbone.is_frozen() || !embedder.model().is_frozen() {
        return Err(Error::validation("backbone and embedder must be frozen"));
    }
    if dataset.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    params.dims.check_backbone(backbone)?;
    if params.variant().is_contextual() && params.dims.d_e != embedder.d_e() {
        return Err(Error::validation(format!(
            "parameters expect d_e = {}, embedder produces {}",
            params.dims.d_e,
            embedder.d_e()
        )));
    }
    if optimizer.shapes() != params.shapes() {
        return Err(Error::validation("optimizer state does not match parameters"));
    }

    let start = Instant::now();
    let contexts: Vec<Option<ContextVector>> = if params.variant().is_contextual() {
        dataset.iter().map(|x| embedder.embed_sequence(x).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; dataset.len()]
    };
    let adam = cfg.adam();
    let mut schedule = BatchSchedule::new(dataset.len(), cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = schedule.next_batch();
        let snapshot = &params;
        let per_example: Vec<(f64, SoftSrvParams)> = batch
            .par_iter()
            .map(|&i| example_grad(backbone, snapshot, contexts[i].as_ref(), &dataset[i]))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &per_example {
            loss += l * scale;
            grads.add_scaled(g, scale);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        optimizer.update(&mut params, &grads, &adam)?;
        losses.push(loss);
    }
    Ok(TrainResult { params, trace: LossTrace { losses, wall_clock_secs: start.elapsed().as_secs_f64() }, optimizer })
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsMeta {
    variant: Variant,
    dims: PromptDims,
    has_optimizer: bool,
}

pub fn save_params(path: &Path, params: &SoftSrvParams, optimizer: Option<&AdamState>) -> Result<()> {
    let meta = ParamsMeta { variant: params.variant(), dims: params.dims, has_optimizer: optimizer.is_some() };
    let mut c = Container::new("softsrv_params", serde_json::to_value(meta).expect("meta serializes"));
    params.write_into(&mut c);
    if let Some(o) = optimizer {
        o.write_into(&mut c);
    }
    c.write(path)
}

pub fn load_params(path: &Path) -> Result<(SoftSrvParams, Option<AdamState>)> {
    let mut c = Container::read(path)?;
    c.expect_kind("softsrv_params")?;
    let meta: ParamsMeta = c.meta_as()?;
    let params = SoftSrvParams::read_from(&mut c, meta.variant, meta.dims)?;
    let optimizer = if meta.has_optimizer { Some(AdamState::read_from(&mut c, &params.shapes())?) } else { None };
    c.finish()?;
    Ok((params, optimizer))
}

/// Loads parameters and checks them against the backbone they will drive.
pub fn load_params_for(path: &Path, backbone: &BackboneModel) -> Result<(SoftSrvParams, Option<AdamState>)> {
    let loaded = load_params(path)?;
    loaded.0.dims.check_backbone(backbone)?;
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_each_epoch_once() {
        let mut s = BatchSchedule::new(10, 4, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch()).collect();
        // Two full epochs.
        let (first, second) = seen.split_at_mut(10);
        first.sort_unstable();
        second[..10].sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>().as_slice());
        assert_eq!(&second[..10], (0..10).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn schedule_is_seeded() {
        let a: Vec<_> = {
            let mut s = BatchSchedule::new(20, 3, 1);
            (0..10).flat_map(|_| s.next_batch()).collect()
        };
        let b: Vec<_> = {
            let mut s = BatchSchedule::new(20, 3, 1);
            (0..10).flat_map(|_| s.next_batch()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn trace_window_means() {
        let t = LossTrace { losses: vec![4.0, 3.0, 2.0, 1.0], wall_clock_secs: 0.0 };
        assert_eq!(t.leading_mean(2), 3.5);
        assert_eq!(t.trailing_mean(2), 1.5);
        assert_eq!(t.trailing_mean(100), 2.5);
    }

    #[test]
    fn presets() {
        let p = TrainConfig::paper(0);
        assert_eq!((p.steps, p.lr), (20_000, 5e-6));
        let d = TrainConfig::desk(0);
        assert_eq!((d.steps, d.lr, d.batch_size, d.grad_clip), (2000, 1e-3, 8, Some(1.0)));
    }
}
