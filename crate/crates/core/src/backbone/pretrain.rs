//! Full-weight next-token training. Builds the frozen backbone fixtures and
//! fine-tunes students; SoftSRV training never goes through here.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BackboneModel, Weights};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamState, ParamSet};
use crate::trainer::{BatchSchedule, LossTrace};
use crate::vocab::{TokenSequence, Vocabulary, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl PretrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self { steps: 2000, lr: 3e-3, batch_size: 8, seed, grad_clip: Some(1.0) }
    }
}

/// Initializes a model from `seed`, trains every weight on `corpus` and
/// returns it frozen together with its loss trace.
pub fn pretrain_backbone(
    config: BackboneConfig,
    vocab: Vocabulary,
    corpus: &[TokenSequence],
    cfg: &PretrainConfig,
) -> Result<(BackboneModel, LossTrace)> {
    let mut model = BackboneModel::init(config, vocab, cfg.seed)?;
    let trace = fit_full_weights(&mut model, corpus, cfg)?;
    model.freeze();
    Ok((model, trace))
}

/// Trains all weights of an unfrozen model with Adam on `BOS + sequence`.
pub fn fit_full_weights(model: &mut BackboneModel, corpus: &[TokenSequence], cfg: &PretrainConfig) -> Result<LossTrace> {
    if model.is_frozen() {
        return Err(Error::validation("cannot train a frozen backbone"));
    }
    if corpus.is_empty() {
        return Err(Error::validation("empty training corpus"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::validation("batch size and learning rate must be positive"));
    }
    for seq in corpus {
        if seq.is_empty() {
            return Err(Error::validation("empty sequence in corpus"));
        }
        model.vocab().check(seq)?;
        if seq.len() + 1 > model.max_len() {
            return Err(Error::capacity(format!("sequence of length {} exceeds max length", seq.len())));
        }
    }
    let start = Instant::now();
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut state = AdamState::for_params(model.weights());
    let mut schedule = BatchSchedule::new(corpus.len(), cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = schedule.next_batch();
        let snapshot = &*model;
        let per_example: Vec<(f64, Weights)> = batch
            .par_iter()
            .map(|&i| example_grads(snapshot, &corpus[i]))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Weights::zeros(model.config());
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
        state.update(model.weights_mut()?, &grads, &adam)?;
        losses.push(loss);
    }
    Ok(LossTrace { losses, wall_clock_secs: start.elapsed().as_secs_f64() })
}

fn example_grads(model: &BackboneModel, seq: &TokenSequence) -> Result<(f64, Weights)> {
    let prompt = model.bos_prompt();
    let (loss, dprefix, grads) = model.loss_and_grads(&prompt, seq, true)?;
    let mut grads = grads.expect("weight gradients requested");
    let mut bos_row = grads.tok_emb.row_mut(BOS as usize);
    bos_row += &dprefix.column(0);
    Ok((loss, grads))
}
