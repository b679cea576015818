use ndarray::{s, Array1, Axis};
use rand::Rng as _;

use super::{compute, BackboneModel, PromptMatrix};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{TokenSequence, EOS};

/// `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &Array1<f64>, temperature: f64) -> Array1<f64> {
    let scaled = logits / temperature;
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scaled.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Draws a token id. `temperature == 0` is argmax, lowest id on ties.
pub fn sample_from_logits(logits: &Array1<f64>, temperature: f64, rng: &mut rng::Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let probs = softmax_with_temperature(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left `acc` just below one; fall back to the last likely token.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

pub(super) fn decode(
    model: &BackboneModel,
    prefix: &PromptMatrix,
    forced: &[u32],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenSequence> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::validation(format!("invalid temperature {temperature}")));
    }
    let used = prefix.t() + forced.len();
    if used + max_len > model.max_len() {
        return Err(Error::capacity(format!(
            "{max_len} new tokens after {used} context rows exceeds max length {}",
            model.max_len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let cfg = model.config();
    let w = model.weights();
    let mut cache = compute::KvCache::new(cfg);
    let mut rows = prefix.values().t().to_owned();
    if !forced.is_empty() {
        rows = ndarray::concatenate(Axis(0), &[rows.view(), compute::token_rows(w, forced, 0).view()])
            .expect("matching widths");
    }
    let mut n_tokens = forced.len();
    let mut out = Vec::new();
    let mut hidden = compute::extend(cfg, w, &mut cache, rows);
    while out.len() < max_len {
        let last = hidden.nrows() - 1;
        let logits = compute::project(w, hidden.slice(s![last..=last, ..])).row(0).to_owned();
        let next = sample_from_logits(&logits, temperature, &mut rng);
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == max_len {
            break;
        }
        hidden = compute::extend(cfg, w, &mut cache, compute::token_rows(w, &[next], n_tokens));
        n_tokens += 1;
    }
    Ok(TokenSequence(out))
}
