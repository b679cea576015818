//! Downstream proxy: fine-tune a small student on synthetic records and
//! compare its held-out perplexity before and after.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{fit_full_weights, BackboneModel, PretrainConfig};
use crate::error::{Error, Result};
use crate::generator::{MethodTag, SyntheticRecord};
use crate::trainer::{LossTrace, TrainConfig};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_ppl: f64,
    pub tuned_ppl: f64,
    pub dataset_tag: MethodTag,
    pub steps: usize,
    pub lr: f64,
    pub n_records: usize,
}

impl EvalReport {
    pub fn ratio(&self) -> f64 {
        self.tuned_ppl / self.base_ppl
    }
}

/// Question and answer joined and closed with EOS, cut to what fits after
/// the BOS column.
pub fn training_sequences(records: &[SyntheticRecord], max_len: usize) -> Result<Vec<TokenSequence>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            if r.answer.is_none() {
                return Err(Error::validation("student training needs records with answers"));
            }
            let mut ids = r.full_sequence().with_eos().0;
            ids.truncate(max_len - 1);
            Ok(TokenSequence(ids))
        })
        .collect()
}

/// Full-weight causal training of an unfrozen student on the records.
pub fn finetune_student(
    mut student: BackboneModel,
    records: &[SyntheticRecord],
    cfg: &TrainConfig,
) -> Result<(BackboneModel, LossTrace)> {
    if records.is_empty() {
        return Err(Error::validation("no records to fine-tune on"));
    }
    cfg.validate()?;
    let corpus = training_sequences(records, student.max_len())?;
    let pcfg = PretrainConfig { steps: cfg.steps, lr: cfg.lr, batch_size: cfg.batch_size, seed: cfg.seed, grad_clip: cfg.grad_clip };
    let trace = fit_full_weights(&mut student, &corpus, &pcfg)?;
    Ok((student, trace))
}

/// `exp` of the token-weighted mean next-token loss, each sequence scored
/// after the BOS column alone.
pub fn perplexity(model: &BackboneModel, test_fold: &[TokenSequence]) -> Result<f64> {
    if test_fold.is_empty() {
        return Err(Error::validation("empty test fold"));
    }
    let bos = model.bos_prompt();
    let parts = test_fold
        .par_iter()
        .map(|x| Ok((model.causal_loss(&bos, x)? * x.len() as f64, x.len())))
        .collect::<Result<Vec<_>>>()?;
    let (sum, count) = parts.iter().fold((0.0, 0usize), |(s, c), (l, n)| (s + l, c + n));
    Ok((sum / count as f64).exp())
}

/// Base and tuned perplexities of `base` on the test fold.
pub fn student_eval(
    base: &BackboneModel,
    records: &[SyntheticRecord],
    test_fold: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<(EvalReport, BackboneModel)> {
    let tag = records.first().map(|r| r.method_tag).ok_or_else(|| Error::validation("no records to fine-tune on"))?;
    let base_ppl = perplexity(base, test_fold)?;
    let (tuned, _) = finetune_student(base.unfrozen_copy(), records, cfg)?;
    let tuned_ppl = perplexity(&tuned, test_fold)?;
    let report = EvalReport { base_ppl, tuned_ppl, dataset_tag: tag, steps: cfg.steps, lr: cfg.lr, n_records: records.len() };
    Ok((report, tuned))
}
