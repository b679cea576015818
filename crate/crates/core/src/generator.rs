//! Synthetic question generation from trained prompts and answer
//! generation by direct continuation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::embedder::SequenceEmbedder;
use crate::error::{Error, Result};
use crate::rng;
use crate::softsrv::{SoftSrvParams, Variant};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodTag {
    #[serde(rename = "SS_NP")]
    SsNp,
    #[serde(rename = "SS_MP")]
    SsMp,
    #[serde(rename = "SS_MC")]
    SsMc,
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "PT_SR")]
    PtSr,
}

impl MethodTag {
    pub const ALL: [MethodTag; 5] = [MethodTag::SsNp, MethodTag::SsMp, MethodTag::SsMc, MethodTag::Pt, MethodTag::PtSr];

    pub fn tag(self) -> &'static str {
        match self {
            MethodTag::SsNp => "SS_NP",
            MethodTag::SsMp => "SS_MP",
            MethodTag::SsMc => "SS_MC",
            MethodTag::Pt => "PT",
            MethodTag::PtSr => "PT_SR",
        }
    }
}

impl From<Variant> for MethodTag {
    fn from(v: Variant) -> Self {
        match v {
            Variant::NonContextual => MethodTag::SsNp,
            Variant::Mixture => MethodTag::SsMp,
            Variant::MlpConcat => MethodTag::SsMc,
        }
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodTag::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::validation(format!("unknown method tag `{s}`")))
    }
}

/// Where a record came from: the stream seed and index that drew it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub step: usize,
    pub temperature: f64,
    /// Position among the questions split out of one completion.
    #[serde(default)]
    pub candidate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub question: TokenSequence,
    pub answer: Option<TokenSequence>,
    pub seed_index: usize,
    pub method_tag: MethodTag,
    pub provenance: Provenance,
}

impl SyntheticRecord {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::validation("record has an empty question"));
        }
        Ok(())
    }

    /// Question followed by the answer, if any.
    pub fn full_sequence(&self) -> TokenSequence {
        match &self.answer {
            Some(a) => self.question.concat(a),
            None => self.question.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self { temperature, max_new_tokens, seed }
    }
}

/// Draws `n_raw` questions, cycling through `seeds` so that record `j` is
/// conditioned on the context of `seeds[j % seeds.len()]`. Records whose
/// sample came out empty are kept out of the output.
pub fn generate_questions(
    backbone: &BackboneModel,
    embedder: &SequenceEmbedder,
    params: &SoftSrvParams,
    seeds: &[TokenSequence],
    n_raw: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<SyntheticRecord>> {
    if seeds.is_empty() {
        return Err(Error::validation("no seed examples"));
    }
    if n_raw == 0 {
        return Err(Error::validation("n_raw must be at least 1"));
    }
    params.dims.check_backbone(backbone)?;
    if params.dims.d_e != embedder.d_e() {
        return Err(Error::validation(format!(
            "params expect d_e = {} but the embedder produces {}",
            params.dims.d_e,
            embedder.d_e()
        )));
    }
    let tag = MethodTag::from(params.variant());
    let label = format!("{tag}/question");
    let prompts = seeds
        .par_iter()
        .map(|s| {
            let z = embedder.embed_sequence(s)?;
            params.materialize(Some(&z))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_new = cfg.max_new_tokens.min(backbone.max_len() - params.dims.t);
    let drawn = (0..n_raw)
        .into_par_iter()
        .map(|j| {
            let seed_index = j % seeds.len();
            let stream = rng::stream_seed(cfg.seed, &label, j as u64);
            let question = backbone.sample(&prompts[seed_index], max_new, cfg.temperature, stream)?;
            Ok(SyntheticRecord {
                question,
                answer: None,
                seed_index,
                method_tag: tag,
                provenance: Provenance {
                    seed: stream,
                    step: j,
                    temperature: cfg.temperature,
                    candidate: 0,
                    refine_rounds: None,
                    answer_seed: None,
                    answer_temperature: None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(drawn.into_iter().filter(|r| !r.question.is_empty()).collect())
}

/// Fills in answers by continuing each question with the backbone alone.
pub fn generate_answers(
    backbone: &BackboneModel,
    records: Vec<SyntheticRecord>,
    cfg: &SamplingConfig,
) -> Result<Vec<SyntheticRecord>> {
    let bos = backbone.bos_prompt();
    records
        .into_par_iter()
        .enumerate()
        .map(|(j, mut r)| {
            r.validate()?;
            let label = format!("{}/answer", r.method_tag);
            let stream = rng::stream_seed(cfg.seed, &label, j as u64);
            let room = backbone.max_len().saturating_sub(1 + r.question.len());
            let answer = backbone.sample_continuation(
                &bos,
                &r.question,
                cfg.max_new_tokens.min(room),
                cfg.temperature,
                stream,
            )?;
            r.answer = Some(answer);
            r.provenance.answer_seed = Some(stream);
            r.provenance.answer_temperature = Some(cfg.temperature);
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{softmax_with_temperature, BackboneConfig};
    use crate::softsrv::PromptDims;
    use crate::vocab::Vocabulary;

    fn vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (4..n).map(|i| format!("w{i}")).collect();
        Vocabulary::build(words.iter().map(String::as_str), n).unwrap()
    }

    fn fixture() -> (BackboneModel, SequenceEmbedder) {
        let c = BackboneConfig { vocab_size: 16, d_model: 8, n_layers: 1, n_heads: 2, ffn_dim: 16, max_len: 24 };
        let mut b = BackboneModel::init(c, vocab(16), 3).unwrap();
        b.freeze();
        let mut e = BackboneModel::init(BackboneConfig { d_model: 6, ..c }, vocab(16), 4).unwrap();
        e.freeze();
        (b, SequenceEmbedder::new(e, 4).unwrap())
    }

    fn dims() -> PromptDims {
        PromptDims { d: 8, t: 3, d_e: 4, k: 2, mlp_hidden: 6, mlp_layers: 2 }
    }

    fn seeds() -> Vec<TokenSequence> {
        vec![vec![4, 5, 6].into(), vec![7, 8].into(), vec![9, 10, 11, 12].into()]
    }

    #[test]
    fn round_robin_covers_seeds_evenly() {
        let (b, e) = fixture();
        let p = SoftSrvParams::init(Variant::MlpConcat, dims(), 1, &b).unwrap();
        let cfg = SamplingConfig::new(1.0, 6, 9);
        for n_raw in [6, 7, 8] {
            let recs = generate_questions(&b, &e, &p, &seeds(), n_raw, &cfg).unwrap();
            let steps: Vec<_> = recs.iter().map(|r| r.provenance.step).collect();
            for r in &recs {
                assert_eq!(r.seed_index, r.provenance.step % 3);
                assert_eq!(r.method_tag, MethodTag::SsMc);
            }
            assert!(steps.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn round_robin_counts_with_nonempty_draws() {
        let (b, e) = fixture();
        let p = SoftSrvParams::init(Variant::NonContextual, dims(), 1, &b).unwrap();
        // Bias the head away from EOS so no draw comes back empty.
        let mut b = b.unfrozen_copy();
        b.weights_mut().unwrap().b_out[crate::vocab::EOS as usize] = -50.0;
        b.freeze();
        let n_raw = 2 * seeds().len() + 2;
        let recs = generate_questions(&b, &e, &p, &seeds(), n_raw, &SamplingConfig::new(1.0, 4, 2)).unwrap();
        assert_eq!(recs.len(), n_raw);
        let mut counts = [0; 3];
        recs.iter().for_each(|r| counts[r.seed_index] += 1);
        assert_eq!(counts, [3, 3, 2]);
    }

    #[test]
    fn greedy_non_contextual_questions_are_identical() {
        let (b, e) = fixture();
        let p = SoftSrvParams::init(Variant::NonContextual, dims(), 5, &b).unwrap();
        let recs = generate_questions(&b, &e, &p, &seeds(), 9, &SamplingConfig::new(0.0, 8, 3)).unwrap();
        let direct = b.sample(&p.materialize(None).unwrap(), 8, 0.0, 0).unwrap();
        if direct.is_empty() {
            assert!(recs.is_empty());
        } else {
            assert_eq!(recs.len(), 9);
            assert!(recs.iter().all(|r| r.question == direct));
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let (b, e) = fixture();
        let p = SoftSrvParams::init(Variant::Mixture, dims(), 2, &b).unwrap();
        let cfg = SamplingConfig::new(1.0, 6, 11);
        let a = generate_questions(&b, &e, &p, &seeds(), 10, &cfg).unwrap();
        assert_eq!(a, generate_questions(&b, &e, &p, &seeds(), 10, &cfg).unwrap());
        let other = generate_questions(&b, &e, &p, &seeds(), 10, &SamplingConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
        let ans = generate_answers(&b, a.clone(), &cfg).unwrap();
        assert_eq!(ans, generate_answers(&b, a, &cfg).unwrap());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (b, e) = fixture();
        let p = SoftSrvParams::init(Variant::MlpConcat, dims(), 1, &b).unwrap();
        let cfg = SamplingConfig::new(1.0, 4, 0);
        assert!(matches!(generate_questions(&b, &e, &p, &[], 3, &cfg), Err(Error::Validation(_))));
        assert!(matches!(generate_questions(&b, &e, &p, &seeds(), 0, &cfg), Err(Error::Validation(_))));
        let wide = SoftSrvParams::init(Variant::MlpConcat, PromptDims { d_e: 3, ..dims() }, 1, &b).unwrap();
        assert!(matches!(generate_questions(&b, &e, &wide, &seeds(), 3, &cfg), Err(Error::Validation(_))));
    }

    fn record(q: Vec<u32>) -> SyntheticRecord {
        SyntheticRecord {
            question: q.into(),
            answer: None,
            seed_index: 0,
            method_tag: MethodTag::SsMc,
            provenance: Provenance {
                seed: 0,
                step: 0,
                temperature: 1.0,
                candidate: 0,
                refine_rounds: None,
                answer_seed: None,
                answer_temperature: None,
            },
        }
    }

    #[test]
    fn answers_empty_and_greedy() {
        let (b, _) = fixture();
        assert!(generate_answers(&b, vec![], &SamplingConfig::new(1.0, 4, 0)).unwrap().is_empty());
        let recs = generate_answers(&b, vec![record(vec![4, 5]), record(vec![6])], &SamplingConfig::new(0.0, 5, 1)).unwrap();
        for r in &recs {
            let want = b.sample_continuation(&b.bos_prompt(), &r.question, 5, 0.0, 99).unwrap();
            assert_eq!(r.answer.as_ref().unwrap(), &want);
            assert_eq!(r.provenance.answer_temperature, Some(0.0));
        }
    }

    #[test]
    fn answer_token_frequencies_match_softmax() {
        let (b, _) = fixture();
        let q = vec![4u32, 5, 6];
        let logits = b.next_logits(b.bos_prompt().values().view(), &q);
        let probs = softmax_with_temperature(&logits, 1.0);
        let n = 10_000;
        let recs = generate_answers(&b, vec![record(q); n], &SamplingConfig::new(1.0, 1, 17)).unwrap();
        let mut counts = vec![0usize; 16];
        for r in &recs {
            match r.answer.as_ref().unwrap().ids().first() {
                Some(&id) => counts[id as usize] += 1,
                None => counts[crate::vocab::EOS as usize] += 1,
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 / n as f64 - probs[i]).abs() < 0.02, "token {i}");
        }
    }
}
