//! The lossy sequence embedding `E(x)`: mean of a small frozen model's
//! token-embedding rows, truncated to the first `d_e` coordinates.

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::vocab::TokenSequence;

/// A `d_e`-dimensional context vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(Array1<f64>);

impl ContextVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("context vector has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEmbedder {
    model: BackboneModel,
    d_e: usize,
}

impl SequenceEmbedder {
    pub fn new(model: BackboneModel, d_e: usize) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::validation("embedder model must be frozen"));
        }
        if d_e == 0 || d_e > model.d_model() {
            return Err(Error::validation(format!(
                "context dimension {d_e} must be in 1..={}",
                model.d_model()
            )));
        }
        Ok(Self { model, d_e })
    }

    pub fn model(&self) -> &BackboneModel {
        &self.model
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn embed_sequence(&self, x: &TokenSequence) -> Result<ContextVector> {
        if x.is_empty() {
            return Err(Error::validation("cannot embed an empty sequence"));
        }
        self.model.vocab().check(x)?;
        let table = &self.model.weights().tok_emb;
        let mut sum = Array1::<f64>::zeros(self.d_e);
        for &id in x.ids() {
            sum += &table.slice(s![id as usize, ..self.d_e]);
        }
        ContextVector::new(sum / x.len() as f64)
    }

    pub fn embed_all(&self, xs: &[TokenSequence]) -> Result<Vec<ContextVector>> {
        xs.iter().map(|x| self.embed_sequence(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::vocab::Vocabulary;
    use ndarray::array;

    fn embedder(d_e: usize) -> SequenceEmbedder {
        let vocab = Vocabulary::build(["a b c d"], 16).unwrap();
        let cfg = BackboneConfig { vocab_size: vocab.len(), d_model: 4, n_layers: 1, n_heads: 1, ffn_dim: 4, max_len: 8 };
        let mut m = BackboneModel::init(cfg, vocab, 9).unwrap();
        m.freeze();
        SequenceEmbedder::new(m, d_e).unwrap()
    }

    #[test]
    fn single_token_is_its_truncated_row() {
        let e = embedder(3);
        let z = e.embed_sequence(&TokenSequence(vec![5])).unwrap();
        let row = e.model().weights().tok_emb.slice(s![5, ..3]).to_owned();
        assert_eq!(z.values(), &row);
    }

    #[test]
    fn two_tokens_average_by_hand() {
        let e = embedder(4);
        let t = &e.model().weights().tok_emb;
        let (u, v) = (t.row(4).to_owned(), t.row(6).to_owned());
        let z = e.embed_sequence(&TokenSequence(vec![4, 6])).unwrap();
        for i in 0..4 {
            assert!((z.values()[i] - (u[i] + v[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_gives_identical_vector() {
        let e = embedder(4);
        let a = e.embed_sequence(&TokenSequence(vec![4, 5, 6, 7])).unwrap();
        let b = e.embed_sequence(&TokenSequence(vec![7, 5, 4, 6])).unwrap();
        let max_diff = (a.values() - b.values()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-15);
    }

    #[test]
    fn dimension_contract_and_errors() {
        let e = embedder(2);
        for len in 1..6 {
            let x = TokenSequence(vec![4; len]);
            assert_eq!(e.embed_sequence(&x).unwrap().dim(), 2);
        }
        assert!(matches!(e.embed_sequence(&TokenSequence(vec![])), Err(Error::Validation(_))));
        assert!(ContextVector::new(array![f64::NAN]).is_err());
    }

    #[test]
    fn unfrozen_model_rejected() {
        let e = embedder(2);
        assert!(SequenceEmbedder::new(e.model().unfrozen_copy(), 2).is_err());
    }
}
