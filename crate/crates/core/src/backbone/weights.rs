use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng;

/// Shape hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Maximum number of rows (prompt columns plus tokens) the model accepts.
    pub max_len: usize,
}

impl BackboneConfig {
    /// Default generator backbone: d = 64, 4 layers, 4 heads, FFN 256, m = 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, n_layers: 4, n_heads: 4, ffn_dim: 256, max_len: 256 }
    }

    /// Half-width two-layer model used for the context embedder and student.
    pub fn small(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 32, n_layers: 2, n_heads: 2, ffn_dim: 128, max_len: 256 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::validation("vocabulary too small"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_len < 2 {
            return Err(Error::validation("degenerate backbone shape"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All backbone tensors. Linear maps are stored input-major (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// The token-embedding layer: one row per vocabulary id.
    pub tok_emb: Array2<f64>,
    /// Learned absolute positions, added to token rows only.
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Weights {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let layer = LayerWeights {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        };
        Self {
            tok_emb: Array2::zeros((cfg.vocab_size, d)),
            pos_emb: Array2::zeros((cfg.max_len, d)),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            w_out: Array2::zeros((d, cfg.vocab_size)),
            b_out: Array1::zeros(cfg.vocab_size),
        }
    }

    /// GPT-2 style initialization: N(0, 0.02) matrices, residual output
    /// projections shrunk by `1/sqrt(2 * n_layers)`, unit norm gains.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let resid = Normal::new(0.0, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).unwrap();
        let mut fill = |a: &mut Array2<f64>, dist: &Normal<f64>| {
            a.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        };
        fill(&mut w.tok_emb, &normal);
        fill(&mut w.pos_emb, &normal);
        for l in &mut w.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(&mut l.wq, &normal);
            fill(&mut l.wk, &normal);
            fill(&mut l.wv, &normal);
            fill(&mut l.wo, &resid);
            fill(&mut l.w1, &normal);
            fill(&mut l.w2, &resid);
        }
        w.lnf_g.fill(1.0);
        fill(&mut w.w_out, &normal);
        w
    }

    /// `(name, shape)` of every tensor in [`ParamSet`] order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.shape().to_vec()),
            ("pos_emb".to_string(), self.pos_emb.shape().to_vec()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let names = [
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b",
                "w1", "b1", "w2", "b2",
            ];
            let shapes = [
                l.ln1_g.shape(),
                l.ln1_b.shape(),
                l.wq.shape(),
                l.bq.shape(),
                l.wk.shape(),
                l.bk.shape(),
                l.wv.shape(),
                l.bv.shape(),
                l.wo.shape(),
                l.bo.shape(),
                l.ln2_g.shape(),
                l.ln2_b.shape(),
                l.w1.shape(),
                l.b1.shape(),
                l.w2.shape(),
                l.b2.shape(),
            ];
            for (n, s) in names.iter().zip(shapes) {
                out.push((format!("layers.{i}.{n}"), s.to_vec()));
            }
        }
        out.push(("lnf_g".into(), self.lnf_g.shape().to_vec()));
        out.push(("lnf_b".into(), self.lnf_b.shape().to_vec()));
        out.push(("w_out".into(), self.w_out.shape().to_vec()));
        out.push(("b_out".into(), self.b_out.shape().to_vec()));
        out
    }
}

macro_rules! slices {
    ($self:expr, $as:ident, $iter:ident) => {{
        let mut v = vec![$self.tok_emb.$as().unwrap(), $self.pos_emb.$as().unwrap()];
        for l in $self.layers.$iter() {
            v.push(l.ln1_g.$as().unwrap());
            v.push(l.ln1_b.$as().unwrap());
            v.push(l.wq.$as().unwrap());
            v.push(l.bq.$as().unwrap());
            v.push(l.wk.$as().unwrap());
            v.push(l.bk.$as().unwrap());
            v.push(l.wv.$as().unwrap());
            v.push(l.bv.$as().unwrap());
            v.push(l.wo.$as().unwrap());
            v.push(l.bo.$as().unwrap());
            v.push(l.ln2_g.$as().unwrap());
            v.push(l.ln2_b.$as().unwrap());
            v.push(l.w1.$as().unwrap());
            v.push(l.b1.$as().unwrap());
            v.push(l.w2.$as().unwrap());
            v.push(l.b2.$as().unwrap());
        }
        v.push($self.lnf_g.$as().unwrap());
        v.push($self.lnf_b.$as().unwrap());
        v.push($self.w_out.$as().unwrap());
        v.push($self.b_out.$as().unwrap());
        v
    }};
}

impl ParamSet for Weights {
    fn tensors(&self) -> Vec<&[f64]> {
        slices!(self, as_slice, iter)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        slices!(self, as_slice_mut, iter_mut)
    }
}
