//! Parameterized families of soft prompts `P_θ(z)`.
//!
//! * [`Variant::NonContextual`]: `θ = P`, the `d × t` prompt itself.
//! * [`Variant::Mixture`]: `P(z) = Σ_i w_i P_i` with `w = softmax(A z + b)`.
//! * [`Variant::MlpConcat`]: column `j` of `P(z)` is the output of its own
//!   small ReLU network applied to `z`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, PromptMatrix};
use crate::checkpoint::Container;
use crate::embedder::ContextVector;
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng;
use crate::vocab::UNK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SS_NP")]
    NonContextual,
    #[serde(rename = "SS_MP")]
    Mixture,
    #[serde(rename = "SS_MC")]
    MlpConcat,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NonContextual, Variant::Mixture, Variant::MlpConcat];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::NonContextual => "SS_NP",
            Variant::Mixture => "SS_MP",
            Variant::MlpConcat => "SS_MC",
        }
    }

    pub fn is_contextual(self) -> bool {
        self != Variant::NonContextual
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SS_NP" | "np" | "noncontextual" => Ok(Variant::NonContextual),
            "SS_MP" | "mp" | "mixture" => Ok(Variant::Mixture),
            "SS_MC" | "mc" | "mlp" => Ok(Variant::MlpConcat),
            other => Err(Error::validation(format!("unknown SoftSRV variant `{other}`"))),
        }
    }
}

/// Shape metadata shared by all variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDims {
    /// Backbone model dimension.
    pub d: usize,
    /// Prompt length in soft tokens.
    pub t: usize,
    /// Context vector dimension.
    pub d_e: usize,
    /// Number of mixture bases.
    pub k: usize,
    pub mlp_hidden: usize,
    /// Number of affine layers in each column network.
    pub mlp_layers: usize,
}

impl PromptDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.t == 0 || self.d_e == 0 || self.k == 0 {
            return Err(Error::validation(format!("degenerate prompt dims {self:?}")));
        }
        if self.mlp_layers == 0 || (self.mlp_layers > 1 && self.mlp_hidden == 0) {
            return Err(Error::validation("column networks need at least one layer"));
        }
        Ok(())
    }

    pub fn check_backbone(&self, backbone: &BackboneModel) -> Result<()> {
        self.validate()?;
        if self.d != backbone.d_model() {
            return Err(Error::validation(format!(
                "prompt dimension {} does not match backbone dimension {}",
                self.d,
                backbone.d_model()
            )));
        }
        if self.t >= backbone.max_len() {
            return Err(Error::validation(format!(
                "prompt length {} must be below the max sequence length {}",
                self.t,
                backbone.max_len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonContextualParams {
    pub prompt: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub bases: Vec<Array2<f64>>,
    /// `k × d_e` gate weights.
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
}

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
                .collect(),
        }
    }

    /// Returns the output and the input of every layer.
    fn forward(&self, z: &Array1<f64>) -> (Array1<f64>, Vec<Array1<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = z.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = l.w.dot(&h) + &l.b;
            if i < last {
                out.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        (h, inputs)
    }

    fn backward(&self, inputs: &[Array1<f64>], dout: &Array1<f64>, grad: &mut Mlp) {
        let mut d = dout.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &inputs[i];
            let g = &mut grad.layers[i];
            g.w += &outer(&d, x);
            g.b += &d;
            if i == 0 {
                break;
            }
            d = l.w.t().dot(&d);
            // `x` is the ReLU output of layer i-1.
            d.zip_mut_with(x, |dv, &xv| {
                if xv <= 0.0 {
                    *dv = 0.0;
                }
            });
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        m.row_mut(i).assign(&(b * av));
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConcatParams {
    pub columns: Vec<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    NonContextual(NonContextualParams),
    Mixture(MixtureParams),
    MlpConcat(MlpConcatParams),
}

/// Trainable parameters `θ` of one SoftSRV family plus shape metadata.
/// Gradients are represented by the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSrvParams {
    pub dims: PromptDims,
    pub kind: ParamKind,
}

/// `softmax(A z + b)`.
pub fn mixture_weights(params: &MixtureParams, z: &ContextVector) -> Result<Array1<f64>> {
    if z.dim() != params.gate_w.ncols() {
        return Err(Error::validation(format!(
            "context has dimension {}, gate expects {}",
            z.dim(),
            params.gate_w.ncols()
        )));
    }
    if z.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite context vector"));
    }
    let logits = params.gate_w.dot(z.values()) + &params.gate_b;
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    Ok(e / s)
}

impl SoftSrvParams {
    pub fn variant(&self) -> Variant {
        match self.kind {
            ParamKind::NonContextual(_) => Variant::NonContextual,
            ParamKind::Mixture(_) => Variant::Mixture,
            ParamKind::MlpConcat(_) => Variant::MlpConcat,
        }
    }

    /// Seeded initialization. Prompt columns (non-contextual prompt, mixture
    /// bases, and the output bias of every column network) start as rows of
    /// the backbone's token-embedding table; hidden layers use fan-in scaled
    /// uniform noise and output weights start at zero.
    pub fn init(variant: Variant, dims: PromptDims, seed: u64, backbone: &BackboneModel) -> Result<Self> {
        dims.check_backbone(backbone)?;
        let table = &backbone.weights().tok_emb;
        let first = if table.nrows() > UNK as usize + 1 { UNK as usize + 1 } else { 0 };
        let sample_columns = |stream: u64| -> Array2<f64> {
            let mut r = rng::seeded(rng::stream_seed(seed, "prompt-columns", stream));
            let mut p = Array2::zeros((dims.d, dims.t));
            for j in 0..dims.t {
                let id = r.random_range(first..table.nrows());
                p.column_mut(j).assign(&table.row(id));
            }
            p
        };
        let uniform = |rows: usize, cols: usize, stream: u64| -> Array2<f64> {
            let mut r = rng::seeded(rng::stream_seed(seed, "uniform", stream));
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || r.random_range(-bound..bound))
        };

        let kind = match variant {
            Variant::NonContextual => ParamKind::NonContextual(NonContextualParams { prompt: sample_columns(0) }),
            Variant::Mixture => ParamKind::Mixture(MixtureParams {
                bases: (0..dims.k).map(|i| sample_columns(i as u64)).collect(),
                gate_w: uniform(dims.k, dims.d_e, 0),
                gate_b: Array1::zeros(dims.k),
            }),
            Variant::MlpConcat => {
                let bias_cols = sample_columns(0);
                let mut columns = Vec::with_capacity(dims.t);
                for j in 0..dims.t {
                    let mut layers = Vec::with_capacity(dims.mlp_layers);
                    let mut fan_in = dims.d_e;
                    for l in 0..dims.mlp_layers - 1 {
                        let stream = (j * dims.mlp_layers + l) as u64;
                        layers.push(Dense { w: uniform(dims.mlp_hidden, fan_in, stream), b: Array1::zeros(dims.mlp_hidden) });
                        fan_in = dims.mlp_hidden;
                    }
                    layers.push(Dense { w: Array2::zeros((dims.d, fan_in)), b: bias_cols.column(j).to_owned() });
                    columns.push(Mlp { layers });
                }
                ParamKind::MlpConcat(MlpConcatParams { columns })
            }
        };
        Ok(Self { dims, kind })
    }

    fn check_context<'a>(&self, z: Option<&'a ContextVector>) -> Result<Option<&'a ContextVector>> {
        match (self.variant().is_contextual(), z) {
            (false, _) => Ok(None),
            (true, None) => Err(Error::validation(format!("{} requires a context vector", self.variant()))),
            (true, Some(z)) if z.dim() != self.dims.d_e => Err(Error::validation(format!(
                "context has dimension {}, expected {}",
                z.dim(),
                self.dims.d_e
            ))),
            (true, Some(z)) => Ok(Some(z)),
        }
    }

    /// The prompt `P_θ(z)`. `z` is ignored by the non-contextual variant.
    pub fn materialize(&self, z: Option<&ContextVector>) -> Result<PromptMatrix> {
        let z = self.check_context(z)?;
        let values = match &self.kind {
            ParamKind::NonContextual(p) => p.prompt.clone(),
            ParamKind::Mixture(p) => {
                let w = mixture_weights(p, z.expect("checked"))?;
                let mut out = Array2::zeros((self.dims.d, self.dims.t));
                for (wi, basis) in w.iter().zip(&p.bases) {
                    out.scaled_add(*wi, basis);
                }
                out
            }
            ParamKind::MlpConcat(p) => {
                let z = z.expect("checked").values();
                let mut out = Array2::zeros((self.dims.d, self.dims.t));
                for (j, mlp) in p.columns.iter().enumerate() {
                    out.column_mut(j).assign(&mlp.forward(z).0);
                }
                out
            }
        };
        PromptMatrix::new(values)
    }

    /// Vector-Jacobian product: given `∂ℓ/∂P` (d × t), returns `∂ℓ/∂θ`.
    pub fn param_grad(&self, z: Option<&ContextVector>, upstream: &Array2<f64>) -> Result<SoftSrvParams> {
        if upstream.dim() != (self.dims.d, self.dims.t) {
            return Err(Error::validation(format!(
                "upstream gradient has shape {:?}, expected ({}, {})",
                upstream.dim(),
                self.dims.d,
                self.dims.t
            )));
        }
        let z = self.check_context(z)?;
        // Flat parameter views need row-major storage; backprop may hand
        // over a transposed array.
        let upstream = &upstream.as_standard_layout().into_owned();
        let kind = match &self.kind {
            ParamKind::NonContextual(_) => ParamKind::NonContextual(NonContextualParams { prompt: upstream.clone() }),
            ParamKind::Mixture(p) => {
                let z = z.expect("checked");
                let w = mixture_weights(p, z)?;
                let bases = w.iter().map(|&wi| upstream * wi).collect();
                // ∂ℓ/∂w_i = <U, P_i>, then through the softmax Jacobian.
                let dw: Array1<f64> = p.bases.iter().map(|b| (b * upstream).sum()).collect();
                let mean = w.dot(&dw);
                let dlogits = &w * &(dw - mean);
                ParamKind::Mixture(MixtureParams {
                    bases,
                    gate_w: outer(&dlogits, z.values()),
                    gate_b: dlogits,
                })
            }
            ParamKind::MlpConcat(p) => {
                let z = z.expect("checked").values();
                let columns = p
                    .columns
                    .iter()
                    .enumerate()
                    .map(|(j, mlp)| {
                        let (_, inputs) = mlp.forward(z);
                        let mut g = mlp.zeros_like();
                        mlp.backward(&inputs, &upstream.column(j).to_owned(), &mut g);
                        g
                    })
                    .collect();
                ParamKind::MlpConcat(MlpConcatParams { columns })
            }
        };
        Ok(SoftSrvParams { dims: self.dims, kind })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `(name, shape)` of every tensor in [`ParamSet`] order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match &self.kind {
            ParamKind::NonContextual(p) => out.push(("prompt".into(), p.prompt.shape().to_vec())),
            ParamKind::Mixture(p) => {
                for (i, b) in p.bases.iter().enumerate() {
                    out.push((format!("bases.{i}"), b.shape().to_vec()));
                }
                out.push(("gate_w".into(), p.gate_w.shape().to_vec()));
                out.push(("gate_b".into(), p.gate_b.shape().to_vec()));
            }
            ParamKind::MlpConcat(p) => {
                for (j, mlp) in p.columns.iter().enumerate() {
                    for (l, d) in mlp.layers.iter().enumerate() {
                        out.push((format!("columns.{j}.{l}.w"), d.w.shape().to_vec()));
                        out.push((format!("columns.{j}.{l}.b"), d.b.shape().to_vec()));
                    }
                }
            }
        }
        out
    }

    /// A zero-valued parameter object with the layout implied by `dims`.
    pub fn zeros(variant: Variant, dims: PromptDims) -> Result<Self> {
        dims.validate()?;
        let kind = match variant {
            Variant::NonContextual => ParamKind::NonContextual(NonContextualParams { prompt: Array2::zeros((dims.d, dims.t)) }),
            Variant::Mixture => ParamKind::Mixture(MixtureParams {
                bases: vec![Array2::zeros((dims.d, dims.t)); dims.k],
                gate_w: Array2::zeros((dims.k, dims.d_e)),
                gate_b: Array1::zeros(dims.k),
            }),
            Variant::MlpConcat => {
                let mut layers = Vec::new();
                let mut fan_in = dims.d_e;
                for _ in 0..dims.mlp_layers - 1 {
                    layers.push(Dense { w: Array2::zeros((dims.mlp_hidden, fan_in)), b: Array1::zeros(dims.mlp_hidden) });
                    fan_in = dims.mlp_hidden;
                }
                layers.push(Dense { w: Array2::zeros((dims.d, fan_in)), b: Array1::zeros(dims.d) });
                ParamKind::MlpConcat(MlpConcatParams { columns: vec![Mlp { layers }; dims.t] })
            }
        };
        Ok(Self { dims, kind })
    }

    pub(crate) fn write_into(&self, c: &mut Container) {
        for ((name, shape), data) in self.layout().into_iter().zip(self.tensors()) {
            c.push(name, shape, data.to_vec());
        }
    }

    pub(crate) fn read_from(c: &mut Container, variant: Variant, dims: PromptDims) -> Result<Self> {
        let mut p = Self::zeros(variant, dims)?;
        let layout = p.layout();
        for ((name, shape), dst) in layout.into_iter().zip(p.tensors_mut()) {
            dst.copy_from_slice(&c.pop(&name, &shape)?);
        }
        if p.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::validation("parameters contain non-finite values"));
        }
        Ok(p)
    }
}

impl ParamSet for SoftSrvParams {
    fn tensors(&self) -> Vec<&[f64]> {
        match &self.kind {
            ParamKind::NonContextual(p) => vec![p.prompt.as_slice().unwrap()],
            ParamKind::Mixture(p) => {
                let mut v: Vec<&[f64]> = p.bases.iter().map(|b| b.as_slice().unwrap()).collect();
                v.push(p.gate_w.as_slice().unwrap());
                v.push(p.gate_b.as_slice().unwrap());
                v
            }
            ParamKind::MlpConcat(p) => p
                .columns
                .iter()
                .flat_map(|m| m.layers.iter())
                .flat_map(|d| [d.w.as_slice().unwrap(), d.b.as_slice().unwrap()])
                .collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.kind {
            ParamKind::NonContextual(p) => vec![p.prompt.as_slice_mut().unwrap()],
            ParamKind::Mixture(p) => {
                let mut v: Vec<&mut [f64]> = p.bases.iter_mut().map(|b| b.as_slice_mut().unwrap()).collect();
                v.push(p.gate_w.as_slice_mut().unwrap());
                v.push(p.gate_b.as_slice_mut().unwrap());
                v
            }
            ParamKind::MlpConcat(p) => p
                .columns
                .iter_mut()
                .flat_map(|m| m.layers.iter_mut())
                .flat_map(|d| [d.w.as_slice_mut().unwrap(), d.b.as_slice_mut().unwrap()])
                .collect(),
        }
    }
}
