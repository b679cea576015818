//! The frozen language model `L = H ∘ I`: a token-embedding layer `I` and a
//! transformer body `H` that accepts an arbitrary dense prefix in place of
//! embedded tokens.

mod compute;
mod pretrain;
mod sampling;
mod weights;

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pretrain::{fit_full_weights, pretrain_backbone, PretrainConfig};
pub use sampling::{sample_from_logits, softmax_with_temperature};
pub use weights::{BackboneConfig, LayerWeights, Weights};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::vocab::{TokenSequence, Vocabulary, BOS};

/// A dense prompt `d × t`: column `j` stands where the embedding of the
/// `j`-th input token would otherwise be.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    values: Array2<f64>,
}

impl PromptMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::validation("prompt must have at least one column"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("prompt has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn zeros(d: usize, t: usize) -> Self {
        Self { values: Array2::zeros((d, t)) }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    /// Prompt length in soft tokens.
    pub fn t(&self) -> usize {
        self.values.ncols()
    }
}

/// Serializable description stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BackboneMeta {
    config: BackboneConfig,
    vocab: Vec<String>,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    vocab: Vocabulary,
    weights: Weights,
    frozen: bool,
}

impl BackboneModel {
    /// A fresh, unfrozen model with seeded initialization.
    pub fn init(config: BackboneConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let weights = Weights::init(&config, seed);
        Self::from_weights(config, vocab, weights)
    }

    pub fn from_weights(config: BackboneConfig, vocab: Vocabulary, weights: Weights) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::validation(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if weights.layout() != Weights::zeros(&config).layout() {
            return Err(Error::validation("weight shapes do not match the config"));
        }
        Ok(Self { config, vocab, weights, frozen: false })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable access to the weights; refused once frozen.
    pub fn weights_mut(&mut self) -> Result<&mut Weights> {
        if self.frozen {
            return Err(Error::validation("backbone is frozen"));
        }
        Ok(&mut self.weights)
    }

    /// An unfrozen deep copy, e.g. to fine-tune a student.
    pub fn unfrozen_copy(&self) -> Self {
        Self { frozen: false, ..self.clone() }
    }

    /// SHA-256 over the config and every weight bit.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in self.weights.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_prefix(&self, prefix: &PromptMatrix) -> Result<()> {
        if prefix.d() != self.config.d_model {
            return Err(Error::validation(format!(
                "prompt has {} rows, model dimension is {}",
                prefix.d(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    fn check_target(&self, prefix: &PromptMatrix, target: &TokenSequence) -> Result<()> {
        self.check_prefix(prefix)?;
        if target.is_empty() {
            return Err(Error::validation("empty target sequence"));
        }
        self.vocab.check(target)?;
        if prefix.t() + target.len() > self.config.max_len {
            return Err(Error::capacity(format!(
                "prompt length {} + target length {} exceeds max length {}",
                prefix.t(),
                target.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// The embedding layer `I(x)`: a `d × len` matrix whose column `j` is
    /// the table row of `x[j]`.
    pub fn token_embed(&self, x: &TokenSequence) -> Result<Array2<f64>> {
        self.vocab.check(x)?;
        let mut out = Array2::zeros((self.config.d_model, x.len()));
        for (j, &id) in x.ids().iter().enumerate() {
            out.column_mut(j).assign(&self.weights.tok_emb.row(id as usize));
        }
        Ok(out)
    }

    /// The one-column prompt holding the BOS embedding; used wherever a
    /// sequence is modelled without a soft prompt.
    pub fn bos_prompt(&self) -> PromptMatrix {
        let mut p = PromptMatrix::zeros(self.config.d_model, 1);
        p.values.column_mut(0).assign(&self.weights.tok_emb.row(BOS as usize));
        p
    }

    /// Next-token logits, one row per target position: row `j` predicts
    /// `target[j]` from the prefix and `target[..j]`.
    pub fn forward_logits(&self, prefix: &PromptMatrix, target: &TokenSequence) -> Result<Array2<f64>> {
        self.check_target(prefix, target)?;
        let inputs = &target.ids()[..target.len() - 1];
        let (hidden, _) = compute::hidden(&self.config, &self.weights, prefix.values.view(), inputs, false);
        let t = prefix.t();
        Ok(compute::project(&self.weights, hidden.slice(s![t - 1.., ..])))
    }

    /// Mean negative log-likelihood of `target` given the prefix.
    pub fn causal_loss(&self, prefix: &PromptMatrix, target: &TokenSequence) -> Result<f64> {
        let logits = self.forward_logits(prefix, target)?;
        Ok(compute::cross_entropy(&logits, target.ids()).0)
    }

    /// Loss and `∂loss/∂prefix` (d × t). Weights are not touched.
    pub fn loss_grad_wrt_prefix(&self, prefix: &PromptMatrix, target: &TokenSequence) -> Result<(f64, Array2<f64>)> {
        let (loss, dprefix, _) = self.loss_and_grads(prefix, target, false)?;
        Ok((loss, dprefix))
    }

    /// Loss, prefix gradient and, if `with_weights`, gradients of every weight.
    pub(crate) fn loss_and_grads(
        &self,
        prefix: &PromptMatrix,
        target: &TokenSequence,
        with_weights: bool,
    ) -> Result<(f64, Array2<f64>, Option<Weights>)> {
        self.check_target(prefix, target)?;
        let inputs = &target.ids()[..target.len() - 1];
        let (hidden, trace) = compute::hidden(&self.config, &self.weights, prefix.values.view(), inputs, true);
        let trace = trace.expect("trace requested");
        let t = prefix.t();
        let rows = hidden.slice(s![t - 1.., ..]);
        let logits = compute::project(&self.weights, rows);
        let (loss, dlogits) = compute::cross_entropy(&logits, target.ids());

        let mut grads = with_weights.then(|| Weights::zeros(&self.config));
        if let Some(g) = grads.as_mut() {
            g.w_out += &rows.t().dot(&dlogits);
            g.b_out += &dlogits.sum_axis(ndarray::Axis(0));
        }
        let mut dhidden = Array2::zeros(hidden.raw_dim());
        dhidden.slice_mut(s![t - 1.., ..]).assign(&dlogits.dot(&self.weights.w_out.t()));
        let dprefix = compute::backward(&self.config, &self.weights, &trace, &dhidden, grads.as_mut());
        Ok((loss, dprefix, grads))
    }

    /// Logits for the token following `prefix` and `tokens`.
    pub fn next_logits(&self, prefix: ArrayView2<f64>, tokens: &[u32]) -> ndarray::Array1<f64> {
        let (hidden, _) = compute::hidden(&self.config, &self.weights, prefix, tokens, false);
        let last = hidden.nrows() - 1;
        compute::project(&self.weights, hidden.slice(s![last..=last, ..])).row(0).to_owned()
    }

    /// Autoregressive decoding from the prompt until EOS (not included in
    /// the output) or `max_len` tokens. `temperature == 0` is greedy with
    /// ties going to the lowest id.
    pub fn sample(&self, prefix: &PromptMatrix, max_len: usize, temperature: f64, seed: u64) -> Result<TokenSequence> {
        self.sample_continuation(prefix, &TokenSequence::default(), max_len, temperature, seed)
    }

    /// Like [`sample`](Self::sample) but with `forced` tokens placed after
    /// the prompt before decoding starts. Only the new tokens are returned.
    pub fn sample_continuation(
        &self,
        prefix: &PromptMatrix,
        forced: &TokenSequence,
        max_len: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<TokenSequence> {
        self.check_prefix(prefix)?;
        self.vocab.check(forced)?;
        sampling::decode(self, prefix, forced.ids(), max_len, temperature, seed)
    }

    pub fn to_container(&self) -> Container {
        let meta = BackboneMeta { config: self.config, vocab: self.vocab.tokens().to_vec(), frozen: self.frozen };
        let mut c = Container::new("backbone", serde_json::to_value(meta).expect("meta serializes"));
        for ((name, shape), data) in self.weights.layout().into_iter().zip(self.weights.tensors()) {
            c.push(name, shape, data.to_vec());
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind("backbone")?;
        let meta: BackboneMeta = c.meta_as()?;
        let vocab = Vocabulary::from_tokens(meta.vocab)?;
        meta.config.validate()?;
        let mut weights = Weights::zeros(&meta.config);
        let layout = weights.layout();
        for ((name, shape), dst) in layout.into_iter().zip(weights.tensors_mut()) {
            dst.copy_from_slice(&c.pop(&name, &shape)?);
        }
        c.finish()?;
        let mut model = Self::from_weights(meta.config, vocab, weights)?;
        model.frozen = meta.frozen;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}
