//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng as _;
use softsrv::backbone::{BackboneConfig, BackboneModel};
use softsrv::embedder::{ContextVector, SequenceEmbedder};
use softsrv::optim::ParamSet;
use softsrv::rng;
use softsrv::softsrv::{PromptDims, SoftSrvParams, Variant};
use softsrv::trainer::example_grad;
use softsrv::vocab::{TokenSequence, Vocabulary};

/// A seconds-scale run: one-layer width-16 models and a handful of steps.
pub const TINY_TOML: &str = r#"
preset = "desk"
seed = 7
d_e = 8

[corpus]
n = 200

[backbone]
d_model = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
max_len = 96
pretrain = { steps = 40, lr = 3e-3, batch_size = 8, grad_clip = 1.0 }

[embedder]
d_model = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
max_len = 96
pretrain = { steps = 20, lr = 3e-3, batch_size = 8, grad_clip = 1.0 }

[student]
d_model = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
max_len = 96
pretrain = { steps = 20, lr = 3e-3, batch_size = 8, grad_clip = 1.0 }

[softsrv]
t = 4
mlp_hidden = 16

[train]
steps = 30

[generation]
n_raw = 60
max_new_tokens = 40

[postprocess]
svd_dims = 8
clusters = 8
n_s = 30

[mauve]
k = 8

[student_eval]
steps = 20
"#;

/// The tiny config writing into `out_dir`.
pub fn tiny_config(out_dir: &std::path::Path) -> softsrv::config::ExperimentConfig {
    let mut cfg = softsrv::config::ExperimentConfig::from_toml_str(TINY_TOML, softsrv::config::Preset::Desk).unwrap();
    cfg.paths.out_dir = out_dir.to_path_buf();
    cfg
}

pub const GRAD_FLOOR: f64 = 1e-6;

pub const VARIANTS: [Variant; 3] = [Variant::NonContextual, Variant::Mixture, Variant::MlpConcat];

/// d = 8, t = 4, d_e = 4, k = 2.
pub fn grad_dims() -> PromptDims {
    PromptDims { d: 8, t: 4, d_e: 4, k: 2, mlp_hidden: 6, mlp_layers: 3 }
}

pub struct GradFixture {
    pub backbone: BackboneModel,
    pub embedder: SequenceEmbedder,
    pub target: TokenSequence,
}

pub fn grad_fixture() -> GradFixture {
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(words.iter().map(String::as_str), 24).unwrap();
    let cfg = BackboneConfig { vocab_size: vocab.len(), d_model: 8, n_layers: 2, n_heads: 2, ffn_dim: 16, max_len: 16 };
    let mut backbone = BackboneModel::init(cfg, vocab.clone(), 11).unwrap();
    backbone.freeze();
    let emb_cfg = BackboneConfig { d_model: 6, n_heads: 1, n_layers: 1, ..cfg };
    let mut emb_model = BackboneModel::init(emb_cfg, vocab.clone(), 12).unwrap();
    emb_model.freeze();
    let embedder = SequenceEmbedder::new(emb_model, 4).unwrap();
    let target = vocab.encode("w3 w1 w4 w1 w5 w9").with_eos();
    GradFixture { backbone, embedder, target }
}

/// Largest relative error between the analytic parameter gradient of the
/// reconstruction loss and central differences, over every parameter.
pub fn max_relative_gradient_error(f: &GradFixture, variant: Variant) -> f64 {
    let mut params = SoftSrvParams::init(variant, grad_dims(), 5, &f.backbone).unwrap();
    let mut r = rng::seeded(99);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    let z: Option<ContextVector> = variant.is_contextual().then(|| f.embedder.embed_sequence(&f.target).unwrap());
    let (_, grad) = example_grad(&f.backbone, &params, z.as_ref(), &f.target).unwrap();
    let loss = |p: &SoftSrvParams| f.backbone.causal_loss(&p.materialize(z.as_ref()).unwrap(), &f.target).unwrap();

    let h = 1e-5;
    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].len();
        for i in 0..len {
            let orig = params.tensors()[ti][i];
            params.tensors_mut()[ti][i] = orig + h;
            let up = loss(&params);
            params.tensors_mut()[ti][i] = orig - h;
            let down = loss(&params);
            params.tensors_mut()[ti][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[flat];
            flat += 1;
            // Central differences carry ~1e-11 of round-off, so the
            // denominator is floored to keep near-zero entries meaningful.
            let e = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_FLOOR);
            worst = worst.max(e);
        }
    }
    worst
}
