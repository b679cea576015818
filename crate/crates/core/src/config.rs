//! Experiment configuration. Files are TOML and may be partial: keys that
//! are present override the chosen preset, everything else comes from it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::grammar::GrammarId;
use crate::mauve::MauveConfig;
use crate::postprocess::PostprocessConfig;
use crate::rng::stream_seed;
use crate::softsrv::{PromptDims, Variant};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Softsrv,
    Pt,
    Ptsr,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softsrv" => Ok(Method::Softsrv),
            "pt" => Ok(Method::Pt),
            "ptsr" => Ok(Method::Ptsr),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub pretrain: PretrainSpec,
}

impl ModelSpec {
    pub fn backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Examples drawn from each grammar before the 90/10 split.
    pub n: usize,
    pub vocab_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftSrvSpec {
    pub variant: Variant,
    pub t: usize,
    pub k: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub method: Method,
    /// Seed examples taken from the train fold; absent means all of it.
    pub n_seeds: Option<usize>,
    pub n_raw: usize,
    pub question_temperature: f64,
    pub answer_temperature: f64,
    pub template_temperature: f64,
    pub max_new_tokens: usize,
    pub refine_rounds: usize,
    pub diversified_template: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessSpec {
    pub svd_dims: usize,
    pub clusters: usize,
    pub batch: usize,
    pub iters: usize,
    pub n_s: usize,
    pub ngram: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentEvalSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Optional pre-built checkpoints used instead of pretraining.
    pub backbone: Option<PathBuf>,
    pub embedder: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub grammar: GrammarId,
    pub corpus: CorpusSpec,
    pub backbone: ModelSpec,
    pub embedder: ModelSpec,
    pub d_e: usize,
    pub student: ModelSpec,
    pub softsrv: SoftSrvSpec,
    pub train: TrainSpec,
    pub generation: GenerationSpec,
    pub postprocess: PostprocessSpec,
    pub mauve: MauveConfig,
    pub student_eval: StudentEvalSpec,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let backbone = ModelSpec {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 256,
            pretrain: PretrainSpec { steps: 2000, lr: 3e-3, batch_size: 8, grad_clip: Some(1.0) },
        };
        let small = ModelSpec { d_model: 32, n_layers: 2, n_heads: 2, ffn_dim: 128, ..backbone };
        let train = TrainConfig::desk(0);
        let pp = PostprocessConfig::desk();
        Self {
            preset: Preset::Desk,
            seed: 1,
            grammar: GrammarId::Arithmetic,
            corpus: CorpusSpec { n: 1000, vocab_cap: 512 },
            backbone,
            embedder: small,
            d_e: 32,
            student: small,
            softsrv: SoftSrvSpec { variant: Variant::MlpConcat, t: 16, k: 2, mlp_hidden: 128, mlp_layers: 3 },
            train: TrainSpec {
                steps: train.steps,
                lr: train.lr,
                batch_size: train.batch_size,
                adam_betas: train.adam_betas,
                adam_eps: train.adam_eps,
                grad_clip: train.grad_clip,
            },
            generation: GenerationSpec {
                method: Method::Softsrv,
                n_seeds: None,
                n_raw: 2000,
                question_temperature: 1.0,
                answer_temperature: 1.0,
                template_temperature: 2.0,
                max_new_tokens: 48,
                refine_rounds: 3,
                diversified_template: true,
            },
            postprocess: PostprocessSpec {
                svd_dims: pp.svd_dims,
                clusters: pp.clusters,
                batch: pp.batch,
                iters: pp.iters,
                n_s: pp.n_s,
                ngram: 13,
            },
            mauve: MauveConfig::default(),
            student_eval: StudentEvalSpec { steps: 1000, lr: 1e-3, batch_size: 8 },
            paths: Paths { out_dir: PathBuf::from("runs/desk"), backbone: None, embedder: None, student: None },
        }
    }

    /// The published settings: 128 soft tokens, 20K steps at 5e-6, 100K raw
    /// questions cut to 50K through 700 clusters in 100 SVD dims, 13-gram
    /// decontamination and 32-bin MAUVE.
    pub fn paper() -> Self {
        let desk = Self::desk();
        let train = TrainConfig::paper(0);
        let pp = PostprocessConfig::paper();
        Self {
            preset: Preset::Paper,
            softsrv: SoftSrvSpec { t: 128, ..desk.softsrv },
            train: TrainSpec { steps: train.steps, lr: train.lr, ..desk.train },
            generation: GenerationSpec { n_raw: 100_000, ..desk.generation },
            postprocess: PostprocessSpec {
                svd_dims: pp.svd_dims,
                clusters: pp.clusters,
                n_s: pp.n_s,
                ..desk.postprocess
            },
            mauve: MauveConfig { k: 32, ..desk.mauve },
            paths: Paths { out_dir: PathBuf::from("runs/paper"), ..desk.paths },
            ..desk
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses a possibly partial TOML document over the preset it names
    /// (or `fallback`).
    pub fn from_toml_str(text: &str, fallback: Preset) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match overrides.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => fallback,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overrides);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, fallback)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn prompt_dims(&self) -> PromptDims {
        PromptDims {
            d: self.backbone.d_model,
            t: self.softsrv.t,
            d_e: self.d_e,
            k: self.softsrv.k,
            mlp_hidden: self.softsrv.mlp_hidden,
            mlp_layers: self.softsrv.mlp_layers,
        }
    }

    /// Seed for a named stage, derived from the master seed.
    pub fn stage_seed(&self, label: &str) -> u64 {
        stream_seed(self.seed, label, 0)
    }

    pub fn pretrain_config(&self, spec: &ModelSpec, label: &str) -> PretrainConfig {
        PretrainConfig {
            steps: spec.pretrain.steps,
            lr: spec.pretrain.lr,
            batch_size: spec.pretrain.batch_size,
            seed: self.stage_seed(label),
            grad_clip: spec.pretrain.grad_clip,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            adam_betas: self.train.adam_betas,
            adam_eps: self.train.adam_eps,
            seed: self.stage_seed("train"),
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn student_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.student_eval.steps,
            lr: self.student_eval.lr,
            batch_size: self.student_eval.batch_size,
            seed: self.stage_seed("student"),
            ..TrainConfig::desk(0)
        }
    }

    pub fn postprocess_config(&self) -> PostprocessConfig {
        PostprocessConfig {
            svd_dims: self.postprocess.svd_dims,
            clusters: self.postprocess.clusters,
            batch: self.postprocess.batch,
            iters: self.postprocess.iters,
            n_s: self.postprocess.n_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, spec) in [("backbone", &self.backbone), ("embedder", &self.embedder), ("student", &self.student)] {
            spec.backbone_config(8).validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if spec.pretrain.batch_size == 0 || !(spec.pretrain.lr > 0.0) {
                return bad(format!("{name}: pretraining needs a positive batch size and learning rate"));
            }
        }
        if self.d_e == 0 || self.d_e > self.embedder.d_model {
            return bad(format!("d_e = {} must lie in 1..={}", self.d_e, self.embedder.d_model));
        }
        self.prompt_dims().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.softsrv.t + self.generation.max_new_tokens > self.backbone.max_len {
            return bad("prompt length plus max_new_tokens exceeds the backbone max length".into());
        }
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.student_train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.corpus.n < 20 {
            return bad("corpus.n must be at least 20".into());
        }
        let g = &self.generation;
        if g.n_raw == 0 || g.n_seeds == Some(0) || g.refine_rounds == 0 || g.max_new_tokens == 0 {
            return bad("generation counts must be positive".into());
        }
        for t in [g.question_temperature, g.answer_temperature, g.template_temperature] {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("invalid temperature {t}"));
            }
        }
        let p = &self.postprocess;
        if p.svd_dims == 0 || p.clusters == 0 || p.batch == 0 || p.ngram == 0 || p.n_s == 0 {
            return bad("postprocess settings must be positive".into());
        }
        if self.mauve.k == 0 || !(self.mauve.c > 0.0) || self.mauve.grid_size == 0 {
            return bad("mauve settings must be positive".into());
        }
        for (name, p) in [("backbone", &self.paths.backbone), ("embedder", &self.paths.embedder), ("student", &self.paths.student)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{name} checkpoint {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            let cfg = ExperimentConfig::preset(p);
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), Preset::Desk).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_files_override_the_preset() {
        let cfg = ExperimentConfig::from_toml_str("seed = 9\n[train]\nsteps = 5\n", Preset::Desk).unwrap();
        assert_eq!((cfg.seed, cfg.train.steps, cfg.train.lr), (9, 5, 1e-3));
        let cfg = ExperimentConfig::from_toml_str("preset = \"paper\"\n[generation]\nn_raw = 7\n", Preset::Desk).unwrap();
        assert_eq!((cfg.softsrv.t, cfg.generation.n_raw), (128, 7));
        let cfg = ExperimentConfig::from_toml_str("[softsrv]\nvariant = \"SS_NP\"\n", Preset::Paper).unwrap();
        assert_eq!((cfg.softsrv.variant, cfg.preset), (Variant::NonContextual, Preset::Paper));
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["seed = \"x\"", "[train]\nbogus = 1", "not toml [", "preset = \"huge\"", "grammar = \"poems\""] {
            assert!(matches!(ExperimentConfig::from_toml_str(text, Preset::Desk), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(ExperimentConfig::load(Path::new("/no/such/file.toml"), Preset::Desk), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_settings_are_rejected() {
        let mut c = ExperimentConfig::desk();
        c.d_e = 64;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.paths.backbone = Some("/no/such/backbone.ckpt".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::desk();
        c.softsrv.t = 250;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.generation.n_raw = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let c = ExperimentConfig::desk();
        assert_ne!(c.stage_seed("train"), c.stage_seed("generate"));
        assert_eq!(c.train_config().seed, c.stage_seed("train"));
    }
}
