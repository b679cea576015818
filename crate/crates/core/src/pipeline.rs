//! End-to-end runs: toy data, pretrained fixtures, prompt training,
//! generation, answers, selection, decontamination and evaluation. Every
//! stage writes its artifact to the output directory and reuses it on the
//! next run when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_backbone, BackboneModel};
use crate::baselines::{pt_generate, pt_generate_answers, ptsr_generate, RefineConfig, TemplateKind, TemplateSet, PromptTemplate};
use crate::config::{ExperimentConfig, Method, ModelSpec};
use crate::embedder::{ContextVector, SequenceEmbedder};
use crate::error::{Error, Result};
use crate::generator::{generate_answers, generate_questions, SamplingConfig, SyntheticRecord};
use crate::grammar::{make_toy_corpus, GrammarId, ToyCorpus, ToyExample, ToyGrammar};
use crate::mauve::{mauve_score, MauveConfig, MauveReport};
use crate::postprocess::{decontaminate, select_diverse, RemovedDoc};
use crate::records::{read_records, write_jsonl, write_records};
use crate::softsrv::SoftSrvParams;
use crate::student::{student_eval, EvalReport};
use crate::trainer::{load_params_for, save_params, train, LossTrace};
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Pretrain,
    Train,
    Generate,
    Answers,
    Postprocess,
    Decontaminate,
    Mauve,
    StudentEval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Data,
        Stage::Pretrain,
        Stage::Train,
        Stage::Generate,
        Stage::Answers,
        Stage::Postprocess,
        Stage::Decontaminate,
        Stage::Mauve,
        Stage::StudentEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Answers => "answers",
            Stage::Postprocess => "postprocess",
            Stage::Decontaminate => "decontaminate",
            Stage::Mauve => "mauve",
            Stage::StudentEval => "student_eval",
        }
    }

    /// Process exit code used when this stage fails.
    pub fn exit_code(self) -> i32 {
        10 + self as i32
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: stage.name(), source: Box::new(other) },
    })
}

fn other_grammar(g: GrammarId) -> GrammarId {
    match g {
        GrammarId::Arithmetic => GrammarId::BoolPassage,
        GrammarId::BoolPassage => GrammarId::Arithmetic,
    }
}

/// Vocabulary over both grammars and every shipped template.
pub fn shared_vocab(cap: usize) -> Result<Vocabulary> {
    let mut texts: Vec<String> = Vec::new();
    for g in [GrammarId::Arithmetic, GrammarId::BoolPassage] {
        texts.extend(ToyGrammar::new(g).lexicon());
        for k in [
            TemplateKind::Question,
            TemplateKind::Answer,
            TemplateKind::Critique,
            TemplateKind::Refine,
            TemplateKind::UndiversifiedQuestion,
        ] {
            texts.push(PromptTemplate::builtin(k, g).body().to_string());
        }
    }
    Vocabulary::build(texts.iter().map(String::as_str), cap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Data {
    pub vocab: Vocabulary,
    pub target: ToyCorpus,
    /// Corpus of the grammar the student is pretrained on.
    pub other: ToyCorpus,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Data> {
    let vocab = shared_vocab(cfg.corpus.vocab_cap)?;
    let g = cfg.grammar;
    let target = make_toy_corpus(&ToyGrammar::new(g), cfg.corpus.n, cfg.stage_seed(&format!("corpus/{g}")))?;
    let o = other_grammar(g);
    let other = make_toy_corpus(&ToyGrammar::new(o), cfg.corpus.n, cfg.stage_seed(&format!("corpus/{o}")))?;
    Ok(Data { vocab, target, other })
}

pub fn encode_questions(vocab: &Vocabulary, examples: &[ToyExample]) -> Vec<TokenSequence> {
    examples.iter().map(|e| vocab.encode(&e.question).with_eos()).collect()
}

pub fn encode_full(vocab: &Vocabulary, examples: &[ToyExample]) -> Vec<TokenSequence> {
    examples.iter().map(|e| vocab.encode(&e.full_text()).with_eos()).collect()
}

/// Solved examples from both domains. Bare questions are left out so that
/// a question is always continued by its answer; ending a question is what
/// the soft prompt learns.
pub fn backbone_corpus(data: &Data) -> Vec<TokenSequence> {
    let mut c = encode_full(&data.vocab, &data.target.train);
    c.extend(encode_full(&data.vocab, &data.other.train));
    c
}

/// The other domain only; the student never sees the target grammar.
pub fn student_corpus(data: &Data) -> Vec<TokenSequence> {
    encode_full(&data.vocab, &data.other.train)
}

#[derive(Debug, Clone)]
pub struct Models {
    pub backbone: BackboneModel,
    pub embedder: SequenceEmbedder,
    pub student: BackboneModel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub leading_mean_100: f64,
    pub trailing_mean_100: f64,
}

impl TraceSummary {
    pub fn of(losses: &[f64]) -> Self {
        let t = LossTrace { losses: losses.to_vec(), wall_clock_secs: 0.0 };
        Self { steps: losses.len(), leading_mean_100: t.leading_mean(100), trailing_mean_100: t.trailing_mean(100) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: Option<ExperimentConfig>,
    pub vocab_size: usize,
    pub train_fold: usize,
    pub test_fold: usize,
    pub checksums: BTreeMap<String, String>,
    pub pretrain: BTreeMap<String, TraceSummary>,
    pub softsrv_train: Option<TraceSummary>,
    pub generated: Option<usize>,
    pub answered: Option<usize>,
    pub unique: Option<usize>,
    pub selected: Option<usize>,
    pub decontaminated_removed: Option<usize>,
    pub final_records: Option<usize>,
    pub mauve: Option<MauveSummary>,
    pub student: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MauveSummary {
    pub score: f64,
    pub k: usize,
    pub c: f64,
}

#[derive(Serialize, Deserialize)]
struct Losses {
    losses: Vec<f64>,
}

#[derive(Serialize)]
struct RemovedEntry<'a> {
    index: usize,
    ngram: &'a str,
    question: String,
}

/// Artifact paths inside the output directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads `path` if present, otherwise builds and stores it.
fn cached<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>, build: impl FnOnce() -> Result<T>, store: impl FnOnce(&Path, &T) -> Result<()>) -> Result<T> {
    if path.is_file() {
        return load(path);
    }
    let value = build()?;
    store(path, &value)?;
    Ok(value)
}

/// Everything a run produced, stage by stage.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub summary: Summary,
    pub timings: BTreeMap<String, f64>,
    pub data: Option<Data>,
    pub models: Option<Models>,
    pub params: Option<SoftSrvParams>,
    pub records: Vec<SyntheticRecord>,
    pub mauve: Option<MauveReport>,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        in_stage(Stage::Data, cfg.validate())?;
        let layout = Layout::new(cfg.paths.out_dir.clone());
        in_stage(Stage::Data, fs::create_dir_all(&layout.dir).map_err(Error::from))?;
        let summary = Summary { config: Some(cfg.clone()), ..Summary::default() };
        Ok(Self {
            cfg,
            layout,
            summary,
            timings: BTreeMap::new(),
            data: None,
            models: None,
            params: None,
            records: Vec::new(),
            mauve: None,
        })
    }

    /// Runs every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<()> {
        self.run_range(Stage::Data, last)
    }

    /// Runs `first..=last`. Earlier stages must already be in memory, e.g.
    /// models handed over from another run.
    pub fn run_range(&mut self, first: Stage, last: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| (first..=last).contains(s)) {
            let start = Instant::now();
            let r = match stage {
                Stage::Data => self.data_stage(),
                Stage::Pretrain => self.pretrain_stage(),
                Stage::Train => self.train_stage(),
                Stage::Generate => self.generate_stage(),
                Stage::Answers => self.answers_stage(),
                Stage::Postprocess => self.postprocess_stage(),
                Stage::Decontaminate => self.decontaminate_stage(),
                Stage::Mauve => self.mauve_stage(),
                Stage::StudentEval => self.student_stage(),
            };
            in_stage(stage, r)?;
            self.timings.insert(stage.name().to_string(), start.elapsed().as_secs_f64());
        }
        write_json(&self.layout.path("summary.json"), &self.summary)?;
        write_json(&self.layout.path("timings.json"), &self.timings)?;
        Ok(())
    }

    pub fn data(&self) -> &Data {
        self.data.as_ref().expect("data stage ran")
    }

    pub fn models(&self) -> &Models {
        self.models.as_ref().expect("pretrain stage ran")
    }

    fn data_stage(&mut self) -> Result<()> {
        fs::write(self.layout.path("config.toml"), self.cfg.to_toml_string())?;
        let cfg = &self.cfg;
        let data = cached(&self.layout.path("data.json"), read_json, || prepare_data(cfg), write_json)?;
        let test: String = data.target.test.iter().map(|e| format!("{}\n", e.question)).collect();
        fs::write(self.layout.path("test_questions.txt"), test)?;
        self.summary.vocab_size = data.vocab.len();
        self.summary.train_fold = data.target.train.len();
        self.summary.test_fold = data.target.test.len();
        self.data = Some(data);
        Ok(())
    }

    fn pretrained(&mut self, name: &str, spec: &ModelSpec, given: Option<&PathBuf>, corpus: Vec<TokenSequence>) -> Result<BackboneModel> {
        let data = self.data.as_ref().expect("data stage ran");
        let model = if let Some(p) = given {
            let m = BackboneModel::load(p)?;
            if m.vocab().tokens() != data.vocab.tokens() {
                return Err(Error::Config(format!("{name} checkpoint {} uses a different vocabulary", p.display())));
            }
            m
        } else {
            let path = self.layout.path(&format!("{name}.ckpt"));
            let trace_path = self.layout.path(&format!("{name}_trace.json"));
            if path.is_file() {
                if let Ok(t) = read_json::<Losses>(&trace_path) {
                    self.summary.pretrain.insert(name.to_string(), TraceSummary::of(&t.losses));
                }
                BackboneModel::load(&path)?
            } else {
                let pcfg = self.cfg.pretrain_config(spec, &format!("pretrain/{name}"));
                let (m, trace) = pretrain_backbone(spec.backbone_config(data.vocab.len()), data.vocab.clone(), &corpus, &pcfg)?;
                m.save(&path)?;
                write_json(&trace_path, &Losses { losses: trace.losses.clone() })?;
                self.summary.pretrain.insert(name.to_string(), TraceSummary::of(&trace.losses));
                m
            }
        };
        self.summary.checksums.insert(name.to_string(), model.checksum());
        Ok(model)
    }

    fn pretrain_stage(&mut self) -> Result<()> {
        let (bc, sc) = {
            let data = self.data();
            (backbone_corpus(data), student_corpus(data))
        };
        let cfg = self.cfg.clone();
        let backbone = self.pretrained("backbone", &cfg.backbone, cfg.paths.backbone.as_ref(), bc.clone())?;
        let embedder_model = self.pretrained("embedder", &cfg.embedder, cfg.paths.embedder.as_ref(), bc)?;
        let student = self.pretrained("student", &cfg.student, cfg.paths.student.as_ref(), sc)?;
        let embedder = SequenceEmbedder::new(embedder_model, cfg.d_e)?;
        self.models = Some(Models { backbone, embedder, student });
        Ok(())
    }

    fn train_stage(&mut self) -> Result<()> {
        if self.cfg.generation.method != Method::Softsrv {
            return Ok(());
        }
        let path = self.layout.path("params.ckpt");
        let trace_path = self.layout.path("train_trace.json");
        let m = self.models();
        let params = if path.is_file() {
            let (p, _) = load_params_for(&path, &m.backbone)?;
            if let Ok(t) = read_json::<Losses>(&trace_path) {
                self.summary.softsrv_train = Some(TraceSummary::of(&t.losses));
            }
            p
        } else {
            let dataset = encode_questions(&self.data().vocab, &self.data().target.train);
            let init = SoftSrvParams::init(self.cfg.softsrv.variant, self.cfg.prompt_dims(), self.cfg.stage_seed("init"), &m.backbone)?;
            let result = train(&m.backbone, &m.embedder, &dataset, init, &self.cfg.train_config())?;
            save_params(&path, &result.params, Some(&result.optimizer))?;
            write_json(&trace_path, &Losses { losses: result.trace.losses.clone() })?;
            self.summary.softsrv_train = Some(TraceSummary::of(&result.trace.losses));
            result.params
        };
        self.params = Some(params);
        Ok(())
    }

    fn seeds(&self) -> Vec<ToyExample> {
        let train = &self.data().target.train;
        let n = self.cfg.generation.n_seeds.unwrap_or(train.len()).min(train.len());
        train[..n].to_vec()
    }

    fn templates(&self) -> TemplateSet {
        TemplateSet::builtin(self.cfg.grammar, self.cfg.generation.diversified_template)
    }

    fn generate_stage(&mut self) -> Result<()> {
        let path = self.layout.path("questions.jsonl");
        let records = if path.is_file() {
            read_records(&path)?
        } else {
            let g = &self.cfg.generation;
            let m = self.models();
            let seeds = self.seeds();
            let seed = self.cfg.stage_seed("generate");
            let recs = match g.method {
                Method::Softsrv => {
                    let params = self.params.as_ref().expect("train stage ran");
                    let ctx = encode_questions(&self.data().vocab, &seeds);
                    let scfg = SamplingConfig::new(g.question_temperature, g.max_new_tokens, seed);
                    generate_questions(&m.backbone, &m.embedder, params, &ctx, g.n_raw, &scfg)?
                }
                Method::Pt | Method::Ptsr => {
                    let texts: Vec<String> = seeds.iter().map(|e| e.question.clone()).collect();
                    let scfg = SamplingConfig::new(g.template_temperature, g.max_new_tokens, seed);
                    let t = self.templates();
                    if g.method == Method::Pt {
                        pt_generate(&m.backbone, &t, &texts, g.n_raw, &scfg)?
                    } else {
                        let rcfg = RefineConfig { max_rounds: g.refine_rounds, ..RefineConfig::default() };
                        ptsr_generate(&m.backbone, &t, &texts, &rcfg, g.n_raw, &scfg)?
                    }
                }
            };
            write_records(&path, &recs, &self.data().vocab)?;
            recs
        };
        self.summary.generated = Some(records.len());
        self.records = records;
        Ok(())
    }

    fn answers_stage(&mut self) -> Result<()> {
        let path = self.layout.path("answered.jsonl");
        let records = if path.is_file() {
            read_records(&path)?
        } else {
            let questions = std::mem::take(&mut self.records);
            let g = &self.cfg.generation;
            let m = self.models();
            let scfg = SamplingConfig::new(g.answer_temperature, g.max_new_tokens, self.cfg.stage_seed("answers"));
            let recs = match g.method {
                Method::Softsrv => generate_answers(&m.backbone, questions, &scfg)?,
                Method::Pt | Method::Ptsr => pt_generate_answers(&m.backbone, &self.templates(), questions, &scfg)?,
            };
            write_records(&path, &recs, &self.data().vocab)?;
            recs
        };
        self.summary.answered = Some(records.len());
        self.records = records;
        Ok(())
    }

    fn postprocess_stage(&mut self) -> Result<()> {
        let path = self.layout.path("selected.jsonl");
        let vocab = &self.data().vocab;
        let docs: Vec<String> = self.records.iter().map(|r| vocab.decode(&r.question)).collect();
        let unique = crate::postprocess::dedup_indices(&docs).len();
        let records = if path.is_file() {
            read_records(&path)?
        } else {
            let sel = select_diverse(&docs, &self.cfg.postprocess_config(), self.cfg.stage_seed("postprocess"))?;
            let recs: Vec<SyntheticRecord> = sel.selected.iter().map(|&i| self.records[i].clone()).collect();
            write_records(&path, &recs, vocab)?;
            recs
        };
        self.summary.unique = Some(unique);
        self.summary.selected = Some(records.len());
        self.records = records;
        Ok(())
    }

    fn decontaminate_stage(&mut self) -> Result<()> {
        let path = self.layout.path("final.jsonl");
        let audit = self.layout.path("removed.jsonl");
        let vocab = &self.data().vocab;
        let (records, removed) = if path.is_file() && audit.is_file() {
            let kept = read_records(&path)?;
            let removed = fs::read_to_string(&audit)?.lines().count();
            (kept, removed)
        } else {
            let cands: Vec<String> = self.records.iter().map(|r| vocab.decode(&r.full_sequence())).collect();
            let reference: Vec<String> = self.data().target.test.iter().map(ToyExample::full_text).collect();
            let d = decontaminate(&cands, &reference, self.cfg.postprocess.ngram)?;
            let kept: Vec<SyntheticRecord> = d.kept.iter().map(|&i| self.records[i].clone()).collect();
            let entries: Vec<RemovedEntry> = d
                .removed
                .iter()
                .map(|RemovedDoc { index, ngram }| RemovedEntry { index: *index, ngram, question: cands[*index].clone() })
                .collect();
            write_jsonl(&audit, &entries)?;
            write_records(&path, &kept, vocab)?;
            (kept, d.removed.len())
        };
        self.summary.decontaminated_removed = Some(removed);
        self.summary.final_records = Some(records.len());
        self.records = records;
        Ok(())
    }

    fn mauve_stage(&mut self) -> Result<()> {
        let path = self.layout.path("mauve.json");
        let report = if path.is_file() {
            read_json(&path)?
        } else {
            let m = self.models();
            let gen: Vec<TokenSequence> = self.records.iter().map(|r| r.question.with_eos()).collect();
            let reference = encode_questions(&self.data().vocab, &self.data().target.test);
            let r = mauve_between(&m.embedder, &gen, &reference, &self.cfg.mauve, self.cfg.stage_seed("mauve"))?;
            write_json(&path, &r)?;
            r
        };
        self.summary.mauve = Some(MauveSummary { score: report.score, k: report.k, c: report.c });
        self.mauve = Some(report);
        Ok(())
    }

    fn student_stage(&mut self) -> Result<()> {
        let path = self.layout.path("student_eval.json");
        let report = if path.is_file() {
            read_json(&path)?
        } else {
            let test = encode_full(&self.data().vocab, &self.data().target.test);
            let (r, _) = student_eval(&self.models().student, &self.records, &test, &self.cfg.student_train_config())?;
            write_json(&path, &r)?;
            r
        };
        self.summary.student = Some(report);
        Ok(())
    }
}

/// MAUVE between two token-sequence samples embedded by `embedder`. The
/// cluster count is capped at the number of points available.
pub fn mauve_between(
    embedder: &SequenceEmbedder,
    gen: &[TokenSequence],
    reference: &[TokenSequence],
    cfg: &MauveConfig,
    seed: u64,
) -> Result<MauveReport> {
    if gen.is_empty() {
        return Err(Error::validation("no generated sequences to evaluate"));
    }
    let g: Vec<ContextVector> = embedder.embed_all(gen)?;
    let r: Vec<ContextVector> = embedder.embed_all(reference)?;
    let k = cfg.k.min(g.len() + r.len());
    mauve_score(&g, &r, &MauveConfig { k, ..*cfg }, seed)
}

/// Runs the whole pipeline and returns the summary that was written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    let mut run = Run::new(cfg.clone())?;
    run.run_until(Stage::StudentEval)?;
    Ok(run.summary)
}
