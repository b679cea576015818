//! Natural-language template pipelines: few-shot question generation (PT)
//! and the same with a critique/refine loop (PT-SR).

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::generator::{MethodTag, Provenance, SamplingConfig, SyntheticRecord};
use crate::grammar::GrammarId;
use crate::rng;
use crate::vocab::{tokenize, TokenSequence};

pub const PLACEHOLDER: &str = "[[EXAMPLE]]";
pub const MAX_CANDIDATES: usize = 10;

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:passage\s+and\s+)?question\s*\d+\s*:").expect("valid marker regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Question,
    Answer,
    Critique,
    Refine,
    UndiversifiedQuestion,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::Question => "question",
            TemplateKind::Answer => "answer",
            TemplateKind::Critique => "critique",
            TemplateKind::Refine => "refine",
            TemplateKind::UndiversifiedQuestion => "undiversified_question",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    body: String,
    kind: TemplateKind,
    domain_tag: String,
}

impl PromptTemplate {
    pub fn new(body: impl Into<String>, kind: TemplateKind, domain_tag: impl Into<String>) -> Result<Self> {
        let body = body.into();
        check_placeholder(&body)?;
        Ok(Self { body, kind, domain_tag: domain_tag.into() })
    }

    /// The shipped template text for `kind` in the given domain.
    pub fn builtin(kind: TemplateKind, grammar: GrammarId) -> Self {
        let body = match (kind, grammar) {
            (TemplateKind::Question, GrammarId::BoolPassage) => include_str!("../templates/bool_question.txt"),
            (TemplateKind::Question, _) => include_str!("../templates/question.txt"),
            (TemplateKind::Answer, _) => include_str!("../templates/answer.txt"),
            (TemplateKind::Critique, _) => include_str!("../templates/critique.txt"),
            (TemplateKind::Refine, _) => include_str!("../templates/refine.txt"),
            (TemplateKind::UndiversifiedQuestion, _) => include_str!("../templates/undiversified.txt"),
        };
        Self::new(body, kind, grammar.to_string()).expect("shipped templates hold one placeholder")
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }
}

fn check_placeholder(body: &str) -> Result<()> {
    if body.is_empty() {
        return Err(Error::validation("template body is empty"));
    }
    match body.matches(PLACEHOLDER).count() {
        1 => Ok(()),
        n => Err(Error::validation(format!("template must hold exactly one {PLACEHOLDER}, found {n}"))),
    }
}

/// Substitutes `example_text` for the placeholder.
pub fn render(template: &PromptTemplate, example_text: &str) -> Result<String> {
    check_placeholder(&template.body)?;
    Ok(template.body.replacen(PLACEHOLDER, example_text, 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub question: PromptTemplate,
    pub answer: PromptTemplate,
    pub critique: Option<PromptTemplate>,
    pub refine: Option<PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin(grammar: GrammarId, diversified: bool) -> Self {
        let question = if diversified { TemplateKind::Question } else { TemplateKind::UndiversifiedQuestion };
        Self {
            question: PromptTemplate::builtin(question, grammar),
            answer: PromptTemplate::builtin(TemplateKind::Answer, grammar),
            critique: Some(PromptTemplate::builtin(TemplateKind::Critique, grammar)),
            refine: Some(PromptTemplate::builtin(TemplateKind::Refine, grammar)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub max_rounds: usize,
    pub stop_token_text: String,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { max_rounds: 3, stop_token_text: "Stop".into() }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::validation("max_rounds must be at least 1"));
        }
        if tokenize(&self.stop_token_text).is_empty() {
            return Err(Error::validation("stop text has no tokens"));
        }
        Ok(())
    }
}

/// Text-in, text-out completion; the backbone implements it and tests
/// substitute scripted fakes.
pub trait TextSampler: Sync {
    fn complete(&self, prompt: &str, max_new_tokens: usize, temperature: f64, seed: u64) -> Result<String>;
    fn encode(&self, text: &str) -> TokenSequence;
    fn decode(&self, seq: &TokenSequence) -> String;
}

impl TextSampler for BackboneModel {
    fn complete(&self, prompt: &str, max_new_tokens: usize, temperature: f64, seed: u64) -> Result<String> {
        let ids = self.vocab().encode(prompt);
        let used = 1 + ids.len();
        if used >= self.max_len() {
            return Err(Error::capacity(format!(
                "prompt of {} tokens leaves no room under max length {}",
                ids.len(),
                self.max_len()
            )));
        }
        let max_new = max_new_tokens.min(self.max_len() - used);
        let out = self.sample_continuation(&self.bos_prompt(), &ids, max_new, temperature, seed)?;
        Ok(self.vocab().decode(&out))
    }

    fn encode(&self, text: &str) -> TokenSequence {
        self.vocab().encode(text)
    }

    fn decode(&self, seq: &TokenSequence) -> String {
        self.vocab().decode(seq)
    }
}

/// Splits a completion into question candidates at enumeration markers.
/// Text ahead of the first marker counts as a candidate, since templates
/// end with the first marker already written. Without any marker the whole
/// completion is one candidate.
pub fn split_questions(completion: &str) -> Vec<String> {
    MARKER
        .split(completion)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .take(MAX_CANDIDATES)
        .map(String::from)
        .collect()
}

fn provenance(seed: u64, step: usize, temperature: f64, candidate: usize) -> Provenance {
    Provenance {
        seed,
        step,
        temperature,
        candidate,
        refine_rounds: None,
        answer_seed: None,
        answer_temperature: None,
    }
}

/// Raw candidates: completion `j` is seeded with `seeds[j % len]`. Stops
/// once `n_raw` candidates exist or after `n_raw` completions.
fn draw_candidates(
    sampler: &impl TextSampler,
    template: &PromptTemplate,
    seeds: &[String],
    n_raw: usize,
    cfg: &SamplingConfig,
    tag: MethodTag,
) -> Result<Vec<(String, usize, Provenance)>> {
    if seeds.is_empty() {
        return Err(Error::validation("no seed examples"));
    }
    let label = format!("{tag}/completion");
    let mut out = Vec::with_capacity(n_raw);
    for j in 0..n_raw {
        if out.len() >= n_raw {
            break;
        }
        let seed_index = j % seeds.len();
        let prompt = render(template, &seeds[seed_index])?;
        let stream = rng::stream_seed(cfg.seed, &label, j as u64);
        let completion = sampler.complete(&prompt, cfg.max_new_tokens, cfg.temperature, stream)?;
        for (c, q) in split_questions(&completion).into_iter().enumerate() {
            out.push((q, seed_index, provenance(stream, j, cfg.temperature, c)));
        }
    }
    out.truncate(n_raw);
    Ok(out)
}

fn to_records(
    sampler: &impl TextSampler,
    candidates: Vec<(String, usize, Provenance)>,
    tag: MethodTag,
) -> Vec<SyntheticRecord> {
    candidates
        .into_iter()
        .filter_map(|(q, seed_index, provenance)| {
            let question = sampler.encode(&q);
            (!question.is_empty()).then_some(SyntheticRecord {
                question,
                answer: None,
                seed_index,
                method_tag: tag,
                provenance,
            })
        })
        .collect()
}

/// Few-shot template generation. The usual temperature is 2.
pub fn pt_generate(
    sampler: &impl TextSampler,
    templates: &TemplateSet,
    seeds: &[String],
    n_raw: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<SyntheticRecord>> {
    let cands = draw_candidates(sampler, &templates.question, seeds, n_raw, cfg, MethodTag::Pt)?;
    Ok(to_records(sampler, cands, MethodTag::Pt))
}

/// Outcome of refining one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refined {
    pub question: String,
    pub rounds: usize,
    pub rewrites: usize,
    pub stopped: bool,
}

/// True when `output` opens with the tokens of `stop`.
pub fn is_stop(output: &str, stop: &str) -> bool {
    let want = tokenize(stop);
    let got = tokenize(output);
    !want.is_empty() && got.len() >= want.len() && got[..want.len()] == want[..]
}

/// Critique/refine rounds for one question. The refine template receives
/// the question and critique together in its single slot.
pub fn refine_question(
    sampler: &impl TextSampler,
    critique_t: &PromptTemplate,
    refine_t: &PromptTemplate,
    question: &str,
    rcfg: &RefineConfig,
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<Refined> {
    rcfg.validate()?;
    let mut current = question.to_string();
    let mut rewrites = 0;
    for round in 1..=rcfg.max_rounds {
        let critique_seed = rng::stream_seed(stream, "critique", round as u64);
        let critique = sampler.complete(&render(critique_t, &current)?, cfg.max_new_tokens, cfg.temperature, critique_seed)?;
        let block = format!("Question: {current}\nCritique: {}", critique.trim());
        let refine_seed = rng::stream_seed(stream, "refine", round as u64);
        let refined = sampler.complete(&render(refine_t, &block)?, cfg.max_new_tokens, cfg.temperature, refine_seed)?;
        if is_stop(&refined, &rcfg.stop_token_text) {
            return Ok(Refined { question: current, rounds: round, rewrites, stopped: true });
        }
        let refined = refined.trim();
        if !refined.is_empty() {
            current = refined.to_string();
        }
        rewrites += 1;
    }
    Ok(Refined { question: current, rounds: rcfg.max_rounds, rewrites, stopped: false })
}

/// Template generation followed by per-question self-refinement.
pub fn ptsr_generate(
    sampler: &impl TextSampler,
    templates: &TemplateSet,
    seeds: &[String],
    rcfg: &RefineConfig,
    n_raw: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<SyntheticRecord>> {
    rcfg.validate()?;
    let (Some(critique_t), Some(refine_t)) = (&templates.critique, &templates.refine) else {
        return Err(Error::validation("self-refinement needs critique and refine templates"));
    };
    let tag = MethodTag::PtSr;
    let cands = draw_candidates(sampler, &templates.question, seeds, n_raw, cfg, tag)?;
    let mut refined = Vec::with_capacity(cands.len());
    for (i, (q, seed_index, mut prov)) in cands.into_iter().enumerate() {
        let stream = rng::stream_seed(cfg.seed, "PT_SR/refine", i as u64);
        let r = refine_question(sampler, critique_t, refine_t, &q, rcfg, cfg, stream)?;
        prov.refine_rounds = Some(r.rounds);
        refined.push((r.question, seed_index, prov));
    }
    Ok(to_records(sampler, refined, tag))
}

/// Answers by rendering the answer template around each question.
pub fn pt_generate_answers(
    sampler: &impl TextSampler,
    templates: &TemplateSet,
    records: Vec<SyntheticRecord>,
    cfg: &SamplingConfig,
) -> Result<Vec<SyntheticRecord>> {
    records
        .into_iter()
        .enumerate()
        .map(|(j, mut r)| {
            r.validate()?;
            let label = format!("{}/answer", r.method_tag);
            let stream = rng::stream_seed(cfg.seed, &label, j as u64);
            let prompt = render(&templates.answer, &sampler.decode(&r.question))?;
            let text = sampler.complete(&prompt, cfg.max_new_tokens, cfg.temperature, stream)?;
            r.answer = Some(sampler.encode(&text));
            r.provenance.answer_seed = Some(stream);
            r.provenance.answer_temperature = Some(cfg.temperature);
            Ok(r)
        })
        .collect()
}

impl FromStr for TemplateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "question" => TemplateKind::Question,
            "answer" => TemplateKind::Answer,
            "critique" => TemplateKind::Critique,
            "refine" => TemplateKind::Refine,
            "undiversified_question" => TemplateKind::UndiversifiedQuestion,
            other => return Err(Error::validation(format!("unknown template kind `{other}`"))),
        })
    }
}

#[cfg(test)]
mod tests;
