use std::sync::Mutex;

use proptest::prelude::*;

use super::*;
use crate::backbone::{softmax_with_temperature, BackboneConfig};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

const WORDS: &str = "a b c d e f g h stop fine unclear question critique improved";

fn test_vocab() -> Vocabulary {
    let mut texts: Vec<String> = [TemplateKind::Question, TemplateKind::Answer, TemplateKind::Critique, TemplateKind::Refine]
        .into_iter()
        .map(|k| PromptTemplate::builtin(k, GrammarId::Arithmetic).body().to_string())
        .collect();
    texts.push(WORDS.into());
    Vocabulary::build(texts.iter().map(String::as_str), 512).unwrap()
}

/// Replies through a closure of (prompt, seed) and logs every prompt.
struct Scripted<F> {
    vocab: Vocabulary,
    reply: F,
    calls: Mutex<Vec<String>>,
}

impl<F: Fn(&str, u64) -> String + Sync> Scripted<F> {
    fn new(reply: F) -> Self {
        Self { vocab: test_vocab(), reply, calls: Mutex::new(Vec::new()) }
    }

    fn calls_containing(&self, needle: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|c| c.contains(needle)).count()
    }
}

impl<F: Fn(&str, u64) -> String + Sync> TextSampler for Scripted<F> {
    fn complete(&self, prompt: &str, _max_new: usize, _temperature: f64, seed: u64) -> Result<String> {
        self.calls.lock().unwrap().push(prompt.to_string());
        Ok((self.reply)(prompt, seed))
    }

    fn encode(&self, text: &str) -> TokenSequence {
        self.vocab.encode(text)
    }

    fn decode(&self, seq: &TokenSequence) -> String {
        self.vocab.decode(seq)
    }
}

fn cfg(temperature: f64, seed: u64) -> SamplingConfig {
    SamplingConfig::new(temperature, 12, seed)
}

fn seeds() -> Vec<String> {
    vec!["a b c".into(), "d e".into(), "f g h".into()]
}

#[test]
fn render_substitutes_verbatim() {
    let t = PromptTemplate::new("Q: [[EXAMPLE]]\nA:", TemplateKind::Question, "toy").unwrap();
    assert_eq!(render(&t, "hi").unwrap(), "Q: hi\nA:");
    assert_eq!(render(&t, "").unwrap(), "Q: \nA:");
    assert_eq!(render(&t, "hi").unwrap(), render(&t, "hi").unwrap());
}

#[test]
fn placeholder_count_is_enforced() {
    for body in ["no slot", "[[EXAMPLE]] and [[EXAMPLE]]", ""] {
        assert!(matches!(PromptTemplate::new(body, TemplateKind::Answer, "x"), Err(Error::Validation(_))));
    }
    let bad = PromptTemplate { body: "none".into(), kind: TemplateKind::Answer, domain_tag: String::new() };
    assert!(render(&bad, "x").is_err());
}

fn overlapping_count(hay: &str, needle: &str) -> usize {
    let (h, n) = (hay.as_bytes(), needle.as_bytes());
    (0..=h.len().saturating_sub(n.len())).filter(|&i| h.len() >= n.len() && &h[i..i + n.len()] == n).count()
}

proptest! {
    #[test]
    fn rendered_text_holds_example_once(ex in "[a-z0-9]{1,20}") {
        let body = "Q: [[EXAMPLE]]\nA:";
        prop_assume!(!body.contains(&ex));
        let t = PromptTemplate::new(body, TemplateKind::Question, "toy").unwrap();
        prop_assert_eq!(overlapping_count(&render(&t, &ex).unwrap(), &ex), 1);
    }
}

#[test]
fn builtin_templates_are_valid() {
    for g in [GrammarId::Arithmetic, GrammarId::BoolPassage] {
        for k in [
            TemplateKind::Question,
            TemplateKind::Answer,
            TemplateKind::Critique,
            TemplateKind::Refine,
            TemplateKind::UndiversifiedQuestion,
        ] {
            let t = PromptTemplate::builtin(k, g);
            assert_eq!(t.kind(), k);
            assert_eq!(t.domain_tag(), g.to_string());
        }
        let q = PromptTemplate::builtin(TemplateKind::Question, g);
        assert!(MARKER.is_match(q.body().trim_end().rsplit('\n').next().unwrap()));
    }
}

#[test]
fn splitter_cases() {
    assert_eq!(split_questions("Question 1: a\nQuestion 2: b"), vec!["a", "b"]);
    assert_eq!(split_questions("just one"), vec!["just one"]);
    assert_eq!(split_questions("lead\npassage and question 3 : x"), vec!["lead", "x"]);
    assert_eq!(split_questions("question 1 : a question 2 : b"), vec!["a", "b"]);
    assert!(split_questions("  ").is_empty());
    let many: String = (1..=14).map(|i| format!("Question {i}: q{i} ")).collect();
    assert_eq!(split_questions(&many).len(), MAX_CANDIDATES);
}

#[test]
fn pt_splits_and_cycles_seeds() {
    let s = Scripted::new(|_, _| "a b\nQuestion 2: c d\nQuestion 3: e".to_string());
    let t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    let recs = pt_generate(&s, &t, &seeds(), 5, &cfg(2.0, 1)).unwrap();
    assert_eq!(recs.len(), 5);
    let idx: Vec<_> = recs.iter().map(|r| (r.seed_index, r.provenance.candidate)).collect();
    assert_eq!(idx, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]);
    assert!(recs.iter().all(|r| r.method_tag == MethodTag::Pt));
    assert_eq!(s.decode(&recs[1].question), "c d");
    assert_eq!(s.calls_containing("a b c"), 1);
}

#[test]
fn pt_is_deterministic_and_streams_differ_by_tag() {
    let reply = |_: &str, seed: u64| ["a", "b c", "d e f"][(seed % 3) as usize].to_string();
    let t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    let a = pt_generate(&Scripted::new(reply), &t, &seeds(), 6, &cfg(2.0, 4)).unwrap();
    assert_eq!(a, pt_generate(&Scripted::new(reply), &t, &seeds(), 6, &cfg(2.0, 4)).unwrap());
    let sr = ptsr_generate(&Scripted::new(reply), &t, &seeds(), &RefineConfig::default(), 6, &cfg(2.0, 4)).unwrap();
    let pt_seeds: Vec<_> = a.iter().map(|r| r.provenance.seed).collect();
    assert!(sr.iter().all(|r| !pt_seeds.contains(&r.provenance.seed)));
}

#[test]
fn stop_detection() {
    assert!(is_stop("Stop", "Stop"));
    assert!(is_stop("  stop. the problem is fine", "Stop"));
    assert!(!is_stop("stopping here", "Stop"));
    assert!(!is_stop("do not stop", "Stop"));
    assert!(!is_stop("", "Stop"));
}

fn refine_fixture<F: Fn(&str, u64) -> String + Sync>(reply: F, rounds: usize) -> (Scripted<F>, Refined) {
    let s = Scripted::new(reply);
    let t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    let rcfg = RefineConfig { max_rounds: rounds, ..RefineConfig::default() };
    let r = refine_question(&s, t.critique.as_ref().unwrap(), t.refine.as_ref().unwrap(), "a b", &rcfg, &cfg(1.0, 0), 7)
        .unwrap();
    (s, r)
}

#[test]
fn stop_on_first_round_keeps_question() {
    let (s, r) = refine_fixture(|p, _| if p.contains("Rewritten") { "Stop".into() } else { "fine".into() }, 3);
    assert_eq!(r, Refined { question: "a b".into(), rounds: 1, rewrites: 0, stopped: true });
    assert_eq!(s.calls.lock().unwrap().len(), 2);
}

#[test]
fn never_stop_rewrites_max_rounds_times() {
    let (s, r) = refine_fixture(|p, seed| if p.contains("Rewritten") { format!("c {}", seed % 7) } else { "unclear".into() }, 2);
    assert_eq!((r.rounds, r.rewrites, r.stopped), (2, 2, false));
    assert_ne!(r.question, "a b");
    assert_eq!(s.calls_containing("Rewritten"), 2);
    assert_eq!(s.calls_containing("Critique:"), 4);
}

#[test]
fn later_stop_keeps_latest_rewrite() {
    let n = Mutex::new(0);
    let (_, r) = refine_fixture(
        |p, _| {
            if !p.contains("Rewritten") {
                return "unclear".into();
            }
            let mut n = n.lock().unwrap();
            *n += 1;
            if *n == 2 { "Stop".into() } else { "d e".into() }
        },
        5,
    );
    assert_eq!(r, Refined { question: "d e".into(), rounds: 2, rewrites: 1, stopped: true });
}

#[test]
fn ptsr_records_rounds_and_needs_templates() {
    let s = Scripted::new(|p, _| if p.contains("Rewritten") { "Stop".into() } else { "a\nQuestion 2: b".into() });
    let mut t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    let recs = ptsr_generate(&s, &t, &seeds(), &RefineConfig::default(), 4, &cfg(2.0, 2)).unwrap();
    assert_eq!(recs.len(), 4);
    assert!(recs.iter().all(|r| r.method_tag == MethodTag::PtSr && r.provenance.refine_rounds == Some(1)));
    t.refine = None;
    assert!(ptsr_generate(&s, &t, &seeds(), &RefineConfig::default(), 4, &cfg(2.0, 2)).is_err());
    let zero = RefineConfig { max_rounds: 0, ..RefineConfig::default() };
    assert!(zero.validate().is_err());
}

fn backbone(max_len: usize) -> BackboneModel {
    let v = test_vocab();
    let c = BackboneConfig { vocab_size: v.len(), d_model: 8, n_layers: 1, n_heads: 2, ffn_dim: 16, max_len };
    let mut b = BackboneModel::init(c, v, 6).unwrap();
    b.freeze();
    b
}

#[test]
fn backbone_sampler_is_deterministic_and_bounded() {
    let b = backbone(96);
    let t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    let a = pt_generate(&b, &t, &seeds(), 4, &cfg(2.0, 3)).unwrap();
    assert_eq!(a, pt_generate(&b, &t, &seeds(), 4, &cfg(2.0, 3)).unwrap());
    let small = backbone(24);
    assert!(matches!(pt_generate(&small, &t, &seeds(), 2, &cfg(2.0, 3)), Err(Error::Capacity(_))));
}

fn record(q: &str, s: &impl TextSampler) -> SyntheticRecord {
    SyntheticRecord {
        question: s.encode(q),
        answer: None,
        seed_index: 0,
        method_tag: MethodTag::Pt,
        provenance: provenance(0, 0, 2.0, 0),
    }
}

#[test]
fn template_answers_empty_and_greedy() {
    let b = backbone(64);
    let t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    assert!(pt_generate_answers(&b, &t, vec![], &cfg(1.0, 0)).unwrap().is_empty());
    let recs = pt_generate_answers(&b, &t, vec![record("a b", &b), record("c", &b)], &cfg(0.0, 0)).unwrap();
    for r in &recs {
        let prompt = render(&t.answer, &b.decode(&r.question)).unwrap();
        let want = b.encode(&b.complete(&prompt, 12, 0.0, 1234).unwrap());
        assert_eq!(r.answer.as_ref().unwrap(), &want);
    }
}

#[test]
fn template_answer_frequencies_match_softmax() {
    let b = backbone(64);
    let t = TemplateSet::builtin(GrammarId::Arithmetic, true);
    let prompt = b.encode(&render(&t.answer, "a b").unwrap());
    let mut probs = softmax_with_temperature(&b.next_logits(b.bos_prompt().values().view(), prompt.ids()), 1.0);
    // PAD and BOS vanish when the completion is rendered to text, like EOS.
    probs[EOS as usize] += probs[PAD as usize] + probs[BOS as usize];
    probs[PAD as usize] = 0.0;
    probs[BOS as usize] = 0.0;
    let n = 10_000;
    let recs = pt_generate_answers(&b, &t, vec![record("a b", &b); n], &SamplingConfig::new(1.0, 1, 5)).unwrap();
    let mut counts = vec![0usize; b.vocab().len()];
    for r in &recs {
        let first = r.answer.as_ref().unwrap().ids().first().copied().unwrap_or(EOS);
        counts[first as usize] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 / n as f64 - probs[i]).abs() < 0.02, "token {i}");
    }
}
