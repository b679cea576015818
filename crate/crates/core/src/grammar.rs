//! Toy target distributions: templated productions with lexical and numeric
//! slots, each example carrying a derivable answer.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarId {
    /// Grade-school style arithmetic word problems.
    Arithmetic,
    /// Short passages followed by a yes/no question.
    BoolPassage,
}

impl fmt::Display for GrammarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrammarId::Arithmetic => "arithmetic",
            GrammarId::BoolPassage => "bool_passage",
        })
    }
}

impl FromStr for GrammarId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(GrammarId::Arithmetic),
            "bool_passage" | "boolq" => Ok(GrammarId::BoolPassage),
            other => Err(Error::Config(format!("unknown grammar `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotSpec {
    Words(Vec<&'static str>),
    /// Uniform integer in `lo..=hi`.
    Number { lo: u32, hi: u32 },
    /// Copies slot `of` with probability 1/2, otherwise uniform over `words`.
    SameOrOther { of: &'static str, words: Vec<&'static str> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnswerRule {
    Add(&'static str, &'static str),
    Sub(&'static str, &'static str),
    Mul(&'static str, &'static str),
    /// `true` iff both slots hold the same value.
    Same(&'static str, &'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Production {
    /// Text with `{slot}` markers.
    pub template: &'static str,
    pub answer: AnswerRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrammar {
    pub id: GrammarId,
    pub productions: Vec<Production>,
    /// Slot specs in sampling order (sources before `SameOrOther` copies).
    pub slots: Vec<(&'static str, SlotSpec)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyExample {
    pub question: String,
    pub answer: String,
    pub production: usize,
    pub slots: BTreeMap<String, String>,
}

impl ToyExample {
    /// Question followed by its answer, the form used for pretraining and
    /// for held-out evaluation.
    pub fn full_text(&self) -> String {
        format!("{} answer : {}", self.question, self.answer)
    }
}

const NAMES: [&str; 10] = ["tom", "anna", "ben", "lucy", "sam", "mia", "leo", "zoe", "max", "ivy"];
const ITEMS: [&str; 10] = ["apples", "pens", "books", "cards", "eggs", "shells", "stamps", "rocks", "cookies", "marbles"];
const ANIMALS: [&str; 8] = ["fox", "owl", "bear", "frog", "deer", "wolf", "hare", "duck"];
const PLACES: [&str; 8] = ["forest", "river", "meadow", "cave", "lake", "hill", "swamp", "valley"];
const FOODS: [&str; 6] = ["berries", "fish", "seeds", "grass", "insects", "nuts"];

impl ToyGrammar {
    pub fn new(id: GrammarId) -> Self {
        match id {
            GrammarId::Arithmetic => Self::arithmetic(),
            GrammarId::BoolPassage => Self::bool_passage(),
        }
    }

    pub fn arithmetic() -> Self {
        use AnswerRule::*;
        let productions = vec![
            Production {
                template: "{name} has {a} {item} and buys {b} more . how many {item} does {name} have now ?",
                answer: Add("a", "b"),
            },
            Production {
                template: "{name} had {a} {item} and gave {b} to a friend . how many {item} does {name} have left ?",
                answer: Sub("a", "b"),
            },
            Production {
                template: "there are {b} boxes with {c} {item} in each box . how many {item} are there in total ?",
                answer: Mul("b", "c"),
            },
            Production {
                template: "{name} picks {a} {item} on monday and {b} {item} on tuesday . how many {item} did {name} pick ?",
                answer: Add("a", "b"),
            },
            Production {
                template: "a shop sells {c} {item} each day . how many {item} does the shop sell in {b} days ?",
                answer: Mul("c", "b"),
            },
        ];
        let slots = vec![
            ("name", SlotSpec::Words(NAMES.to_vec())),
            ("item", SlotSpec::Words(ITEMS.to_vec())),
            ("a", SlotSpec::Number { lo: 10, hi: 30 }),
            ("b", SlotSpec::Number { lo: 1, hi: 9 }),
            ("c", SlotSpec::Number { lo: 2, hi: 9 }),
        ];
        Self { id: GrammarId::Arithmetic, productions, slots }
    }

    pub fn bool_passage() -> Self {
        use AnswerRule::*;
        let productions = vec![
            Production {
                template: "passage : the {animal} lives in the {place} and eats {food} . question : does the {animal} live in the {place2} ?",
                answer: Same("place", "place2"),
            },
            Production {
                template: "passage : the {animal} lives in the {place} and eats {food} . question : does the {animal} eat {food2} ?",
                answer: Same("food", "food2"),
            },
            Production {
                template: "passage : {name} walked to the {place} with a {animal} . question : did {name} walk to the {place2} ?",
                answer: Same("place", "place2"),
            },
        ];
        let slots = vec![
            ("name", SlotSpec::Words(NAMES.to_vec())),
            ("animal", SlotSpec::Words(ANIMALS.to_vec())),
            ("place", SlotSpec::Words(PLACES.to_vec())),
            ("food", SlotSpec::Words(FOODS.to_vec())),
            ("place2", SlotSpec::SameOrOther { of: "place", words: PLACES.to_vec() }),
            ("food2", SlotSpec::SameOrOther { of: "food", words: FOODS.to_vec() }),
        ];
        Self { id: GrammarId::BoolPassage, productions, slots }
    }

    /// Draws one example.
    pub fn sample(&self, r: &mut rng::Rng) -> ToyExample {
        let production = r.random_range(0..self.productions.len());
        let mut slots = BTreeMap::<String, String>::new();
        for (name, spec) in &self.slots {
            let value = match spec {
                SlotSpec::Words(w) => w.choose(r).expect("nonempty slot").to_string(),
                SlotSpec::Number { lo, hi } => r.random_range(*lo..=*hi).to_string(),
                SlotSpec::SameOrOther { of, words } => {
                    if r.random_bool(0.5) {
                        slots[*of].clone()
                    } else {
                        words.choose(r).expect("nonempty slot").to_string()
                    }
                }
            };
            slots.insert(name.to_string(), value);
        }
        let p = &self.productions[production];
        let mut question = p.template.to_string();
        for (name, value) in &slots {
            question = question.replace(&format!("{{{name}}}"), value);
        }
        let num = |s: &str| slots[s].parse::<i64>().expect("numeric slot");
        let answer = match p.answer {
            AnswerRule::Add(a, b) => (num(a) + num(b)).to_string(),
            AnswerRule::Sub(a, b) => (num(a) - num(b)).to_string(),
            AnswerRule::Mul(a, b) => (num(a) * num(b)).to_string(),
            AnswerRule::Same(a, b) => if slots[a] == slots[b] { "yes" } else { "no" }.to_string(),
        };
        ToyExample { question, answer, production, slots }
    }

    /// Every surface word the grammar can emit, for vocabulary building.
    pub fn lexicon(&self) -> Vec<String> {
        let mut words: Vec<String> = self
            .productions
            .iter()
            .flat_map(|p| p.template.split_whitespace().filter(|w| !w.starts_with('{')))
            .map(String::from)
            .collect();
        let hi = |slot: &str| match self.slots.iter().find(|(n, _)| *n == slot) {
            Some((_, SlotSpec::Number { hi, .. })) => *hi,
            _ => 0,
        };
        let mut max_num = 0;
        for (_, spec) in &self.slots {
            match spec {
                SlotSpec::Words(w) | SlotSpec::SameOrOther { words: w, .. } => {
                    words.extend(w.iter().map(|s| s.to_string()))
                }
                SlotSpec::Number { hi, .. } => max_num = max_num.max(*hi),
            }
        }
        // Largest reachable answer; subtraction never exceeds its minuend.
        for p in &self.productions {
            max_num = max_num.max(match p.answer {
                AnswerRule::Add(a, b) => hi(a) + hi(b),
                AnswerRule::Mul(a, b) => hi(a) * hi(b),
                AnswerRule::Sub(a, _) => hi(a),
                AnswerRule::Same(..) => 0,
            });
        }
        words.extend((0..=max_num).map(|n| n.to_string()));
        words.extend(["answer", ":", "yes", "no"].map(String::from));
        words
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub train: Vec<ToyExample>,
    pub test: Vec<ToyExample>,
}

/// Samples `n` examples with distinct question strings and splits them
/// 90/10 into train and test folds after a seeded shuffle.
pub fn make_toy_corpus(grammar: &ToyGrammar, n: usize, seed: u64) -> Result<ToyCorpus> {
    if n < 2 {
        return Err(Error::validation("a corpus needs at least two examples"));
    }
    let mut r = rng::seeded(seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while examples.len() < n {
        attempts += 1;
        if attempts > n.saturating_mul(100) {
            return Err(Error::validation(format!(
                "grammar {} cannot produce {n} distinct examples",
                grammar.id
            )));
        }
        let ex = grammar.sample(&mut r);
        if seen.insert(ex.question.clone()) {
            examples.push(ex);
        }
    }
    examples.shuffle(&mut r);
    let n_train = (n * 9 / 10).clamp(1, n - 1);
    let test = examples.split_off(n_train);
    Ok(ToyCorpus { train: examples, test })
}
