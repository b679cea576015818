//! Line-delimited JSON storage for synthetic records. Each line carries the
//! readable text next to the exact token ids; the ids are authoritative.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{MethodTag, Provenance, SyntheticRecord};
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    question: String,
    question_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_ids: Option<Vec<u32>>,
    seed_index: usize,
    method_tag: MethodTag,
    provenance: Provenance,
}

pub fn to_jsonl(records: &[SyntheticRecord], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for r in records {
        r.validate()?;
        vocab.check(&r.question)?;
        if let Some(a) = &r.answer {
            vocab.check(a)?;
        }
        let line = RecordLine {
            question: vocab.decode(&r.question),
            question_ids: r.question.0.clone(),
            answer: r.answer.as_ref().map(|a| vocab.decode(a)),
            answer_ids: r.answer.as_ref().map(|a| a.0.clone()),
            seed_index: r.seed_index,
            method_tag: r.method_tag,
            provenance: r.provenance.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Parses records; errors carry the 1-based line number.
pub fn from_jsonl(text: &str) -> Result<Vec<SyntheticRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| Error::Record { line, message };
        let parsed: RecordLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if parsed.answer.is_some() != parsed.answer_ids.is_some() {
            return Err(err("answer text and ids must appear together".into()));
        }
        let record = SyntheticRecord {
            question: TokenSequence(parsed.question_ids),
            answer: parsed.answer_ids.map(TokenSequence),
            seed_index: parsed.seed_index,
            method_tag: parsed.method_tag,
            provenance: parsed.provenance,
        };
        record.validate().map_err(|e| err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[SyntheticRecord], vocab: &Vocabulary) -> Result<()> {
    fs::write(path, to_jsonl(records, vocab)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<SyntheticRecord>> {
    from_jsonl(&fs::read_to_string(path)?)
}

/// Writes any serializable rows, one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn vocab() -> Vocabulary {
        let mut toks: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].map(String::from).to_vec();
        toks.extend(["tom", "has", "line\nbreak", "quote\"d", "5"].map(String::from));
        Vocabulary::from_tokens(toks).unwrap()
    }

    fn prov(step: usize) -> Provenance {
        Provenance {
            seed: 1 << 60,
            step,
            temperature: 0.7,
            candidate: 2,
            refine_rounds: Some(3),
            answer_seed: Some(9),
            answer_temperature: Some(1.0),
        }
    }

    fn sample() -> Vec<SyntheticRecord> {
        vec![
            SyntheticRecord {
                question: vec![4, 5, 6].into(),
                answer: Some(vec![8].into()),
                seed_index: 1,
                method_tag: MethodTag::SsMc,
                provenance: prov(0),
            },
            SyntheticRecord {
                question: vec![7, 3].into(),
                answer: None,
                seed_index: 0,
                method_tag: MethodTag::PtSr,
                provenance: Provenance { refine_rounds: None, answer_seed: None, answer_temperature: None, ..prov(1) },
            },
        ]
    }

    #[test]
    fn round_trip_both_ways() {
        let text = to_jsonl(&sample(), &vocab()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, sample());
        assert_eq!(to_jsonl(&back, &vocab()).unwrap(), text);
    }

    #[test]
    fn newlines_are_escaped() {
        let text = to_jsonl(&sample(), &vocab()).unwrap();
        assert!(text.contains("line\\nbreak"));
        assert!(text.contains("quote\\\"d"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &sample(), &vocab()).unwrap();
        assert_eq!(read_records(&path).unwrap(), sample());
    }

    #[test]
    fn invalid_records_are_not_written() {
        let mut bad = sample();
        bad[0].question = TokenSequence::default();
        assert!(to_jsonl(&bad, &vocab()).is_err());
        let mut bad = sample();
        bad[1].question = vec![99].into();
        assert!(to_jsonl(&bad, &vocab()).is_err());
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Record { line, .. } => line,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_position() {
        let good = to_jsonl(&sample(), &vocab()).unwrap();
        let cases = [
            format!("{good}not json\n"),
            format!("{good}{{\"question\":\"x\"}}\n"),
            good.replacen("\"SS_MC\"", "\"SS_XX\"", 1),
            good.replacen("[4,5,6]", "[]", 1),
            good.replacen(",\"answer_ids\":[8]", "", 1),
        ];
        let want = [3, 3, 1, 1, 1];
        for (c, w) in cases.iter().zip(want) {
            assert_eq!(line_of(from_jsonl(c).unwrap_err()), w, "{c}");
        }
    }

    proptest! {
        #[test]
        fn fuzzed_lines_are_rejected_or_parse(cut in 0usize..400, byte in any::<u8>()) {
            let good = to_jsonl(&sample(), &vocab()).unwrap();
            let mut bytes = good.into_bytes();
            let at = cut % bytes.len();
            bytes[at] = byte;
            if let Ok(text) = String::from_utf8(bytes) {
                match from_jsonl(&text) {
                    Ok(recs) => prop_assert!(recs.iter().all(|r| !r.question.is_empty())),
                    Err(Error::Record { line, .. }) => {
                        let first_bad = text.lines().position(|l| {
                            serde_json::from_str::<RecordLine>(l).is_err()
                        });
                        prop_assert!(line >= 1 && line <= text.lines().count());
                        if let Some(p) = first_bad {
                            prop_assert!(line <= p + 1);
                        }
                    }
                    Err(other) => prop_assert!(false, "unexpected error {other:?}"),
                }
            }
        }
    }
}
