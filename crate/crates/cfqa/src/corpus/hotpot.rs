//! Ingestion of HotpotQA-format distractor-setting JSON.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::vocab::Vocabulary;
use super::{AnswerSpan, AnswerType, Example, Paragraph, TokenId};
use crate::{Error, Result};

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(rename = "_id")]
    id: Option<String>,
    question: Option<String>,
    context: Option<Vec<(String, Vec<String>)>>,
    supporting_facts: Option<Vec<(String, usize)>>,
    answer: Option<String>,
}

/// Outcome counters for one ingestion run.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
}

/// Build a vocabulary from every question and context sentence in the file.
/// Tokens are sorted for determinism.
pub fn build_hotpot_vocabulary(path: &Path) -> Result<Vocabulary> {
    let records = read_records(path)?;
    let mut words = BTreeSet::new();
    let mut absorb = |text: &str| {
        for piece in text.split_whitespace() {
            for word in piece
                .to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|s| !s.is_empty())
            {
                words.insert(word.to_string());
            }
        }
    };
    for rec in &records {
        if let Some(q) = &rec.question {
            absorb(q);
        }
        if let Some(ctx) = &rec.context {
            for (title, sents) in ctx {
                absorb(title);
                for s in sents {
                    absorb(s);
                }
            }
        }
        if let Some(a) = &rec.answer {
            absorb(a);
        }
    }
    Vocabulary::build(words)
}

fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Parse(format!("{}: not a HotpotQA JSON array: {e}", path.display())))
}

/// Load and tokenize a HotpotQA-format file against a pre-built vocabulary.
/// Records whose answer cannot be located in a gold paragraph are skipped and
/// counted.
pub fn load_hotpotqa(path: &Path, vocab: &Vocabulary) -> Result<(Vec<Example>, LoadReport)> {
    let records = read_records(path)?;
    let mut examples = Vec::with_capacity(records.len());
    let mut report = LoadReport::default();

    for (idx, rec) in records.into_iter().enumerate() {
        let id = rec
            .id
            .clone()
            .ok_or_else(|| Error::Parse(format!("record {idx}: missing _id")))?;
        let missing = |field: &str| Error::Parse(format!("record {id}: missing {field}"));
        let question_text = rec.question.ok_or_else(|| missing("question"))?;
        let context = rec.context.ok_or_else(|| missing("context"))?;
        let supporting = rec.supporting_facts.ok_or_else(|| missing("supporting_facts"))?;
        let answer_text_raw = rec.answer.ok_or_else(|| missing("answer"))?;

        let gold_para_titles: BTreeSet<String> =
            supporting.iter().map(|(t, _)| t.clone()).collect();
        let paragraphs: Vec<Paragraph> = context
            .iter()
            .map(|(title, sents)| Paragraph {
                title: title.clone(),
                sentences: sents.iter().map(|s| vocab.tokenize(s)).collect(),
                is_gold: gold_para_titles.contains(title),
            })
            .collect();

        let gold_sentence_ids: BTreeSet<(String, usize)> = supporting.into_iter().collect();

        let trimmed = answer_text_raw.trim();
        let (answer_type, answer_text, answer_span) = if trimmed.eq_ignore_ascii_case("yes") {
            (AnswerType::Yes, vocab.tokenize("yes"), None)
        } else if trimmed.eq_ignore_ascii_case("no") {
            (AnswerType::No, vocab.tokenize("no"), None)
        } else {
            let ids = vocab.tokenize(trimmed);
            match locate_span(&paragraphs, &gold_para_titles, &ids) {
                Some(span) => (AnswerType::Span, ids, Some(span)),
                None => {
                    report.skipped += 1;
                    report.skipped_ids.push(id);
                    continue;
                }
            }
        };

        let ex = Example {
            id,
            question: vocab.tokenize(&question_text),
            paragraphs,
            gold_para_titles,
            gold_sentence_ids,
            answer_type,
            answer_span,
            answer_text,
            pair_id: None,
        };
        if ex.validate_corpus(vocab).is_err() {
            report.skipped += 1;
            report.skipped_ids.push(ex.id);
            continue;
        }
        report.loaded += 1;
        examples.push(ex);
    }
    Ok((examples, report))
}

/// First whole-token match of `answer` inside a gold paragraph, scanning
/// paragraphs in context order.
fn locate_span(
    paragraphs: &[Paragraph],
    gold_titles: &BTreeSet<String>,
    answer: &[TokenId],
) -> Option<AnswerSpan> {
    if answer.is_empty() {
        return None;
    }
    for p in paragraphs {
        if !gold_titles.contains(&p.title) {
            continue;
        }
        let tokens = p.tokens();
        if tokens.len() < answer.len() {
            continue;
        }
        for start in 0..=tokens.len() - answer.len() {
            if &tokens[start..start + answer.len()] == answer {
                return Some(AnswerSpan {
                    title: p.title.clone(),
                    start,
                    end: start + answer.len(),
                });
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        serde_json::json!([
            {
                "_id": "h1",
                "question": "Until when did the senator serve?",
                "context": [
                    ["Alpha", ["The senator served from 2005 to 2008.", "He lives in Ohio."]],
                    ["Beta", ["Beta wrote about the senator."]],
                    ["Gamma", ["Gamma is a city."]]
                ],
                "supporting_facts": [["Alpha", 0], ["Beta", 0]],
                "answer": "2008"
            },
            {
                "_id": "h2",
                "question": "Did both serve together?",
                "context": [
                    ["Alpha", ["The senator served from 2005 to 2008."]],
                    ["Beta", ["Beta wrote about the senator."]]
                ],
                "supporting_facts": [["Alpha", 0], ["Beta", 0]],
                "answer": "yes"
            },
            {
                "_id": "h3",
                "question": "What is missing?",
                "context": [
                    ["Alpha", ["Nothing about it here."]],
                    ["Beta", ["Still nothing."]]
                ],
                "supporting_facts": [["Alpha", 0], ["Beta", 0]],
                "answer": "unfindable answer xyz"
            }
        ])
        .to_string()
    }

    fn write_sample() -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hotpot.json");
        fs::write(&path, sample_json()).unwrap();
        (dir, path)
    }

    #[test]
    fn yes_answer_has_no_span() {
        let (_dir, path) = write_sample();
        let vocab = build_hotpot_vocabulary(&path).unwrap();
        let (examples, report) = load_hotpotqa(&path, &vocab).unwrap();
        let h2 = examples.iter().find(|e| e.id == "h2").unwrap();
        assert_eq!(h2.answer_type, AnswerType::Yes);
        assert!(h2.answer_span.is_none());
        assert_eq!(report.loaded, 2);
    }

    #[test]
    fn span_found_in_first_gold_paragraph_in_context_order() {
        let (_dir, path) = write_sample();
        let vocab = build_hotpot_vocabulary(&path).unwrap();
        let (examples, _) = load_hotpotqa(&path, &vocab).unwrap();
        let h1 = examples.iter().find(|e| e.id == "h1").unwrap();
        let span = h1.answer_span.as_ref().unwrap();
        assert_eq!(span.title, "Alpha");
        let alpha = h1.paragraph("Alpha").unwrap();
        assert_eq!(
            alpha.tokens()[span.start..span.end],
            vocab.tokenize("2008")[..]
        );
        // "senator" appears in both golds; the answer "2008" is ambiguous
        // only in Alpha, but a shared word placed in both picks the first.
        let shared = vocab.tokenize("the senator");
        let located = locate_span(&h1.paragraphs, &h1.gold_para_titles, &shared).unwrap();
        assert_eq!(located.title, "Alpha");
    }

    #[test]
    fn unlocatable_answer_skipped_and_counted() {
        let (_dir, path) = write_sample();
        let vocab = build_hotpot_vocabulary(&path).unwrap();
        let (examples, report) = load_hotpotqa(&path, &vocab).unwrap();
        assert!(examples.iter().all(|e| e.id != "h3"));
        assert_eq!(report.skipped, 1);
        assert_eq!(report.skipped_ids, vec!["h3".to_string()]);
    }

    #[test]
    fn missing_field_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(
            &path,
            serde_json::json!([{ "_id": "broken", "question": "q?" }]).to_string(),
        )
        .unwrap();
        let vocab = Vocabulary::build(Vec::new()).unwrap();
        let err = load_hotpotqa(&path, &vocab).unwrap_err();
        assert!(err.to_string().contains("broken"));
    }

    #[test]
    fn malformed_json_returns_error_and_no_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "not json at all").unwrap();
        let vocab = Vocabulary::build(Vec::new()).unwrap();
        assert!(load_hotpotqa(&path, &vocab).is_err());
    }
}
