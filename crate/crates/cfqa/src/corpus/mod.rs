//! Datasets: domain types, the synthetic 2-hop generator, HotpotQA-format
//! ingestion, and JSON Lines serialization.

pub mod gen;
pub mod hotpot;
pub mod io;
pub mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};
pub use gen::{generate_dataset, GenConfig};
pub use hotpot::{build_hotpot_vocabulary, load_hotpotqa, LoadReport};
pub use vocab::{TokenId, Vocabulary};

/// One context paragraph: a title plus tokenized sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: String,
    pub sentences: Vec<Vec<TokenId>>,
    pub is_gold: bool,
}

impl Paragraph {
    /// Paragraph tokens flattened across sentences.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.sentences.iter().flatten().copied().collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Offset of sentence `j` within the flattened token sequence.
    pub fn sentence_offset(&self, j: usize) -> usize {
        self.sentences[..j].iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Span,
    Yes,
    No,
}

/// Answer location: paragraph title plus half-open token offsets `[start,
/// end)` into that paragraph's flattened token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub title: String,
    pub start: usize,
    pub end: usize,
}

/// One multi-hop question with its paragraph set and gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: Vec<TokenId>,
    pub paragraphs: Vec<Paragraph>,
    pub gold_para_titles: BTreeSet<String>,
    pub gold_sentence_ids: BTreeSet<(String, usize)>,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<AnswerSpan>,
    pub answer_text: Vec<TokenId>,
    /// Links the two instances derived from one original example in a probe
    /// set; absent on ordinary datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

impl Example {
    pub fn paragraph(&self, title: &str) -> Option<&Paragraph> {
        self.paragraphs.iter().find(|p| p.title == title)
    }

    /// Structural checks shared by corpus and probe instances. `gold_count`
    /// is 2 for originals and 1 for probe instances.
    pub fn validate(&self, vocab: &Vocabulary, gold_count: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("example {}: {msg}", self.id)));
        if self.paragraphs.len() < 2 {
            return fail("fewer than 2 paragraphs".into());
        }
        let golds: Vec<_> = self.paragraphs.iter().filter(|p| p.is_gold).collect();
        if golds.len() != gold_count {
            return fail(format!("{} gold paragraphs, expected {gold_count}", golds.len()));
        }
        let gold_titles: BTreeSet<String> = golds.iter().map(|p| p.title.clone()).collect();
        if gold_titles != self.gold_para_titles {
            return fail("gold_para_titles disagree with is_gold flags".into());
        }
        for p in &self.paragraphs {
            if p.sentences.is_empty() {
                return fail(format!("paragraph {:?} has no sentences", p.title));
            }
            for s in &p.sentences {
                for &t in s {
                    if t as usize >= vocab.len() {
                        return fail(format!("token id {t} out of vocabulary range"));
                    }
                }
            }
        }
        for (title, j) in &self.gold_sentence_ids {
            let Some(p) = self.paragraph(title) else {
                return fail(format!("gold sentence references unknown paragraph {title:?}"));
            };
            if !p.is_gold {
                return fail(format!("gold sentence in non-gold paragraph {title:?}"));
            }
            if *j >= p.sentences.len() {
                return fail(format!("gold sentence index {j} out of range in {title:?}"));
            }
        }
        if let Some(span) = &self.answer_span {
            if self.answer_type != AnswerType::Span {
                return fail("answer_span present on a non-span example".into());
            }
            let Some(p) = self.paragraph(&span.title) else {
                return fail(format!("answer span in unknown paragraph {:?}", span.title));
            };
            if !p.is_gold {
                return fail(format!("answer span in non-gold paragraph {:?}", span.title));
            }
            if span.start >= span.end || span.end > p.num_tokens() {
                return fail(format!("answer span [{}, {}) out of range", span.start, span.end));
            }
        } else if self.answer_type == AnswerType::Span && self.pair_id.is_none() {
            // Probe instances may carry a span-type label without the span
            // itself (the paragraph holding it was removed).
            return fail("span-type example without answer_span".into());
        }
        Ok(())
    }

    /// Full corpus invariants: exactly two gold paragraphs.
    pub fn validate_corpus(&self, vocab: &Vocabulary) -> Result<()> {
        self.validate(vocab, 2)
    }
}
