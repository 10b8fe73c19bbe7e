//! DiRe probe construction, test-time only.
//!
//! Each original example splits into two instances, each keeping exactly one
//! of the two gold paragraphs (all distractors retained). A model that
//! scores full credit on both halves is reasoning from single facts; the
//! probe makes that measurable.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerType, Example};
use crate::util::par::ordered_map;
use crate::{Error, Result};

/// The two one-gold-paragraph instances derived from one original example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub origin_id: String,
    pub instance_a: Example,
    pub instance_b: Example,
}

impl ProbePair {
    pub fn instances(&self) -> [&Example; 2] {
        [&self.instance_a, &self.instance_b]
    }
}

/// Build one probe pair per example. Answer labels stay with the instance
/// whose surviving gold paragraph holds the span; the other instance keeps
/// answer-type and supporting-fact labels only.
pub fn build_probe(dataset: &[Example]) -> Result<Vec<ProbePair>> {
    let out = ordered_map(dataset, build_pair);
    out.into_iter().collect()
}

fn build_pair(ex: &Example) -> Result<ProbePair> {
    let gold_titles: Vec<String> = ex
        .paragraphs
        .iter()
        .filter(|p| p.is_gold)
        .map(|p| p.title.clone())
        .collect();
    if gold_titles.len() != 2 || ex.gold_para_titles.len() != 2 {
        return Err(Error::Data(format!(
            "example {} has {} gold paragraphs, probe needs exactly 2",
            ex.id,
            gold_titles.len()
        )));
    }

    let make = |keep: &str, drop: &str, suffix: &str| -> Example {
        let paragraphs = ex
            .paragraphs
            .iter()
            .filter(|p| p.title != drop)
            .cloned()
            .collect();
        let keeps_answer = match (&ex.answer_type, &ex.answer_span) {
            (AnswerType::Span, Some(span)) => span.title == keep,
            // Yes/no answers are judged against the answer text, which needs
            // no span; both halves keep it.
            (AnswerType::Yes | AnswerType::No, _) => true,
            _ => false,
        };
        Example {
            id: format!("{}-{}", ex.id, suffix),
            question: ex.question.clone(),
            paragraphs,
            gold_para_titles: [keep.to_string()].into_iter().collect(),
            gold_sentence_ids: ex
                .gold_sentence_ids
                .iter()
                .filter(|(t, _)| t == keep)
                .cloned()
                .collect(),
            answer_type: ex.answer_type,
            answer_span: if keeps_answer { ex.answer_span.clone() } else { None },
            answer_text: if keeps_answer {
                ex.answer_text.clone()
            } else {
                Vec::new()
            },
            pair_id: Some(ex.id.clone()),
        }
    };

    Ok(ProbePair {
        origin_id: ex.id.clone(),
        instance_a: make(&gold_titles[0], &gold_titles[1], "a"),
        instance_b: make(&gold_titles[1], &gold_titles[0], "b"),
    })
}
