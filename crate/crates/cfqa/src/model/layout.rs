//! Input assembly: `[CLS] question [QSEP] ([PSEP] paragraph)*` plus the
//! position map from paragraphs and sentences to token offsets.

use crate::corpus::vocab::{TokenId, CLS_ID, PSEP_ID, QSEP_ID};
use crate::corpus::Paragraph;
use crate::{Error, Result};

/// A sentence's surviving token range; `index` is the sentence's original
/// index within its paragraph (truncation can drop later sentences).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentSpan {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParaSpan {
    pub title: String,
    pub is_gold: bool,
    /// Half-open token range of the paragraph's content.
    pub start: usize,
    pub end: usize,
    pub sentences: Vec<SentSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub tokens: Vec<TokenId>,
    pub cls_pos: usize,
    pub paragraphs: Vec<ParaSpan>,
    /// How many paragraph tokens were dropped by truncation.
    pub truncated_tokens: usize,
}

impl SeqLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of paragraph content tokens, in order.
    pub fn context_positions(&self) -> Vec<usize> {
        self.paragraphs
            .iter()
            .flat_map(|p| p.start..p.end)
            .collect()
    }

    /// `true` at positions holding paragraph content.
    pub fn paragraph_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tokens.len()];
        for p in &self.paragraphs {
            for m in &mut mask[p.start..p.end] {
                *m = true;
            }
        }
        mask
    }

    pub fn paragraph_index(&self, title: &str) -> Option<usize> {
        self.paragraphs.iter().position(|p| p.title == title)
    }
}

/// Assemble the layout, truncating paragraph tails (distractors first, then
/// golds) until the sequence fits `max_len`.
pub fn build_layout(
    question: &[TokenId],
    paragraphs: &[Paragraph],
    max_len: usize,
) -> Result<SeqLayout> {
    build_layout_protected(question, paragraphs, max_len, None)
}

/// As [`build_layout`], but paragraph `protect` is never trimmed. Branch
/// passes use this to keep the focal paragraph row-aligned with the factual
/// pass.
pub(crate) fn build_layout_protected(
    question: &[TokenId],
    paragraphs: &[Paragraph],
    max_len: usize,
    protect: Option<usize>,
) -> Result<SeqLayout> {
    if question.is_empty() {
        return Err(Error::Data("cannot encode an empty question".into()));
    }
    if paragraphs.is_empty() {
        return Err(Error::Data("cannot encode without paragraphs".into()));
    }
    let m = paragraphs.len();
    let overhead = 1 + question.len() + 1 + m; // CLS, question, QSEP, one PSEP per paragraph
    let budget = max_len
        .checked_sub(overhead)
        .filter(|&b| b >= m)
        .ok_or_else(|| {
            Error::Data(format!(
                "question plus separators ({overhead} tokens) leave no room for {m} paragraphs \
                 within max_seq_len {max_len}"
            ))
        })?;

    // Allowed content length per paragraph after truncation.
    let mut allowed: Vec<usize> = paragraphs.iter().map(Paragraph::num_tokens).collect();
    let mut total: usize = allowed.iter().sum();
    let full_total = total;
    while total > budget {
        // Longest trimmable distractor first; ties resolved toward the
        // latest paragraph. Golds only once every distractor is down to one
        // token.
        let pick = |golds: bool| -> Option<usize> {
            let mut best: Option<usize> = None;
            for (i, p) in paragraphs.iter().enumerate() {
                if p.is_gold != golds || allowed[i] <= 1 || protect == Some(i) {
                    continue;
                }
                if best.map(|b| allowed[i] >= allowed[b]).unwrap_or(true) {
                    best = Some(i);
                }
            }
            best
        };
        let victim = pick(false).or_else(|| pick(true)).ok_or_else(|| {
            Error::Data(format!(
                "cannot fit the protected paragraph plus {m} paragraphs within max_seq_len \
                 {max_len}"
            ))
        })?;
        allowed[victim] -= 1;
        total -= 1;
    }

    let mut tokens = Vec::with_capacity(overhead + total);
    tokens.push(CLS_ID);
    tokens.extend_from_slice(question);
    tokens.push(QSEP_ID);

    let mut spans = Vec::with_capacity(m);
    for (p, &keep) in paragraphs.iter().zip(&allowed) {
        tokens.push(PSEP_ID);
        let start = tokens.len();
        let mut remaining = keep;
        let mut sentences = Vec::with_capacity(p.sentences.len());
        for (j, sent) in p.sentences.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            let take = sent.len().min(remaining);
            if take == 0 {
                continue;
            }
            let s_start = tokens.len();
            tokens.extend_from_slice(&sent[..take]);
            sentences.push(SentSpan {
                index: j,
                start: s_start,
                end: tokens.len(),
            });
            remaining -= take;
        }
        spans.push(ParaSpan {
            title: p.title.clone(),
            is_gold: p.is_gold,
            start,
            end: tokens.len(),
        sentences,
        });
    }

    Ok(SeqLayout {
        tokens,
        cls_pos: 0,
        paragraphs: spans,
        truncated_tokens: full_total - total,
    })
}

/// Insert the focal paragraph into the remaining context at its original
/// position (clamped to the context length) and build the layout.
pub fn build_triple_layout(
    question: &[TokenId],
    focal: &Paragraph,
    focal_index: usize,
    context: &[Paragraph],
    max_len: usize,
) -> Result<(SeqLayout, usize)> {
    build_triple_layout_protected(question, focal, focal_index, context, max_len, false)
}

/// As [`build_triple_layout`]; with `protect_focal` the focal paragraph is
/// exempt from truncation so its rows stay aligned with the factual pass.
pub(crate) fn build_triple_layout_protected(
    question: &[TokenId],
    focal: &Paragraph,
    focal_index: usize,
    context: &[Paragraph],
    max_len: usize,
    protect_focal: bool,
) -> Result<(SeqLayout, usize)> {
    let pos = focal_index.min(context.len());
    let mut paragraphs: Vec<Paragraph> = Vec::with_capacity(context.len() + 1);
    paragraphs.extend_from_slice(&context[..pos]);
    paragraphs.push(focal.clone());
    paragraphs.extend_from_slice(&context[pos..]);
    let protect = protect_focal.then_some(pos);
    Ok((
        build_layout_protected(question, &paragraphs, max_len, protect)?,
        pos,
    ))
}

/// Truncate a paragraph to its first `keep` tokens, preserving sentence
/// indices (tail sentences drop, earlier indices are untouched).
pub(crate) fn cut_paragraph(p: &Paragraph, keep: usize) -> Paragraph {
    let mut remaining = keep;
    let mut sentences = Vec::new();
    for sent in &p.sentences {
        if remaining == 0 {
            break;
        }
        let take = sent.len().min(remaining);
        if take > 0 {
            sentences.push(sent[..take].to_vec());
            remaining -= take;
        }
    }
    Paragraph {
        title: p.title.clone(),
        sentences,
        is_gold: p.is_gold,
    }
}
