//! Per-paragraph factorization and counterfactual variants.
//!
//! Each example with paragraphs `p_1..p_m` becomes `m` triples
//! `(q, s = p_i, c = rest)`. A triple's context can be swapped for the
//! context of another example drawn from the mini-batch (`cf_context`), or
//! its focal paragraph can be token-perturbed (`cf_focal`).

use rand_core::RngCore;

use crate::corpus::vocab::{TokenId, Vocabulary, MASK_ID, NUM_SPECIAL};
use crate::corpus::{Example, Paragraph};
use crate::util::rng::{uniform_below, uniform_f64};
use crate::{Error, Result};

/// Fraction of focal-paragraph tokens selected for perturbation.
pub const PERTURB_RATE: f64 = 0.15;
/// Of the selected tokens: replaced by a random regular token / replaced by
/// `[MASK]` / kept unchanged.
pub const PERTURB_RANDOM: f64 = 0.8;
pub const PERTURB_MASK: f64 = 0.1;

/// Answer-side labels carried by every triple of an example.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleLabel {
    /// Is the focal paragraph a supporting fact.
    pub focal_is_supporting: bool,
    /// Per-sentence supporting-fact flags for the focal paragraph.
    pub focal_sentence_labels: Vec<bool>,
}

/// One `(q, s, c)` unit of the factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredTriple {
    pub example_id: String,
    /// Index of `s` in the original paragraph list.
    pub paragraph_index: usize,
    pub question: Vec<TokenId>,
    pub focal: Paragraph,
    /// Remaining paragraphs in original context order.
    pub context: Vec<Paragraph>,
    pub label: TripleLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterfactualKind {
    /// `c -> c*`: context resampled from another example.
    CfContext,
    /// `s -> s*`: focal paragraph token-perturbed.
    CfFocal,
}

/// A triple plus the synthesized replacement for one of its components.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualTriple {
    pub base: FactoredTriple,
    pub kind: CounterfactualKind,
    /// Replacement context when `kind == CfContext`.
    pub context_payload: Option<Vec<Paragraph>>,
    /// Replacement focal token sequence when `kind == CfFocal` (same length
    /// as the original, sentence structure preserved).
    pub focal_payload: Option<Vec<Vec<TokenId>>>,
}

/// Convert an example into one triple per paragraph, preserving context
/// order.
pub fn factor_example(example: &Example) -> Vec<FactoredTriple> {
    (0..example.paragraphs.len())
        .map(|i| {
            let focal = example.paragraphs[i].clone();
            let context: Vec<Paragraph> = example
                .paragraphs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| p.clone())
                .collect();
            let focal_sentence_labels = (0..focal.sentences.len())
                .map(|j| example.gold_sentence_ids.contains(&(focal.title.clone(), j)))
                .collect();
            FactoredTriple {
                example_id: example.id.clone(),
                paragraph_index: i,
                question: example.question.clone(),
                focal: focal.clone(),
                context,
                label: TripleLabel {
                    focal_is_supporting: focal.is_gold,
                    focal_sentence_labels,
                },
            }
        })
        .collect()
}

/// Replace triple `i`'s context with the context of a uniformly chosen batch
/// element from a different example.
pub fn sample_cf_context(
    batch: &[FactoredTriple],
    i: usize,
    rng: &mut impl RngCore,
) -> Result<CounterfactualTriple> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(
            "context resampling needs a batch of at least 2; enlarge the batch or fall back to \
             dataset-level sampling"
                .into(),
        ));
    }
    let base = &batch[i];
    let donors: Vec<usize> = (0..batch.len())
        .filter(|&j| j != i && batch[j].example_id != base.example_id)
        .collect();
    if donors.is_empty() {
        return Err(Error::BatchTooSmall(format!(
            "no donor from a different example available for {} (batch holds one example); \
             enlarge the batch or fall back to dataset-level sampling",
            base.example_id
        )));
    }
    let donor = donors[uniform_below(rng, donors.len())];
    Ok(CounterfactualTriple {
        base: base.clone(),
        kind: CounterfactualKind::CfContext,
        context_payload: Some(batch[donor].context.clone()),
        focal_payload: None,
    })
}

/// Per-token outcome counters from one or more perturbation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PerturbStats {
    pub tokens: u64,
    pub selected: u64,
    pub replaced_random: u64,
    pub replaced_mask: u64,
    pub kept_selected: u64,
}

/// Token-perturb a focal paragraph: each token is selected independently
/// with probability 0.15; a selected token becomes a random regular
/// vocabulary token with probability 0.8, `[MASK]` with probability 0.1, and
/// stays itself otherwise. Length and sentence structure are preserved.
pub fn perturb_focal(
    focal: &Paragraph,
    rng: &mut impl RngCore,
    vocab: &Vocabulary,
) -> Vec<Vec<TokenId>> {
    perturb_focal_traced(focal, rng, vocab, &mut PerturbStats::default())
}

/// As [`perturb_focal`], accumulating per-branch outcome counts.
pub fn perturb_focal_traced(
    focal: &Paragraph,
    rng: &mut impl RngCore,
    vocab: &Vocabulary,
    stats: &mut PerturbStats,
) -> Vec<Vec<TokenId>> {
    focal
        .sentences
        .iter()
        .map(|sentence| {
            sentence
                .iter()
                .map(|&tok| {
                    stats.tokens += 1;
                    if uniform_f64(rng) >= PERTURB_RATE {
                        return tok;
                    }
                    stats.selected += 1;
                    let branch = uniform_f64(rng);
                    if branch < PERTURB_RANDOM {
                        stats.replaced_random += 1;
                        (NUM_SPECIAL + uniform_below(rng, vocab.num_regular())) as TokenId
                    } else if branch < PERTURB_RANDOM + PERTURB_MASK {
                        stats.replaced_mask += 1;
                        MASK_ID
                    } else {
                        stats.kept_selected += 1;
                        tok
                    }
                })
                .collect()
        })
        .collect()
}

/// Convenience wrapper producing the full counterfactual triple for `s*`.
pub fn perturb_triple(
    triple: &FactoredTriple,
    rng: &mut impl RngCore,
    vocab: &Vocabulary,
) -> CounterfactualTriple {
    let payload = perturb_focal(&triple.focal, rng, vocab);
    CounterfactualTriple {
        base: triple.clone(),
        kind: CounterfactualKind::CfFocal,
        context_payload: None,
        focal_payload: Some(payload),
    }
}
