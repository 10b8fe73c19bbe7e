//! Loss composition: `L = L_start + L_end + lambda * L_sent + L_para +
//! L_type`, every term a softmax cross-entropy. Paragraph and sentence terms
//! average over their units so `lambda`'s scale does not drift with context
//! size.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerType, Example};
use crate::model::{HeadOutputs, SeqLayout};
use crate::{Error, Result};

/// Gold targets aligned with one factual layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldLabels {
    /// Per paragraph: is it a supporting fact.
    pub para: Vec<bool>,
    /// Per paragraph, per surviving sentence.
    pub sent: Vec<Vec<bool>>,
    /// Answer start/end positions (inclusive end) in layout coordinates.
    pub span: Option<(usize, usize)>,
    /// A span-type example whose span did not survive truncation.
    pub span_skipped: bool,
    /// Index into (yes, no, span, entity).
    pub type_index: usize,
}

impl GoldLabels {
    pub fn from_example(example: &Example, layout: &SeqLayout) -> Self {
        let para = layout.paragraphs.iter().map(|p| p.is_gold).collect();
        let sent = layout
            .paragraphs
            .iter()
            .map(|p| {
                p.sentences
                    .iter()
                    .map(|s| {
                        example
                            .gold_sentence_ids
                            .contains(&(p.title.clone(), s.index))
                    })
                    .collect()
            })
            .collect();
        let (span, span_skipped) = match (&example.answer_type, &example.answer_span) {
            (AnswerType::Span, Some(a)) => match layout.paragraph_index(&a.title) {
                Some(i) => {
                    let p = &layout.paragraphs[i];
                    let kept = p.end - p.start;
                    if a.end <= kept {
                        (Some((p.start + a.start, p.start + a.end - 1)), false)
                    } else {
                        (None, true)
                    }
                }
                None => (None, true),
            },
            (AnswerType::Span, None) => (None, false),
            _ => (None, false),
        };
        let type_index = match example.answer_type {
            AnswerType::Yes => 0,
            AnswerType::No => 1,
            AnswerType::Span => 2,
        };
        Self {
            para,
            sent,
            span,
            span_skipped,
            type_index,
        }
    }
}

/// Individual loss terms plus their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub start: f64,
    pub end: f64,
    pub sent: f64,
    pub para: f64,
    pub type_loss: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Stable softmax cross-entropy; `-inf` logits carry no mass and are valid
/// non-targets.
pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln() - logits[target]
}

/// Cross-entropy composition over fused head outputs. Span terms apply only
/// to span-type examples whose target survived truncation.
pub fn compute_loss(
    fused: &HeadOutputs,
    labels: &GoldLabels,
    lambda: f64,
) -> Result<LossComponents> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if fused.para.len() != labels.para.len() {
        return Err(Error::Shape(format!(
            "{} paragraphs in outputs, {} in labels",
            fused.para.len(),
            labels.para.len()
        )));
    }
    let mut para_sum = 0.0;
    for (logits, &gold) in fused.para.iter().zip(&labels.para) {
        para_sum += cross_entropy(logits, gold as usize);
    }
    let para = para_sum / labels.para.len() as f64;

    let mut sent_sum = 0.0;
    let mut sent_count = 0usize;
    for (ls, gs) in fused.sent.iter().zip(&labels.sent) {
        if ls.len() != gs.len() {
            return Err(Error::Shape("sentence unit count mismatch".into()));
        }
        for (logits, &gold) in ls.iter().zip(gs) {
            sent_sum += cross_entropy(logits, gold as usize);
            sent_count += 1;
        }
    }
    let sent = if sent_count > 0 {
        sent_sum / sent_count as f64
    } else {
        0.0
    };

    let (start, end) = match labels.span {
        Some((s, e)) => {
            if s >= fused.start.len() || e >= fused.end.len() {
                return Err(Error::Shape("span target outside logits".into()));
            }
            (
                cross_entropy(&fused.start, s),
                cross_entropy(&fused.end, e),
            )
        }
        None => (0.0, 0.0),
    };

    let type_loss = cross_entropy(&fused.type_logits, labels.type_index);
    let total = start + end + lambda * sent + para + type_loss;
    Ok(LossComponents {
        start,
        end,
        sent,
        para,
        type_loss,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::{normal_f64, substream, uniform_below, Stream};

    fn labels(paras: usize, sents: usize) -> GoldLabels {
        GoldLabels {
            para: (0..paras).map(|i| i < 2).collect(),
            sent: (0..paras).map(|_| (0..sents).map(|j| j == 0).collect()).collect(),
            span: Some((3, 4)),
            span_skipped: false,
            type_index: 2,
        }
    }

    fn one_hot_outputs(labels: &GoldLabels, n: usize, margin: f64) -> HeadOutputs {
        let two = |gold: bool| {
            if gold {
                [-margin, margin]
            } else {
                [margin, -margin]
            }
        };
        HeadOutputs {
            para: labels.para.iter().map(|&g| two(g)).collect(),
            sent: labels
                .sent
                .iter()
                .map(|s| s.iter().map(|&g| two(g)).collect())
                .collect(),
            start: (0..n)
                .map(|p| if p == labels.span.unwrap().0 { margin } else { -margin })
                .collect(),
            end: (0..n)
                .map(|p| if p == labels.span.unwrap().1 { margin } else { -margin })
                .collect(),
            type_logits: [-margin, -margin, margin, -margin],
        }
    }

    #[test]
    fn perfect_logits_drive_components_below_1e3() {
        let labels = labels(4, 2);
        let outs = one_hot_outputs(&labels, 10, 12.0);
        let c = compute_loss(&outs, &labels, 1.0).unwrap();
        assert!(c.start < 1e-3);
        assert!(c.end < 1e-3);
        assert!(c.sent < 1e-3);
        assert!(c.para < 1e-3);
        assert!(c.type_loss < 1e-3);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let labels = labels(4, 2);
        let mut outs = one_hot_outputs(&labels, 10, 0.0);
        outs.type_logits = [0.0; 4];
        let c = compute_loss(&outs, &labels, 1.0).unwrap();
        assert!((c.type_loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((c.para - (2.0f64).ln()).abs() < 1e-12);
        assert!((c.start - (10.0f64).ln()).abs() < 1e-12);
    }

    // Independently coded cross-entropy oracle, agreement to 1e-9.
    #[test]
    fn matches_ce_oracle_on_random_cases() {
        let mut rng = substream(9, Stream::Test, 0);
        let oracle_ce = |logits: &[f64], target: usize| -> f64 {
            // Direct formula: -log(exp(x_t) / sum exp(x_i)), shifted by the
            // max for stability but written independently.
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let denom: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            -((logits[target] - m).exp() / denom).ln()
        };
        for _ in 0..100 {
            let paras = 2 + uniform_below(&mut rng, 4);
            let sents = 1 + uniform_below(&mut rng, 3);
            let n = 6 + uniform_below(&mut rng, 10);
            let labels = GoldLabels {
                para: (0..paras).map(|_| uniform_below(&mut rng, 2) == 1).collect(),
                sent: (0..paras)
                    .map(|_| (0..sents).map(|_| uniform_below(&mut rng, 2) == 1).collect())
                    .collect(),
                span: Some((uniform_below(&mut rng, n), uniform_below(&mut rng, n))),
                span_skipped: false,
                type_index: uniform_below(&mut rng, 4),
            };
            let rand_pair = |rng: &mut _| [normal_f64(rng), normal_f64(rng)];
            let outs = HeadOutputs {
                para: (0..paras).map(|_| rand_pair(&mut rng)).collect(),
                sent: (0..paras)
                    .map(|_| (0..sents).map(|_| rand_pair(&mut rng)).collect())
                    .collect(),
                start: (0..n).map(|_| normal_f64(&mut rng)).collect(),
                end: (0..n).map(|_| normal_f64(&mut rng)).collect(),
                type_logits: [
                    normal_f64(&mut rng),
                    normal_f64(&mut rng),
                    normal_f64(&mut rng),
                    normal_f64(&mut rng),
                ],
            };
            let lambda = 0.5 + 0.5 * uniform_below(&mut rng, 3) as f64;
            let got = compute_loss(&outs, &labels, lambda).unwrap();

            let mut para = 0.0;
            for (l, &g) in outs.para.iter().zip(&labels.para) {
                para += oracle_ce(l, g as usize);
            }
            para /= paras as f64;
            let mut sent = 0.0;
            for (ls, gs) in outs.sent.iter().zip(&labels.sent) {
                for (l, &g) in ls.iter().zip(gs) {
                    sent += oracle_ce(l, g as usize);
                }
            }
            sent /= (paras * sents) as f64;
            let (s, e) = labels.span.unwrap();
            let start = oracle_ce(&outs.start, s);
            let end = oracle_ce(&outs.end, e);
            let ty = oracle_ce(&outs.type_logits, labels.type_index);
            let total = start + end + lambda * sent + para + ty;
            assert!((got.para - para).abs() < 1e-9);
            assert!((got.sent - sent).abs() < 1e-9);
            assert!((got.start - start).abs() < 1e-9);
            assert!((got.end - end).abs() < 1e-9);
            assert!((got.type_loss - ty).abs() < 1e-9);
            assert!((got.total - total).abs() < 1e-9);
        }
    }

    #[test]
    fn yes_no_examples_skip_span_terms() {
        let mut l = labels(3, 1);
        l.span = None;
        l.type_index = 0;
        let outs = one_hot_outputs(&labels(3, 1), 8, 3.0);
        let c = compute_loss(&outs, &l, 1.0).unwrap();
        assert_eq!(c.start, 0.0);
        assert_eq!(c.end, 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let l = labels(2, 1);
        let outs = one_hot_outputs(&l, 8, 3.0);
        assert!(compute_loss(&outs, &l, -0.5).is_err());
    }
}
