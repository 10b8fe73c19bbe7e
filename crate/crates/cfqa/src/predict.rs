//! Deployment-path prediction: one factual encoder pass per example, bias
//! subtraction when the checkpoint was trained counterfactually, argmax
//! decoding for support sets and the answer span.

use crate::corpus::{Example, Vocabulary};
use crate::effects::{infer, CounterfactualBias};
use crate::metrics::Prediction;
use crate::model::Model;
use crate::trainer::TrainMode;
use crate::util::par::ordered_map;
use crate::Result;

pub const TYPE_NAMES: [&str; 4] = ["yes", "no", "span", "entity"];

/// Longest answer span considered during decoding.
pub const MAX_ANSWER_TOKENS: usize = 8;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Best (start, end) pair maximizing `start[i] + end[j]` subject to `i <= j`,
/// both inside the same paragraph, and span length at most
/// [`MAX_ANSWER_TOKENS`].
fn best_span(
    start: &[f64],
    end: &[f64],
    layout: &crate::model::SeqLayout,
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for p in &layout.paragraphs {
        for i in p.start..p.end {
            if start[i] == f64::NEG_INFINITY {
                continue;
            }
            let j_max = (i + MAX_ANSWER_TOKENS).min(p.end);
            for j in i..j_max {
                if end[j] == f64::NEG_INFINITY {
                    continue;
                }
                let score = start[i] + end[j];
                if best.map(|(_, _, b)| score > b).unwrap_or(true) {
                    best = Some((i, j, score));
                }
            }
        }
    }
    best.map(|(i, j, _)| (i, j))
}

/// Predict one example through the deployed scoring path.
pub fn predict_example(
    model: &Model,
    bias: &CounterfactualBias,
    mode: TrainMode,
    ex: &Example,
    vocab: &Vocabulary,
) -> Result<Prediction> {
    let rep = model.encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)?;
    let factual = model.head_outputs(&rep);
    let scored = match mode {
        TrainMode::Counterfactual => infer(&factual, bias),
        TrainMode::Baseline => factual,
    };

    let supp_paragraphs = rep
        .layout
        .paragraphs
        .iter()
        .zip(&scored.para)
        .filter(|(_, l)| l[1] > l[0])
        .map(|(p, _)| p.title.clone())
        .collect();
    let supp_sentences = rep
        .layout
        .paragraphs
        .iter()
        .zip(&scored.sent)
        .flat_map(|(p, ls)| {
            p.sentences
                .iter()
                .zip(ls)
                .filter(|(_, l)| l[1] > l[0])
                .map(|(s, _)| (p.title.clone(), s.index))
        })
        .collect();

    let type_idx = argmax(&scored.type_logits);
    let answer = match TYPE_NAMES[type_idx] {
        "yes" => "yes".to_string(),
        "no" => "no".to_string(),
        _ => match best_span(&scored.start, &scored.end, &rep.layout) {
            Some((i, j)) => vocab.detokenize(&rep.layout.tokens[i..=j]),
            None => String::new(),
        },
    };

    Ok(Prediction {
        id: ex.id.clone(),
        answer,
        supp_paragraphs,
        supp_sentences,
        answer_type: TYPE_NAMES[type_idx].to_string(),
    })
}

/// Predict a whole dataset, in order.
pub fn predict_dataset(
    model: &Model,
    mode: TrainMode,
    examples: &[Example],
    vocab: &Vocabulary,
) -> Result<Vec<Prediction>> {
    let bias = match mode {
        TrainMode::Counterfactual => CounterfactualBias::from_model(model),
        TrainMode::Baseline => {
            CounterfactualBias::zeros(model.bias_mode, model.config.max_seq_len)
        }
    };
    ordered_map(examples, |ex| {
        predict_example(model, &bias, mode, ex, vocab)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen::{generate_dataset, GenConfig};
    use crate::effects::BiasMode;
    use crate::model::BackboneConfig;

    #[test]
    fn predictions_are_well_formed() {
        let gen = GenConfig {
            num_examples: 6,
            entity_pool_size: 40,
            seed: 2,
            ..GenConfig::default()
        };
        let vocab = gen.vocabulary().unwrap();
        let examples = generate_dataset(&gen).unwrap();
        let backbone = BackboneConfig {
            hidden_dim: 16,
            layers: 1,
            attention_heads: 2,
            ffn_dim: 32,
            max_seq_len: 96,
            head_hidden: true,
            seed: 3,
        };
        let model = Model::new(backbone, vocab.len(), BiasMode::Random).unwrap();
        let preds = predict_dataset(&model, TrainMode::Baseline, &examples, &vocab).unwrap();
        assert_eq!(preds.len(), examples.len());
        for (p, ex) in preds.iter().zip(&examples) {
            assert_eq!(p.id, ex.id);
            assert!(TYPE_NAMES.contains(&p.answer_type.as_str()));
            if p.answer_type == "span" || p.answer_type == "entity" {
                assert!(!p.answer.is_empty());
            }
            for title in &p.supp_paragraphs {
                assert!(ex.paragraphs.iter().any(|q| &q.title == title));
            }
        }
    }

    #[test]
    fn span_decoding_respects_paragraph_bounds() {
        let gen = GenConfig {
            num_examples: 3,
            entity_pool_size: 40,
            seed: 4,
            ..GenConfig::default()
        };
        let vocab = gen.vocabulary().unwrap();
        let examples = generate_dataset(&gen).unwrap();
        let backbone = BackboneConfig {
            hidden_dim: 8,
            layers: 1,
            attention_heads: 1,
            ffn_dim: 16,
            max_seq_len: 96,
            head_hidden: false,
            seed: 4,
        };
        let model = Model::new(backbone, vocab.len(), BiasMode::Random).unwrap();
        for ex in &examples {
            let rep = model
                .encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)
                .unwrap();
            let outs = model.head_outputs(&rep);
            if let Some((i, j)) = best_span(&outs.start, &outs.end, &rep.layout) {
                assert!(j >= i && j - i < MAX_ANSWER_TOKENS);
                let same_para = rep
                    .layout
                    .paragraphs
                    .iter()
                    .any(|p| i >= p.start && j < p.end);
                assert!(same_para, "span crosses paragraph boundaries");
            }
        }
    }
}
