//! Training: loss composition over fused outputs, SGD with momentum, and
//! checkpoint-ready models for both the counterfactual method and the plain
//! baseline.

mod graph;
pub mod loss;
mod optimizer;
mod plan;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocabulary};
use crate::effects::{self, BiasMode, CounterfactualBias};
use crate::model::{BackboneConfig, Grads, Model, Tape};
use crate::util::par::ordered_map;
use crate::util::rng::{shuffle, substream, Stream};
use crate::{Error, Result};
pub use loss::{compute_loss, GoldLabels, LossComponents};

use graph::build_example_graph;
use plan::{build_batch_plans, ExamplePlan, PlanCounters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Counterfactual,
    Baseline,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counterfactual" => Ok(TrainMode::Counterfactual),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::Config(format!("unknown train mode {other:?}"))),
        }
    }
}

/// Which counterfactual branch to remove from the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateBranch {
    CfFocal,
    CfContext,
}

impl std::str::FromStr for AblateBranch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf_focal" => Ok(AblateBranch::CfFocal),
            "cf_context" => Ok(AblateBranch::CfContext),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sentence-loss weight.
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Used by the SGD optimizer only.
    pub momentum: f64,
    /// Batch size in examples.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub bias_mode: BiasMode,
    pub ablate: Option<AblateBranch>,
    /// Redraw perturbations and donor contexts each epoch (`false` freezes
    /// the epoch-0 draws).
    pub resample_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            momentum: 0.9,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            mode: TrainMode::Counterfactual,
            bias_mode: BiasMode::Random,
            ablate: None,
            resample_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train config: {m}")));
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return fail("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.mode == TrainMode::Counterfactual && self.batch_size < 2 {
            return fail(
                "counterfactual mode needs batch_size >= 2 so context resampling has a donor"
                    .into(),
            );
        }
        if self.mode == TrainMode::Baseline && self.ablate.is_some() {
            return fail("ablation only applies to counterfactual mode".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub start: f64,
    pub end: f64,
    pub sent: f64,
    pub para: f64,
    pub type_loss: f64,
    pub total: f64,
    pub examples: usize,
    pub span_examples: usize,
}

/// Quick argmax accuracies on a training-set slice, taken after the last
/// epoch with the deployed (bias-subtracted) scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub examples: usize,
    pub para_accuracy: f64,
    pub sent_accuracy: f64,
    pub type_accuracy: f64,
    pub span_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub bias_mode: BiasMode,
    pub ablate: Option<AblateBranch>,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub final_snapshot: MetricSnapshot,
    pub wall_time_secs: f64,
    pub perturb_calls: u64,
    pub resample_calls: u64,
    /// Span-type examples skipped for the span loss (target truncated away).
    pub span_skipped: u64,
    /// Aggregate focal-perturbation outcome counts.
    pub perturb_selected: u64,
    pub perturb_tokens: u64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

fn forward_backward(model: &Model, plan: &ExamplePlan, lambda: f64) -> (LossComponents, Grads) {
    let mut tape = Tape::new(&model.params);
    let graph = build_example_graph(model, &mut tape, plan, lambda);
    let mut grads = Grads::zeros_like(&model.params);
    tape.backward(graph.total, &mut grads);
    (graph.components, grads)
}

/// Train a model on `examples`. Deterministic per config: identical configs
/// produce identical checkpoints, and baseline and counterfactual modes
/// consume identical example streams for the same seed.
pub fn train(
    examples: &[Example],
    vocab: &Vocabulary,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    backbone.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for ex in examples {
        ex.validate_corpus(vocab)?;
    }

    let started = Instant::now();
    let mut model = Model::new(backbone.clone(), vocab.len(), cfg.bias_mode)?;
    let mut opt = optimizer::Optimizer::new(
        cfg.optimizer,
        &model.params,
        cfg.learning_rate,
        cfg.momentum,
    );
    let mut counters = PlanCounters::default();
    let mut span_skipped = 0u64;
    let mut epoch_stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u64), &mut order);

        let mut sums = LossComponents::default();
        let mut n_examples = 0usize;
        let mut n_span = 0usize;

        let epoch_key = if cfg.resample_each_epoch { epoch as u64 } else { 0 };
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let indices: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let plans = build_batch_plans(
                &refs,
                &indices,
                vocab,
                cfg,
                model.config.max_seq_len,
                epoch_key,
                &mut counters,
            )?;
            for p in &plans {
                if p.labels.span_skipped {
                    span_skipped += 1;
                }
            }

            let results = ordered_map(&plans, |plan| forward_backward(&model, plan, cfg.lambda));

            let mut batch_grads = Grads::zeros_like(&model.params);
            for (i, (components, grads)) in results.iter().enumerate() {
                if !components.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}, batch {batch_no}, example {}",
                        refs[i].id
                    )));
                }
                batch_grads.add_assign(grads);
                sums.start += components.start;
                sums.end += components.end;
                sums.sent += components.sent;
                sums.para += components.para;
                sums.type_loss += components.type_loss;
                sums.total += components.total;
                n_examples += 1;
                if plans[i].labels.span.is_some() {
                    n_span += 1;
                }
            }
            batch_grads.scale(1.0 / plans.len() as f64);
            opt.step(&mut model.params, &batch_grads);
        }

        let span_div = n_span.max(1) as f64;
        let all_div = n_examples.max(1) as f64;
        epoch_stats.push(EpochStats {
            epoch,
            start: sums.start / span_div,
            end: sums.end / span_div,
            sent: sums.sent / all_div,
            para: sums.para / all_div,
            type_loss: sums.type_loss / all_div,
            total: sums.total / all_div,
            examples: n_examples,
            span_examples: n_span,
        });
    }

    let snapshot = snapshot_accuracy(&model, examples, vocab, cfg)?;
    let report = TrainReport {
        mode: cfg.mode,
        bias_mode: cfg.bias_mode,
        ablate: cfg.ablate,
        seed: cfg.seed,
        epochs: epoch_stats,
        final_snapshot: snapshot,
        wall_time_secs: started.elapsed().as_secs_f64(),
        perturb_calls: counters.perturb_calls,
        resample_calls: counters.resample_calls,
        span_skipped,
        perturb_selected: counters.perturb_stats.selected,
        perturb_tokens: counters.perturb_stats.tokens,
    };
    Ok(TrainOutcome { model, report })
}

/// Train with one counterfactual branch removed from the fusion.
pub fn ablate_branch(
    examples: &[Example],
    vocab: &Vocabulary,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    drop: AblateBranch,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        ablate: Some(drop),
        mode: TrainMode::Counterfactual,
        ..cfg.clone()
    };
    train(examples, vocab, backbone, &cfg)
}

fn snapshot_accuracy(
    model: &Model,
    examples: &[Example],
    _vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<MetricSnapshot> {
    let take = examples.len().min(200);
    let slice = &examples[..take];
    let bias = match cfg.mode {
        TrainMode::Counterfactual => CounterfactualBias::from_model(model),
        TrainMode::Baseline => CounterfactualBias::zeros(cfg.bias_mode, model.config.max_seq_len),
    };
    let outs = ordered_map(slice, |ex| -> Result<(usize, usize, usize, usize, usize, usize, bool, bool)> {
        let rep = model.encode_context(Some(&ex.id), &ex.question, &ex.paragraphs)?;
        let scored = effects::infer(&model.head_outputs(&rep), &bias);
        let labels = GoldLabels::from_example(ex, &rep.layout);
        let mut para_ok = 0;
        for (logits, &gold) in scored.para.iter().zip(&labels.para) {
            if (logits[1] > logits[0]) == gold {
                para_ok += 1;
            }
        }
        let mut sent_ok = 0;
        let mut sent_n = 0;
        for (ls, gs) in scored.sent.iter().zip(&labels.sent) {
            for (logits, &gold) in ls.iter().zip(gs) {
                if (logits[1] > logits[0]) == gold {
                    sent_ok += 1;
                }
                sent_n += 1;
            }
        }
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let type_ok = argmax(&scored.type_logits) == labels.type_index;
        let span_ok = labels
            .span
            .map(|(s, e)| argmax(&scored.start) == s && argmax(&scored.end) == e);
        Ok((
            para_ok,
            labels.para.len(),
            sent_ok,
            sent_n,
            type_ok as usize,
            1,
            span_ok.unwrap_or(false),
            labels.span.is_some(),
        ))
    });
    let mut para = (0usize, 0usize);
    let mut sent = (0usize, 0usize);
    let mut ty = (0usize, 0usize);
    let mut span = (0usize, 0usize);
    for o in outs {
        let (po, pn, so, sn, to, tn, sp_ok, sp_has) = o?;
        para = (para.0 + po, para.1 + pn);
        sent = (sent.0 + so, sent.1 + sn);
        ty = (ty.0 + to, ty.1 + tn);
        if sp_has {
            span = (span.0 + sp_ok as usize, span.1 + 1);
        }
    }
    let frac = |x: (usize, usize)| {
        if x.1 == 0 {
            0.0
        } else {
            x.0 as f64 / x.1 as f64
        }
    };
    Ok(MetricSnapshot {
        examples: take,
        para_accuracy: frac(para),
        sent_accuracy: frac(sent),
        type_accuracy: frac(ty),
        span_accuracy: frac(span),
    })
}

/// A frozen batch loss for gradient checking: counterfactual draws are fixed
/// at construction, making the loss a pure deterministic function of the
/// parameters.
pub struct LossProbe {
    plans: Vec<ExamplePlan>,
    lambda: f64,
}

impl LossProbe {
    pub fn new(
        model: &Model,
        examples: &[Example],
        vocab: &Vocabulary,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let indices: Vec<u64> = (0..examples.len() as u64).collect();
        let mut counters = PlanCounters::default();
        let plans = build_batch_plans(
            &refs,
            &indices,
            vocab,
            cfg,
            model.config.max_seq_len,
            0,
            &mut counters,
        )?;
        Ok(Self {
            plans,
            lambda: cfg.lambda,
        })
    }

    /// Mean loss over the frozen batch.
    pub fn loss(&self, model: &Model) -> f64 {
        let total: f64 = self
            .plans
            .iter()
            .map(|p| {
                let mut tape = Tape::new(&model.params);
                let g = build_example_graph(model, &mut tape, p, self.lambda);
                g.components.total
            })
            .sum();
        total / self.plans.len() as f64
    }

    /// Mean loss and analytic parameter gradients.
    pub fn loss_and_grads(&self, model: &Model) -> (f64, Grads) {
        let mut grads = Grads::zeros_like(&model.params);
        let mut total = 0.0;
        for p in &self.plans {
            let (components, g) = forward_backward(model, p, self.lambda);
            grads.add_assign(&g);
            total += components.total;
        }
        let n = self.plans.len() as f64;
        grads.scale(1.0 / n);
        (total / n, grads)
    }
}
