//! Per-example training plans.
//!
//! A plan fixes everything random about one example's step — the perturbed
//! focal paragraphs and the donor contexts — so the loss becomes a pure
//! function of the parameters. Gradient checks rebuild the same loss from a
//! frozen plan; training builds fresh plans per epoch (or reuses epoch-0
//! draws when counterfactual resampling is disabled).

use crate::corpus::vocab::Vocabulary;
use crate::corpus::{Example, Paragraph};
use crate::factorize::{
    factor_example, perturb_focal_traced, sample_cf_context, FactoredTriple, PerturbStats,
};
use crate::model::layout::{build_layout, build_triple_layout_protected, cut_paragraph};
use crate::model::SeqLayout;
use crate::trainer::loss::GoldLabels;
use crate::trainer::{AblateBranch, TrainConfig, TrainMode};
use crate::util::rng::{substream, Stream};
use crate::Result;

/// One branch pass: the layout to encode and where the focal paragraph sits
/// in it.
#[derive(Debug, Clone)]
pub(crate) struct BranchPass {
    pub layout: SeqLayout,
    pub focal_pos: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ExamplePlan {
    pub layout: SeqLayout,
    pub labels: GoldLabels,
    /// `M_i` passes (focal perturbed), one per paragraph; empty when the
    /// branch is off.
    pub cf_focal: Vec<BranchPass>,
    /// `G_i` passes (context resampled), one per paragraph; empty when the
    /// branch is off.
    pub cf_context: Vec<BranchPass>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PlanCounters {
    pub perturb_calls: u64,
    pub resample_calls: u64,
    pub perturb_stats: PerturbStats,
}

/// Build plans for one batch. `epoch_key` feeds the substreams so
/// counterfactual draws refresh per epoch; `indices` are dataset-global
/// example indices keying per-example streams.
pub(crate) fn build_batch_plans(
    examples: &[&Example],
    indices: &[u64],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    max_seq_len: usize,
    epoch_key: u64,
    counters: &mut PlanCounters,
) -> Result<Vec<ExamplePlan>> {
    let counterfactual = cfg.mode == TrainMode::Counterfactual;
    let want_focal = counterfactual && cfg.ablate != Some(AblateBranch::CfFocal);
    let want_context = counterfactual && cfg.ablate != Some(AblateBranch::CfContext);

    // The in-batch donor pool for context resampling.
    let pool: Vec<FactoredTriple> = if want_context {
        examples.iter().flat_map(|ex| factor_example(ex)).collect()
    } else {
        Vec::new()
    };
    let mut pool_offsets = Vec::with_capacity(examples.len());
    let mut off = 0;
    for ex in examples {
        pool_offsets.push(off);
        off += ex.paragraphs.len();
    }

    let mut plans = Vec::with_capacity(examples.len());
    for (b, (ex, &global_idx)) in examples.iter().zip(indices).enumerate() {
        let layout = build_layout(&ex.question, &ex.paragraphs, max_seq_len)?;
        let labels = GoldLabels::from_example(ex, &layout);
        let m = ex.paragraphs.len();

        let mut cf_focal = Vec::new();
        if want_focal {
            for i in 0..m {
                let rng = &mut substream(
                    cfg.seed,
                    Stream::PerturbFocal,
                    mix(epoch_key, global_idx, i as u64),
                );
                let perturbed = perturb_focal_traced(
                    &ex.paragraphs[i],
                    rng,
                    vocab,
                    &mut counters.perturb_stats,
                );
                counters.perturb_calls += 1;
                let mut paragraphs = ex.paragraphs.clone();
                paragraphs[i] = Paragraph {
                    title: ex.paragraphs[i].title.clone(),
                    sentences: perturbed,
                    is_gold: ex.paragraphs[i].is_gold,
                };
                let layout_m = build_layout(&ex.question, &paragraphs, max_seq_len)?;
                cf_focal.push(BranchPass {
                    layout: layout_m,
                    focal_pos: i,
                });
            }
        }

        let mut cf_context = Vec::new();
        if want_context {
            for i in 0..m {
                let rng = &mut substream(
                    cfg.seed,
                    Stream::SampleContext,
                    mix(epoch_key, global_idx, i as u64),
                );
                let cf = sample_cf_context(&pool, pool_offsets[b] + i, rng)?;
                counters.resample_calls += 1;
                // Clamp the focal paragraph to its factually-kept length so
                // branch rows align with the factual pass.
                let kept = layout.paragraphs[i].end - layout.paragraphs[i].start;
                let focal = cut_paragraph(&ex.paragraphs[i], kept);
                let donor = cf.context_payload.expect("context payload present");
                let (layout_g, focal_pos) = build_triple_layout_protected(
                    &ex.question,
                    &focal,
                    i,
                    &donor,
                    max_seq_len,
                    true,
                )?;
                cf_context.push(BranchPass {
                    layout: layout_g,
                    focal_pos,
                });
            }
        }

        plans.push(ExamplePlan {
            layout,
            labels,
            cf_focal,
            cf_context,
        });
    }
    Ok(plans)
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    // Distinct (epoch, example, paragraph) keys must map to distinct
    // substream indices; paragraph counts and epochs stay far below 2^16.
    (a << 48) ^ (b << 16) ^ c
}
