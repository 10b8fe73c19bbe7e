//! The per-example training graph.
//!
//! Counterfactual mode encodes `2m + 1` passes (one factual, `m` focal
//! perturbations, `m` context resamples), fuses each head's branch logits
//! minus the learnable bias, and composes the loss. Baseline mode encodes
//! the factual pass only and trains the same loss on raw factual logits.

use std::sync::Arc;

use crate::effects::BiasMode;
use crate::model::tape::BiasSub;
use crate::model::{Model, NodeId, SeqLayout, Tape};
use crate::trainer::loss::LossComponents;
use crate::trainer::plan::ExamplePlan;

pub(crate) struct ExampleGraph {
    pub total: NodeId,
    pub components: LossComponents,
}

/// Index of a layout position within the context-row ordering.
fn ctx_index_map(layout: &SeqLayout) -> Vec<Option<usize>> {
    let mut map = vec![None; layout.len()];
    for (i, pos) in layout.context_positions().into_iter().enumerate() {
        map[pos] = Some(i);
    }
    map
}

/// Build the fused loss for one plan. Counterfactual passes present in the
/// plan are encoded and fused; an empty branch list means that branch is
/// off (baseline or ablation).
pub(crate) fn build_example_graph(
    model: &Model,
    tape: &mut Tape,
    plan: &ExamplePlan,
    lambda: f64,
) -> ExampleGraph {
    let ids = model.ids();
    let counterfactual = !plan.cf_focal.is_empty() || !plan.cf_context.is_empty();
    let bias_sub = |vec_len: usize| match (model.bias_mode, vec_len) {
        (BiasMode::Uniform, _) => BiasSub::Scalar,
        (BiasMode::Random, _) => BiasSub::PerClass,
    };

    let o = model.encode_on_tape(tape, &plan.layout);
    let m_passes: Vec<NodeId> = plan
        .cf_focal
        .iter()
        .map(|p| model.encode_on_tape(tape, &p.layout))
        .collect();
    let g_passes: Vec<NodeId> = plan
        .cf_context
        .iter()
        .map(|p| model.encode_on_tape(tape, &p.layout))
        .collect();

    let num_paras = plan.layout.paragraphs.len();

    // Paragraph support units.
    let mut para_losses = Vec::with_capacity(num_paras);
    for i in 0..num_paras {
        let mut parts = Vec::with_capacity(3);
        let row = tape.select_row(o, plan.layout.paragraphs[i].start);
        parts.push(model.head_on_tape(tape, row, &ids.heads.para));
        if let Some(&mp) = m_passes.get(i) {
            let span = &plan.cf_focal[i].layout.paragraphs[plan.cf_focal[i].focal_pos];
            let row = tape.select_row(mp, span.start);
            parts.push(model.head_on_tape(tape, row, &ids.heads.para));
        }
        if let Some(&gp) = g_passes.get(i) {
            let span = &plan.cf_context[i].layout.paragraphs[plan.cf_context[i].focal_pos];
            let row = tape.select_row(gp, span.start);
            parts.push(model.head_on_tape(tape, row, &ids.heads.para));
        }
        let mut fused = tape.add_n(parts);
        if counterfactual {
            fused = tape.sub_param(fused, ids.bias.c_supp, bias_sub(2));
        }
        para_losses.push(tape.ce_loss(fused, plan.labels.para[i] as usize, None));
    }
    // Units are summed, not averaged: the support heads learn relational
    // features with no lexical shortcut, and per-unit averaging starves
    // their gradients next to the position-softmax span terms.
    let para_loss = tape.add_n(para_losses);

    // Sentence support units: fuse only sentences surviving in every
    // relevant pass (always all of them absent truncation).
    let mut sent_losses = Vec::new();
    for i in 0..num_paras {
        let o_para = &plan.layout.paragraphs[i];
        for (k, sent) in o_para.sentences.iter().enumerate() {
            let mut parts = Vec::with_capacity(3);
            let row = tape.select_row(o, sent.start);
            parts.push(model.head_on_tape(tape, row, &ids.heads.sent));
            let mut missing = false;
            if let Some(&mp) = m_passes.get(i) {
                let pass = &plan.cf_focal[i];
                let span = &pass.layout.paragraphs[pass.focal_pos];
                match span.sentences.iter().find(|s| s.index == sent.index) {
                    Some(s) => {
                        let row = tape.select_row(mp, s.start);
                        parts.push(model.head_on_tape(tape, row, &ids.heads.sent));
                    }
                    None => missing = true,
                }
            }
            if let Some(&gp) = g_passes.get(i) {
                let pass = &plan.cf_context[i];
                let span = &pass.layout.paragraphs[pass.focal_pos];
                match span.sentences.iter().find(|s| s.index == sent.index) {
                    Some(s) => {
                        let row = tape.select_row(gp, s.start);
                        parts.push(model.head_on_tape(tape, row, &ids.heads.sent));
                    }
                    None => missing = true,
                }
            }
            if missing {
                continue;
            }
            let mut fused = tape.add_n(parts);
            if counterfactual {
                fused = tape.sub_param(fused, ids.bias.c_supp, bias_sub(2));
            }
            sent_losses.push(tape.ce_loss(fused, plan.labels.sent[i][k] as usize, None));
        }
    }
    let sent_loss = if sent_losses.is_empty() {
        None
    } else {
        Some(tape.add_n(sent_losses))
    };

    // Span units over context rows.
    let mut span_losses: Option<(NodeId, NodeId)> = None;
    if let Some((start_pos, end_pos)) = plan.labels.span {
        let ctx_positions = plan.layout.context_positions();
        let ctx_map = ctx_index_map(&plan.layout);
        let start_target = ctx_map[start_pos].expect("span start is a paragraph token");
        let end_target = ctx_map[end_pos].expect("span end is a paragraph token");

        let o_ctx = tape.gather_from(o, ctx_positions.clone());
        let build_branch_mat = |tape: &mut Tape, passes: &[NodeId], plans: &[super::plan::BranchPass]| {
            let parts: Vec<(NodeId, usize, usize)> = passes
                .iter()
                .zip(plans)
                .map(|(&node, pass)| {
                    let span = &pass.layout.paragraphs[pass.focal_pos];
                    (node, span.start, span.end - span.start)
                })
                .collect();
            tape.concat_rows(parts)
        };

        let mut start_parts = vec![model.head_on_tape(tape, o_ctx, &ids.heads.start)];
        let mut end_parts = vec![model.head_on_tape(tape, o_ctx, &ids.heads.end)];
        if !m_passes.is_empty() {
            let m_bar = build_branch_mat(tape, &m_passes, &plan.cf_focal);
            start_parts.push(model.head_on_tape(tape, m_bar, &ids.heads.start));
            end_parts.push(model.head_on_tape(tape, m_bar, &ids.heads.end));
        }
        if !g_passes.is_empty() {
            let g_bar = build_branch_mat(tape, &g_passes, &plan.cf_context);
            start_parts.push(model.head_on_tape(tape, g_bar, &ids.heads.start));
            end_parts.push(model.head_on_tape(tape, g_bar, &ids.heads.end));
        }
        let mut start_fused = tape.add_n(start_parts);
        let mut end_fused = tape.add_n(end_parts);
        if counterfactual {
            let how = match model.bias_mode {
                BiasMode::Uniform => BiasSub::Scalar,
                BiasMode::Random => BiasSub::PerPosition(Arc::new(ctx_positions)),
            };
            start_fused = tape.sub_param(start_fused, ids.bias.c_ans, how.clone());
            end_fused = tape.sub_param(end_fused, ids.bias.c_ans, how);
        }
        span_losses = Some((
            tape.ce_loss(start_fused, start_target, None),
            tape.ce_loss(end_fused, end_target, None),
        ));
    }

    // Answer type from the CLS rows.
    let cls = tape.select_row(o, plan.layout.cls_pos);
    let mut type_parts = vec![model.head_on_tape(tape, cls, &ids.heads.ty)];
    if !m_passes.is_empty() {
        let rows: Vec<NodeId> = m_passes
            .iter()
            .zip(&plan.cf_focal)
            .map(|(&mp, pass)| tape.select_row(mp, pass.layout.cls_pos))
            .collect();
        let heads: Vec<NodeId> = rows
            .into_iter()
            .map(|r| model.head_on_tape(tape, r, &ids.heads.ty))
            .collect();
        type_parts.push(tape.add_n(heads));
    }
    if !g_passes.is_empty() {
        let rows: Vec<NodeId> = g_passes
            .iter()
            .zip(&plan.cf_context)
            .map(|(&gp, pass)| tape.select_row(gp, pass.layout.cls_pos))
            .collect();
        let heads: Vec<NodeId> = rows
            .into_iter()
            .map(|r| model.head_on_tape(tape, r, &ids.heads.ty))
            .collect();
        type_parts.push(tape.add_n(heads));
    }
    let mut type_fused = tape.add_n(type_parts);
    if counterfactual {
        type_fused = tape.sub_param(type_fused, ids.bias.c_type, bias_sub(4));
    }
    let type_loss = tape.ce_loss(type_fused, plan.labels.type_index, None);

    // Total: start + end + lambda * sent + para + type.
    let mut terms = vec![para_loss, type_loss];
    if let Some(s) = sent_loss {
        terms.push(tape.scale(s, lambda));
    }
    if let Some((s, e)) = span_losses {
        terms.push(s);
        terms.push(e);
    }
    let total = tape.add_n(terms);

    let components = LossComponents {
        start: span_losses.map(|(s, _)| tape.scalar(s)).unwrap_or(0.0),
        end: span_losses.map(|(_, e)| tape.scalar(e)).unwrap_or(0.0),
        sent: sent_loss.map(|s| tape.scalar(s)).unwrap_or(0.0),
        para: tape.scalar(para_loss),
        type_loss: tape.scalar(type_loss),
        total: tape.scalar(total),
    };
    ExampleGraph { total, components }
}
