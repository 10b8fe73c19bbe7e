//! Prediction-head outputs and their constructions.
//!
//! Paragraph and sentence logits come from the classifier applied to start
//! tokens; span logits from per-position projections over paragraph rows;
//! type logits from the `[CLS]` row (summed across passes for branch
//! outputs). Branch span prediction concatenates the focal-paragraph rows of
//! the per-paragraph passes into one full-context matrix.

use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape};
use super::{EncodedSequence, Model};
use crate::{Error, Result};

/// Logits for every head of one encoded input. Span logits cover the full
/// layout, with non-paragraph positions masked to `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    /// Two logits (not-supporting, supporting) per paragraph.
    pub para: Vec<[f64; 2]>,
    /// Two logits per surviving sentence, grouped by paragraph.
    pub sent: Vec<Vec<[f64; 2]>>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// (yes, no, span, entity).
    pub type_logits: [f64; 4],
}

impl HeadOutputs {
    pub fn shape_matches(&self, other: &Self) -> bool {
        self.para.len() == other.para.len()
            && self.sent.len() == other.sent.len()
            && self
                .sent
                .iter()
                .zip(&other.sent)
                .all(|(a, b)| a.len() == b.len())
            && self.start.len() == other.start.len()
            && self.end.len() == other.end.len()
    }

    /// Zeroed outputs with the same shape (used by branch-ablation tests).
    pub fn zeros_like(&self) -> Self {
        Self {
            para: vec![[0.0; 2]; self.para.len()],
            sent: self.sent.iter().map(|s| vec![[0.0; 2]; s.len()]).collect(),
            start: vec![0.0; self.start.len()],
            end: vec![0.0; self.end.len()],
            type_logits: [0.0; 4],
        }
    }
}

impl Model {
    fn head_rows(&self, rep: &EncodedSequence, rows: Vec<usize>, head: HeadKind) -> Mat {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(rep.hidden.clone());
        let sel = tape.gather_from(x, rows);
        let ids = self.ids();
        let mlp = match head {
            HeadKind::Para => &ids.heads.para,
            HeadKind::Sent => &ids.heads.sent,
            HeadKind::Type => &ids.heads.ty,
        };
        let out = self.head_on_tape(&mut tape, sel, mlp);
        tape.value(out)
    }

    /// Support logits for paragraph `i` from its start-token row.
    pub fn para_logits(&self, rep: &EncodedSequence, i: usize) -> Result<[f64; 2]> {
        let span = rep
            .layout
            .paragraphs
            .get(i)
            .ok_or_else(|| Error::Shape(format!("paragraph {i} not in position map")))?;
        let m = self.head_rows(rep, vec![span.start], HeadKind::Para);
        Ok([m.get(0, 0), m.get(0, 1)])
    }

    /// Support logits for sentence `j` of paragraph `i` from its start row.
    /// `j` indexes the surviving sentences of the layout.
    pub fn sent_logits(&self, rep: &EncodedSequence, i: usize, j: usize) -> Result<[f64; 2]> {
        let span = rep
            .layout
            .paragraphs
            .get(i)
            .ok_or_else(|| Error::Shape(format!("paragraph {i} not in position map")))?;
        let sent = span
            .sentences
            .get(j)
            .ok_or_else(|| Error::Shape(format!("sentence ({i}, {j}) not in position map")))?;
        let m = self.head_rows(rep, vec![sent.start], HeadKind::Sent);
        Ok([m.get(0, 0), m.get(0, 1)])
    }

    /// Concatenate the focal-paragraph rows of per-paragraph branch passes
    /// into the full-context matrix (the `M`-bar / `G`-bar construction).
    /// `reps[i]` must be the pass whose focal paragraph is paragraph `i` of
    /// one example.
    pub fn concat_branch_spans(&self, reps: &[EncodedSequence]) -> Result<Mat> {
        if reps.is_empty() {
            return Err(Error::Shape("no branch passes to concatenate".into()));
        }
        let first_id = reps[0].example_id.as_deref();
        let d = self.config.hidden_dim;
        let mut rows = Vec::new();
        for (i, rep) in reps.iter().enumerate() {
            if rep.example_id.as_deref() != first_id {
                return Err(Error::Shape(format!(
                    "branch pass {i} is from example {:?}, expected {:?}",
                    rep.example_id, first_id
                )));
            }
            let focal = rep.focal_index.ok_or_else(|| {
                Error::Shape(format!("branch pass {i} has no focal paragraph"))
            })?;
            let span = &rep.layout.paragraphs[focal];
            for r in span.start..span.end {
                rows.extend_from_slice(rep.hidden.row(r));
            }
        }
        let n = rows.len() / d;
        Ok(Mat::from_vec(n, d, rows))
    }

    /// Per-position start and end logits over the rows of `matrix` (no
    /// masking; rows are assumed to be token-aligned).
    pub fn span_logits(&self, matrix: &Mat) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(matrix.clone());
        let ids = self.ids();
        let s = self.head_on_tape(&mut tape, x, &ids.heads.start);
        let e = self.head_on_tape(&mut tape, x, &ids.heads.end);
        (tape.value(s).data, tape.value(e).data)
    }

    /// Answer-type logits from the `[CLS]` row of the factual pass.
    pub fn type_logits_factual(&self, rep: &EncodedSequence) -> [f64; 4] {
        let m = self.head_rows(rep, vec![rep.layout.cls_pos], HeadKind::Type);
        [m.get(0, 0), m.get(0, 1), m.get(0, 2), m.get(0, 3)]
    }

    /// Branch answer-type logits: the classifier summed over the `[CLS]`
    /// rows of each per-paragraph pass.
    pub fn type_logits_branch(&self, reps: &[EncodedSequence]) -> Result<[f64; 4]> {
        if reps.is_empty() {
            return Err(Error::Shape("type branch needs at least one pass".into()));
        }
        let mut out = [0.0; 4];
        for rep in reps {
            let t = self.type_logits_factual(rep);
            for (o, v) in out.iter_mut().zip(t) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// The full factual head bundle for one encoded input: paragraph and
    /// sentence logits per position map, masked span logits over the layout,
    /// and type logits.
    pub fn head_outputs(&self, rep: &EncodedSequence) -> HeadOutputs {
        let para_rows: Vec<usize> = rep.layout.paragraphs.iter().map(|p| p.start).collect();
        let para_mat = self.head_rows(rep, para_rows, HeadKind::Para);
        let para = (0..rep.layout.paragraphs.len())
            .map(|i| [para_mat.get(i, 0), para_mat.get(i, 1)])
            .collect();

        let mut sent = Vec::with_capacity(rep.layout.paragraphs.len());
        let sent_rows: Vec<usize> = rep
            .layout
            .paragraphs
            .iter()
            .flat_map(|p| p.sentences.iter().map(|s| s.start))
            .collect();
        let sent_mat = self.head_rows(rep, sent_rows, HeadKind::Sent);
        let mut cursor = 0;
        for p in &rep.layout.paragraphs {
            let logits = (0..p.sentences.len())
                .map(|k| {
                    let row = [sent_mat.get(cursor + k, 0), sent_mat.get(cursor + k, 1)];
                    row
                })
                .collect();
            cursor += p.sentences.len();
            sent.push(logits);
        }

        let (raw_start, raw_end) = self.span_logits(&rep.hidden);
        let mask = rep.layout.paragraph_mask();
        let masked = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .zip(&mask)
                .map(|(x, &keep)| if keep { x } else { f64::NEG_INFINITY })
                .collect()
        };

        HeadOutputs {
            para,
            sent,
            start: masked(raw_start),
            end: masked(raw_end),
            type_logits: self.type_logits_factual(rep),
        }
    }
}

enum HeadKind {
    Para,
    Sent,
    Type,
}
