//! Causal-effect fusion and TIE inference.
//!
//! Training combines the factual pass with the two counterfactual branches
//! and subtracts the learnable bias `C`:
//! `Y <- Y(q,s,c*) + Y(q,s*,c) + Y(q,s,c) - C`. Inference drops the branch
//! passes entirely and scores `Y(q,s,c) - C`, so deployed cost matches a
//! plain model.

use serde::{Deserialize, Serialize};

use crate::model::{HeadOutputs, Model};
use crate::{Error, Result};

/// Distribution assumption for the counterfactual output `C`: `random`
/// learns an unconstrained vector per head, `uniform` a single scalar per
/// head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    Random,
    Uniform,
}

impl std::str::FromStr for BiasMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BiasMode::Random),
            "uniform" => Ok(BiasMode::Uniform),
            other => Err(Error::Config(format!("unknown bias mode {other:?}"))),
        }
    }
}

/// The learnable counterfactual bias, one component per head family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualBias {
    pub mode: BiasMode,
    /// Per-position answer bias (`max_seq_len` entries in random mode, one
    /// in uniform mode), sliced to each example's length.
    pub c_ans: Vec<f64>,
    /// Two entries in random mode, one in uniform mode.
    pub c_supp: Vec<f64>,
    /// Four entries in random mode, one in uniform mode.
    pub c_type: Vec<f64>,
}

impl CounterfactualBias {
    pub fn zeros(mode: BiasMode, max_seq_len: usize) -> Self {
        let (a, s, t) = match mode {
            BiasMode::Random => (max_seq_len, 2, 4),
            BiasMode::Uniform => (1, 1, 1),
        };
        Self {
            mode,
            c_ans: vec![0.0; a],
            c_supp: vec![0.0; s],
            c_type: vec![0.0; t],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = match self.mode {
            BiasMode::Random => self.c_supp.len() == 2 && self.c_type.len() == 4,
            BiasMode::Uniform => {
                self.c_ans.len() == 1 && self.c_supp.len() == 1 && self.c_type.len() == 1
            }
        };
        if !shapes_ok {
            return Err(Error::Shape(format!(
                "bias shapes ({}, {}, {}) invalid for {:?} mode",
                self.c_ans.len(),
                self.c_supp.len(),
                self.c_type.len(),
                self.mode
            )));
        }
        let finite = self
            .c_ans
            .iter()
            .chain(&self.c_supp)
            .chain(&self.c_type)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("bias contains non-finite values".into()));
        }
        Ok(())
    }

    /// Read the bias out of a trained model's parameter store.
    pub fn from_model(model: &Model) -> Self {
        let read = |name: &str| {
            let id = model.params.id(name).expect("bias parameter present");
            model.params.get(id).data.clone()
        };
        Self {
            mode: model.bias_mode,
            c_ans: read("bias.c_ans"),
            c_supp: read("bias.c_supp"),
            c_type: read("bias.c_type"),
        }
    }

    fn ans_at(&self, pos: usize) -> f64 {
        match self.mode {
            BiasMode::Random => self.c_ans[pos],
            BiasMode::Uniform => self.c_ans[0],
        }
    }

    fn supp(&self, class: usize) -> f64 {
        match self.mode {
            BiasMode::Random => self.c_supp[class],
            BiasMode::Uniform => self.c_supp[0],
        }
    }

    fn type_c(&self, class: usize) -> f64 {
        match self.mode {
            BiasMode::Random => self.c_type[class],
            BiasMode::Uniform => self.c_type[0],
        }
    }
}

/// The three branch outputs for one example, pre-fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBundle {
    /// `Y(q,s,c)`.
    pub factual: HeadOutputs,
    /// `Y(q,s*,c)`.
    pub cf_focal: HeadOutputs,
    /// `Y(q,s,c*)`.
    pub cf_context: HeadOutputs,
}

impl LogitsBundle {
    fn check_shapes(&self) -> Result<()> {
        if !self.factual.shape_matches(&self.cf_focal)
            || !self.factual.shape_matches(&self.cf_context)
        {
            return Err(Error::Shape(
                "bundle branches have mismatched head shapes".into(),
            ));
        }
        Ok(())
    }
}

/// Total-effect fusion: elementwise `factual + cf_focal + cf_context - C`.
pub fn fuse(bundle: &LogitsBundle, bias: &CounterfactualBias) -> Result<HeadOutputs> {
    bundle.check_shapes()?;
    bias.validate()?;
    let n = bundle.factual.start.len();
    if bias.mode == BiasMode::Random && bias.c_ans.len() < n {
        return Err(Error::Shape(format!(
            "c_ans holds {} positions but the example spans {n}",
            bias.c_ans.len()
        )));
    }
    let f = &bundle.factual;
    let s = &bundle.cf_focal;
    let c = &bundle.cf_context;

    let para = f
        .para
        .iter()
        .zip(&s.para)
        .zip(&c.para)
        .map(|((a, b), d)| {
            [
                a[0] + b[0] + d[0] - bias.supp(0),
                a[1] + b[1] + d[1] - bias.supp(1),
            ]
        })
        .collect();
    let sent = f
        .sent
        .iter()
        .zip(&s.sent)
        .zip(&c.sent)
        .map(|((fa, fb), fc)| {
            fa.iter()
                .zip(fb)
                .zip(fc)
                .map(|((a, b), d)| {
                    [
                        a[0] + b[0] + d[0] - bias.supp(0),
                        a[1] + b[1] + d[1] - bias.supp(1),
                    ]
                })
                .collect()
        })
        .collect();
    let start = f
        .start
        .iter()
        .zip(&s.start)
        .zip(&c.start)
        .enumerate()
        .map(|(p, ((a, b), d))| a + b + d - bias.ans_at(p))
        .collect();
    let end = f
        .end
        .iter()
        .zip(&s.end)
        .zip(&c.end)
        .enumerate()
        .map(|(p, ((a, b), d))| a + b + d - bias.ans_at(p))
        .collect();
    let mut type_logits = [0.0; 4];
    for k in 0..4 {
        type_logits[k] =
            f.type_logits[k] + s.type_logits[k] + c.type_logits[k] - bias.type_c(k);
    }

    Ok(HeadOutputs {
        para,
        sent,
        start,
        end,
        type_logits,
    })
}

/// TIE inference: `factual - C`. No counterfactual passes are run; the
/// signature admits only the factual output.
pub fn infer(factual: &HeadOutputs, bias: &CounterfactualBias) -> HeadOutputs {
    let para = factual
        .para
        .iter()
        .map(|a| [a[0] - bias.supp(0), a[1] - bias.supp(1)])
        .collect();
    let sent = factual
        .sent
        .iter()
        .map(|sents| {
            sents
                .iter()
                .map(|a| [a[0] - bias.supp(0), a[1] - bias.supp(1)])
                .collect()
        })
        .collect();
    let start = factual
        .start
        .iter()
        .enumerate()
        .map(|(p, a)| a - bias.ans_at(p))
        .collect();
    let end = factual
        .end
        .iter()
        .enumerate()
        .map(|(p, a)| a - bias.ans_at(p))
        .collect();
    let mut type_logits = [0.0; 4];
    for k in 0..4 {
        type_logits[k] = factual.type_logits[k] - bias.type_c(k);
    }
    HeadOutputs {
        para,
        sent,
        start,
        end,
        type_logits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::{normal_f64, substream, uniform_below, Stream};
    use rand_core::RngCore;

    fn random_outputs(rng: &mut impl RngCore, paras: usize, sents: usize, n: usize) -> HeadOutputs {
        HeadOutputs {
            para: (0..paras)
                .map(|_| [normal_f64(rng), normal_f64(rng)])
                .collect(),
            sent: (0..paras)
                .map(|_| {
                    (0..sents)
                        .map(|_| [normal_f64(rng), normal_f64(rng)])
                        .collect()
                })
                .collect(),
            start: (0..n).map(|_| normal_f64(rng)).collect(),
            end: (0..n).map(|_| normal_f64(rng)).collect(),
            type_logits: [
                normal_f64(rng),
                normal_f64(rng),
                normal_f64(rng),
                normal_f64(rng),
            ],
        }
    }

    fn random_bias(rng: &mut impl RngCore, mode: BiasMode, max_n: usize) -> CounterfactualBias {
        let mut b = CounterfactualBias::zeros(mode, max_n);
        for v in b.c_ans.iter_mut().chain(&mut b.c_supp).chain(&mut b.c_type) {
            *v = normal_f64(rng);
        }
        b
    }

    #[test]
    fn fuse_elementwise_arithmetic() {
        // factual (1,2) + cf_focal (0.5,0) + cf_context (0,0.5) - C (1,1).
        let mk = |pair: [f64; 2]| HeadOutputs {
            para: vec![pair],
            sent: vec![vec![]],
            start: vec![],
            end: vec![],
            type_logits: [0.0; 4],
        };
        let bundle = LogitsBundle {
            factual: mk([1.0, 2.0]),
            cf_focal: mk([0.5, 0.0]),
            cf_context: mk([0.0, 0.5]),
        };
        let mut bias = CounterfactualBias::zeros(BiasMode::Random, 4);
        bias.c_supp = vec![1.0, 1.0];
        let fused = fuse(&bundle, &bias).unwrap();
        assert_eq!(fused.para[0], [0.5, 1.5]);
    }

    #[test]
    fn fuse_zero_branches_zero_bias_gives_zero() {
        let mut rng = substream(1, Stream::Test, 0);
        let proto = random_outputs(&mut rng, 3, 2, 10);
        let zero = proto.zeros_like();
        let bundle = LogitsBundle {
            factual: zero.clone(),
            cf_focal: zero.clone(),
            cf_context: zero.clone(),
        };
        let bias = CounterfactualBias::zeros(BiasMode::Random, 16);
        let fused = fuse(&bundle, &bias).unwrap();
        assert_eq!(fused, zero);
    }

    #[test]
    fn fuse_shape_mismatch_is_an_error() {
        let mut rng = substream(2, Stream::Test, 0);
        let a = random_outputs(&mut rng, 3, 2, 10);
        let b = random_outputs(&mut rng, 4, 2, 10);
        let bundle = LogitsBundle {
            factual: a.clone(),
            cf_focal: b,
            cf_context: a,
        };
        let bias = CounterfactualBias::zeros(BiasMode::Random, 16);
        assert!(fuse(&bundle, &bias).is_err());
    }

    // Independent elementwise oracle over random shapes, exact equality.
    #[test]
    fn fuse_matches_elementwise_oracle() {
        let mut rng = substream(3, Stream::Test, 0);
        for trial in 0..200 {
            let paras = 1 + uniform_below(&mut rng, 5);
            let sents = 1 + uniform_below(&mut rng, 4);
            let n = 4 + uniform_below(&mut rng, 24);
            let bundle = LogitsBundle {
                factual: random_outputs(&mut rng, paras, sents, n),
                cf_focal: random_outputs(&mut rng, paras, sents, n),
                cf_context: random_outputs(&mut rng, paras, sents, n),
            };
            let mode = if trial % 2 == 0 {
                BiasMode::Random
            } else {
                BiasMode::Uniform
            };
            let bias = random_bias(&mut rng, mode, 32);
            let fused = fuse(&bundle, &bias).unwrap();
            // Oracle written against scalar indexing, independent of the
            // implementation's iterator plumbing.
            let supp = |k: usize| match mode {
                BiasMode::Random => bias.c_supp[k],
                BiasMode::Uniform => bias.c_supp[0],
            };
            for i in 0..paras {
                for k in 0..2 {
                    let expect = bundle.factual.para[i][k]
                        + bundle.cf_focal.para[i][k]
                        + bundle.cf_context.para[i][k]
                        - supp(k);
                    assert_eq!(fused.para[i][k], expect);
                }
                for j in 0..sents {
                    for k in 0..2 {
                        let expect = bundle.factual.sent[i][j][k]
                            + bundle.cf_focal.sent[i][j][k]
                            + bundle.cf_context.sent[i][j][k]
                            - supp(k);
                        assert_eq!(fused.sent[i][j][k], expect);
                    }
                }
            }
            for p in 0..n {
                let ca = match mode {
                    BiasMode::Random => bias.c_ans[p],
                    BiasMode::Uniform => bias.c_ans[0],
                };
                assert_eq!(
                    fused.start[p],
                    bundle.factual.start[p] + bundle.cf_focal.start[p]
                        + bundle.cf_context.start[p]
                        - ca
                );
                assert_eq!(
                    fused.end[p],
                    bundle.factual.end[p] + bundle.cf_focal.end[p] + bundle.cf_context.end[p]
                        - ca
                );
            }
            for k in 0..4 {
                let ct = match mode {
                    BiasMode::Random => bias.c_type[k],
                    BiasMode::Uniform => bias.c_type[0],
                };
                assert_eq!(
                    fused.type_logits[k],
                    bundle.factual.type_logits[k]
                        + bundle.cf_focal.type_logits[k]
                        + bundle.cf_context.type_logits[k]
                        - ct
                );
            }
        }
    }

    #[test]
    fn infer_uniform_scalar_shift_keeps_argmax() {
        let factual = HeadOutputs {
            para: vec![],
            sent: vec![],
            start: vec![],
            end: vec![],
            type_logits: [2.0, 5.0, 1.0, 0.0],
        };
        let mut bias = CounterfactualBias::zeros(BiasMode::Uniform, 8);
        bias.c_type = vec![3.0];
        let out = infer(&factual, &bias);
        assert_eq!(out.type_logits[0], -1.0);
        assert_eq!(out.type_logits[1], 2.0);
        assert_eq!(out.type_logits[2], -2.0);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&out.type_logits), argmax(&factual.type_logits));
    }

    #[test]
    fn infer_with_zero_bias_is_identity() {
        let mut rng = substream(4, Stream::Test, 0);
        let factual = random_outputs(&mut rng, 4, 3, 12);
        let bias = CounterfactualBias::zeros(BiasMode::Random, 16);
        assert_eq!(infer(&factual, &bias), factual);
    }

    // Hand-verified arithmetic oracle: a random-mode supp bias flips a
    // marginal decision exactly as computed by hand.
    #[test]
    fn infer_random_supp_bias_flips_marginal_decision() {
        let mk = |pair: [f64; 2]| HeadOutputs {
            para: vec![pair],
            sent: vec![],
            start: vec![],
            end: vec![],
            type_logits: [0.0; 4],
        };
        let mut bias = CounterfactualBias::zeros(BiasMode::Random, 8);
        bias.c_supp = vec![0.7, -0.2];

        let out = infer(&mk([0.1, 0.5]), &bias);
        assert!((out.para[0][0] - (-0.6)).abs() < 1e-15);
        assert!((out.para[0][1] - 0.7).abs() < 1e-15);
        assert!(out.para[0][1] > out.para[0][0], "keeps class 1");

        let out = infer(&mk([0.6, 0.5]), &bias);
        assert!((out.para[0][0] - (-0.1)).abs() < 1e-15);
        assert!((out.para[0][1] - 0.7).abs() < 1e-15);
        assert!(out.para[0][1] > out.para[0][0], "flips to class 1");
    }

    fn lattice(outs: &mut HeadOutputs) {
        // Snap to multiples of 1/1024 so every sum in the identity is exact
        // in f64 and bitwise comparison is meaningful.
        let snap = |v: &mut f64| *v = (*v * 1024.0).round() / 1024.0;
        for p in outs.para.iter_mut().flatten() {
            snap(p);
        }
        for s in outs.sent.iter_mut().flatten() {
            for v in s.iter_mut() {
                snap(v);
            }
        }
        for v in outs.start.iter_mut().chain(outs.end.iter_mut()) {
            snap(v);
        }
        for v in outs.type_logits.iter_mut() {
            snap(v);
        }
    }

    // TIE identity: fuse(bundle) - cf_focal - cf_context == factual - C,
    // exactly (on exactly-representable inputs).
    #[test]
    fn tie_identity_holds_exactly() {
        let mut rng = substream(5, Stream::Test, 0);
        for trial in 0..100 {
            let paras = 1 + uniform_below(&mut rng, 4);
            let sents = 1 + uniform_below(&mut rng, 3);
            let n = 4 + uniform_below(&mut rng, 12);
            let mut factual = random_outputs(&mut rng, paras, sents, n);
            let mut cf_focal = random_outputs(&mut rng, paras, sents, n);
            let mut cf_context = random_outputs(&mut rng, paras, sents, n);
            lattice(&mut factual);
            lattice(&mut cf_focal);
            lattice(&mut cf_context);
            let bundle = LogitsBundle {
                factual,
                cf_focal,
                cf_context,
            };
            let mode = if trial % 2 == 0 {
                BiasMode::Random
            } else {
                BiasMode::Uniform
            };
            let mut bias = random_bias(&mut rng, mode, 16);
            for v in bias
                .c_ans
                .iter_mut()
                .chain(&mut bias.c_supp)
                .chain(&mut bias.c_type)
            {
                *v = (*v * 1024.0).round() / 1024.0;
            }
            let fused = fuse(&bundle, &bias).unwrap();
            let inferred = infer(&bundle.factual, &bias);
            for i in 0..paras {
                for k in 0..2 {
                    let lhs =
                        fused.para[i][k] - bundle.cf_focal.para[i][k] - bundle.cf_context.para[i][k];
                    assert_eq!(lhs, inferred.para[i][k]);
                }
            }
            for p in 0..n {
                let lhs =
                    fused.start[p] - bundle.cf_focal.start[p] - bundle.cf_context.start[p];
                assert_eq!(lhs, inferred.start[p]);
            }
            for k in 0..4 {
                let lhs = fused.type_logits[k]
                    - bundle.cf_focal.type_logits[k]
                    - bundle.cf_context.type_logits[k];
                assert_eq!(lhs, inferred.type_logits[k]);
            }
        }
    }
}
