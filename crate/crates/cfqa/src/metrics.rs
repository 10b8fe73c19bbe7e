//! EM/F1 scoring for answers and supporting facts, joint metrics, dire
//! aggregation over probe pairs, and the original-vs-dire report.
//!
//! Answer normalization follows the common reading-comprehension convention:
//! lowercase, strip punctuation and articles, squeeze whitespace. Dire
//! scores take the per-pair minimum, which for EM realizes "correct on both
//! halves"; the real multi-hop score is `original - dire`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::io::ArtifactMeta;
use crate::corpus::{Example, Vocabulary};
use crate::probe::ProbePair;
use crate::{Error, Result};

pub const REPORT_FORMAT: &str = "cfqa-report-v1";

/// One system output for an example or probe instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub supp_paragraphs: BTreeSet<String>,
    pub supp_sentences: BTreeSet<(String, usize)>,
    #[serde(rename = "type")]
    pub answer_type: String,
}

/// Precision/recall-bearing score for one instance and metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Score {
    fn perfect() -> Self {
        Self {
            em: 1.0,
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
        }
    }

    fn zero() -> Self {
        Self {
            em: 0.0,
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
        }
    }
}

/// Lowercase, strip punctuation, drop articles, squeeze whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

fn is_yes_no(s: &str) -> bool {
    let t = s.trim();
    t.eq_ignore_ascii_case("yes") || t.eq_ignore_ascii_case("no")
}

/// Answer EM and bag-of-tokens F1. Yes/no gold answers are compared
/// literally (case-insensitive), per the usual convention.
pub fn answer_scores(pred: &str, gold: &str) -> Score {
    if is_yes_no(gold) {
        let hit = pred.trim().eq_ignore_ascii_case(gold.trim());
        return if hit { Score::perfect() } else { Score::zero() };
    }
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        let both_empty = p.is_empty() && g.is_empty();
        return if both_empty { Score::perfect() } else { Score::zero() };
    }
    let em = (p == g) as u8 as f64;
    let mut gold_bag: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *gold_bag.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(n) = gold_bag.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return Score {
            em,
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
        };
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    let f1 = 2.0 * precision * recall / (precision + recall);
    Score {
        em,
        f1,
        precision,
        recall,
    }
}

/// Set EM and F1 for supporting paragraphs or sentences.
pub fn supp_scores<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Score {
    if pred.is_empty() && gold.is_empty() {
        return Score::perfect();
    }
    let em = (pred == gold) as u8 as f64;
    let overlap = pred.intersection(gold).count();
    if overlap == 0 {
        return Score {
            em,
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
        };
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    let f1 = 2.0 * precision * recall / (precision + recall);
    Score {
        em,
        f1,
        precision,
        recall,
    }
}

/// Joint metric composition: EMs multiply; joint F1 comes from the products
/// of precisions and recalls.
pub fn joint_scores(ans: Score, supp: Score) -> (f64, f64) {
    let em = ans.em * supp.em;
    let precision = ans.precision * supp.precision;
    let recall = ans.recall * supp.recall;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (em, f1)
}

/// Per-pair dire score: the minimum of the two instance scores.
pub fn dire_aggregate(score_a: f64, score_b: f64) -> f64 {
    score_a.min(score_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub original: f64,
    pub dire: f64,
    /// `original - dire`.
    pub real_multihop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub em: MetricRow,
    pub f1: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
    pub examples: usize,
    pub probe_pairs: usize,
    pub ans: MetricPair,
    pub supp_para: MetricPair,
    pub supp_sent: MetricPair,
    pub joint_para: MetricPair,
    pub joint_sent: MetricPair,
}

/// All per-instance metric values, in a fixed order: ans_em, ans_f1,
/// supp_p_em, supp_p_f1, supp_s_em, supp_s_f1, joint_p_em, joint_p_f1,
/// joint_s_em, joint_s_f1.
fn instance_metrics(ex: &Example, pred: &Prediction, vocab: &Vocabulary) -> [f64; 10] {
    // An instance without answer labels grants vacuous full answer credit so
    // the pair minimum is decided by the scorable half.
    let ans = if ex.answer_text.is_empty() {
        Score::perfect()
    } else {
        answer_scores(&pred.answer, &vocab.detokenize(&ex.answer_text))
    };
    let gold_sent: BTreeSet<(String, usize)> = ex.gold_sentence_ids.iter().cloned().collect();
    let sp = supp_scores(&pred.supp_paragraphs, &ex.gold_para_titles);
    let ss = supp_scores(&pred.supp_sentences, &gold_sent);
    let (jp_em, jp_f1) = joint_scores(ans, sp);
    let (js_em, js_f1) = joint_scores(ans, ss);
    [
        ans.em, ans.f1, sp.em, sp.f1, ss.em, ss.f1, jp_em, jp_f1, js_em, js_f1,
    ]
}

fn index_predictions(preds: &[Prediction]) -> Result<BTreeMap<&str, &Prediction>> {
    let mut map = BTreeMap::new();
    let mut dups = Vec::new();
    for p in preds {
        if map.insert(p.id.as_str(), p).is_some() {
            dups.push(p.id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(Error::Eval(format!(
            "duplicate prediction ids: {}",
            dups.join(", ")
        )));
    }
    Ok(map)
}

fn missing_error(missing: Vec<String>) -> Error {
    Error::Eval(format!("missing predictions for: {}", missing.join(", ")))
}

/// Score the original split and the probe, and assemble the report.
pub fn evaluate(
    dev: &[Example],
    dev_preds: &[Prediction],
    probe: &[ProbePair],
    probe_preds: &[Prediction],
    vocab: &Vocabulary,
) -> Result<MetricReport> {
    if dev.is_empty() {
        return Err(Error::Eval("empty evaluation dataset".into()));
    }
    let dev_index = index_predictions(dev_preds)?;
    let probe_index = index_predictions(probe_preds)?;

    let missing: Vec<String> = dev
        .iter()
        .filter(|ex| !dev_index.contains_key(ex.id.as_str()))
        .map(|ex| ex.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(missing_error(missing));
    }
    let missing: Vec<String> = probe
        .iter()
        .flat_map(|p| p.instances())
        .filter(|inst| !probe_index.contains_key(inst.id.as_str()))
        .map(|inst| inst.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(missing_error(missing));
    }

    let mut original = [0.0; 10];
    for ex in dev {
        let m = instance_metrics(ex, dev_index[ex.id.as_str()], vocab);
        for (acc, v) in original.iter_mut().zip(m) {
            *acc += v;
        }
    }
    for acc in original.iter_mut() {
        *acc /= dev.len() as f64;
    }

    let mut dire = [0.0; 10];
    for pair in probe {
        let a = instance_metrics(&pair.instance_a, probe_index[pair.instance_a.id.as_str()], vocab);
        let b = instance_metrics(&pair.instance_b, probe_index[pair.instance_b.id.as_str()], vocab);
        for (acc, (x, y)) in dire.iter_mut().zip(a.into_iter().zip(b)) {
            *acc += dire_aggregate(x, y);
        }
    }
    if !probe.is_empty() {
        for acc in dire.iter_mut() {
            *acc /= probe.len() as f64;
        }
    }

    let row = |i: usize| MetricRow {
        original: original[i],
        dire: dire[i],
        real_multihop: original[i] - dire[i],
    };
    let pair = |em: usize, f1: usize| MetricPair {
        em: row(em),
        f1: row(f1),
    };
    Ok(MetricReport {
        format: REPORT_FORMAT.to_string(),
        meta: None,
        examples: dev.len(),
        probe_pairs: probe.len(),
        ans: pair(0, 1),
        supp_para: pair(2, 3),
        supp_sent: pair(4, 5),
        joint_para: pair(6, 7),
        joint_sent: pair(8, 9),
    })
}

/// Render the aligned plain-text table.
pub fn render_table(report: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>9} {:>9} {:>9}",
        "metric", "", "original", "dire", "real"
    );
    let mut push = |name: &str, pair: &MetricPair| {
        for (kind, row) in [("em", &pair.em), ("f1", &pair.f1)] {
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>9.4} {:>9.4} {:>9.4}",
                name, kind, row.original, row.dire, row.real_multihop
            );
        }
    };
    push("ans", &report.ans);
    push("supp_p", &report.supp_para);
    push("supp_s", &report.supp_sent);
    push("ans+supp_p", &report.joint_para);
    push("ans+supp_s", &report.joint_sent);
    out
}

/// Write the report as JSON plus an aligned text table.
pub fn emit_report(report: &MetricReport, json_path: &Path, table_path: &Path) -> Result<()> {
    std::fs::write(json_path, serde_json::to_vec_pretty(report)?)?;
    std::fs::write(table_path, render_table(report))?;
    Ok(())
}

/// Read a predictions file: a JSON object `{id -> record}`. A reserved
/// `_meta` key (provenance) is skipped.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Eval(format!("cannot open {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse(format!("{}: expected a JSON object", path.display())))?;
    let mut out = Vec::with_capacity(obj.len());
    for (id, rec) in obj {
        if id == "_meta" {
            continue;
        }
        #[derive(Deserialize)]
        struct Rec {
            answer: String,
            supp_paragraphs: BTreeSet<String>,
            supp_sentences: BTreeSet<(String, usize)>,
            #[serde(rename = "type")]
            answer_type: String,
        }
        let r: Rec = serde_json::from_value(rec.clone())
            .map_err(|e| Error::Parse(format!("{} entry {id}: {e}", path.display())))?;
        out.push(Prediction {
            id: id.clone(),
            answer: r.answer,
            supp_paragraphs: r.supp_paragraphs,
            supp_sentences: r.supp_sentences,
            answer_type: r.answer_type,
        });
    }
    Ok(out)
}

/// Write predictions as `{id -> record}` with `_meta` provenance.
pub fn write_predictions(
    path: &Path,
    preds: &[Prediction],
    meta: &ArtifactMeta,
) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("_meta".into(), serde_json::to_value(meta)?);
    for p in preds {
        if obj.contains_key(&p.id) {
            return Err(Error::Eval(format!("duplicate prediction id {}", p.id)));
        }
        obj.insert(
            p.id.clone(),
            serde_json::json!({
                "answer": p.answer,
                "supp_paragraphs": p.supp_paragraphs,
                "supp_sentences": p.supp_sentences,
                "type": p.answer_type,
            }),
        );
    }
    std::fs::write(path, serde_json::to_vec_pretty(&serde_json::Value::Object(obj))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_identity_and_empty_cases() {
        let s = answer_scores("2008", "2008");
        assert_eq!((s.em, s.f1), (1.0, 1.0));
        let s = answer_scores("", "2008");
        assert_eq!((s.em, s.f1), (0.0, 0.0));
    }

    // Bag-overlap oracle: "2005 to 2008" vs "from 2005 to 2008".
    #[test]
    fn answer_partial_overlap() {
        let s = answer_scores("2005 to 2008", "from 2005 to 2008");
        assert_eq!(s.em, 0.0);
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.f1 - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn answer_normalization_strips_articles_and_punctuation() {
        let s = answer_scores("The Senate!", "senate");
        assert_eq!((s.em, s.f1), (1.0, 1.0));
    }

    #[test]
    fn yes_no_compared_literally() {
        assert_eq!(answer_scores("yes", "yes").em, 1.0);
        assert_eq!(answer_scores("no", "yes").em, 0.0);
        // Bag overlap does not apply to yes/no golds.
        assert_eq!(answer_scores("yes it is", "yes").f1, 0.0);
    }

    #[test]
    fn supp_exact_and_partial() {
        let gold: BTreeSet<String> = ["p1", "p2"].iter().map(|s| s.to_string()).collect();
        let s = supp_scores(&gold, &gold);
        assert_eq!((s.em, s.f1), (1.0, 1.0));

        let pred: BTreeSet<String> = ["p1"].iter().map(|s| s.to_string()).collect();
        let s = supp_scores(&pred, &gold);
        assert_eq!(s.em, 0.0);
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);

        let s = supp_scores(&BTreeSet::new(), &gold);
        assert_eq!((s.em, s.f1), (0.0, 0.0));
    }

    #[test]
    fn joint_composition() {
        let perfect = Score::perfect();
        assert_eq!(joint_scores(perfect, perfect), (1.0, 1.0));

        let ans = Score {
            em: 0.0,
            f1: 6.0 / 7.0,
            precision: 1.0,
            recall: 0.75,
        };
        let supp = Score {
            em: 0.0,
            f1: 2.0 / 3.0,
            precision: 1.0,
            recall: 0.5,
        };
        let (em, f1) = joint_scores(ans, supp);
        assert_eq!(em, 0.0);
        // p = 1, r = 0.375 -> f1 = 0.5454...
        assert!((f1 - 2.0 * 0.375 / 1.375).abs() < 1e-12);

        let (em, f1) = joint_scores(Score::zero(), supp);
        assert_eq!((em, f1), (0.0, 0.0));
    }

    #[test]
    fn dire_min_rule() {
        assert_eq!(dire_aggregate(1.0, 1.0), 1.0);
        assert_eq!(dire_aggregate(1.0, 0.0), 0.0);
        assert_eq!(dire_aggregate(0.8, 0.5), 0.5);
    }
}
