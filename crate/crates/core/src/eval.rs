//! Point-wise precision, recall and F1 with the anomaly label as the positive class.
//!
//! No point-adjust credit assignment: a step counts as detected only when it
//! is itself flagged.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ANOMALY;
use crate::error::{Error, Result};

/// `(precision, recall, f1)` from confusion counts, with 0 for empty denominators.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1_score(p, r))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let (precision, recall, f1) = prf(tp, fp, fn_);
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            threshold: None,
            curve: Vec::new(),
            per_class: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("threshold,precision,recall,f1\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.threshold, p.precision, p.recall, p.f1
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>10}",
            "", "P(%)", "R(%)", "F1(%)"
        )?;
        writeln!(
            f,
            "{:<10} {:>10.2} {:>10.2} {:>10.2}",
            "anomaly",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<10} {:>10.2} {:>10.2} {:>10.2}",
                format!("class {}", c.class_id),
                100.0 * c.precision,
                100.0 * c.recall,
                100.0 * c.f1
            )?;
        }
        write!(
            f,
            "tp={} fp={} fn={} tn={}",
            self.tp, self.fp, self.fn_, self.tn
        )?;
        if let Some(t) = self.threshold {
            write!(f, " threshold={t:.6}")?;
        }
        Ok(())
    }
}

/// Binary metrics over steps (anomaly positive) plus a one-vs-rest
/// breakdown when more than one normal class appears.
pub fn evaluate(pred: &[u32], truth: &[u32]) -> Result<EvalReport> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == ANOMALY, t == ANOMALY) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut report = EvalReport::from_counts(tp, fp, fn_, tn);

    let classes: BTreeSet<u32> = pred.iter().chain(truth).copied().collect();
    if classes.iter().filter(|&&c| c != ANOMALY).count() > 1 {
        report.per_class = classes
            .into_iter()
            .map(|c| {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for (&p, &t) in pred.iter().zip(truth) {
                    match (p == c, t == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                let (precision, recall, f1) = prf(tp, fp, fn_);
                ClassMetrics {
                    class_id: c,
                    support: tp + fn_,
                    precision,
                    recall,
                    f1,
                }
            })
            .collect();
    }
    Ok(report)
}

/// Which side of a threshold counts as anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `score > threshold`
    Above,
    /// `score < threshold`
    Below,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<CurvePoint>,
    pub best: CurvePoint,
}

/// Candidate thresholds: every distinct score when there are at most
/// `n_points` of them, otherwise `n_points` nearest-rank quantiles.
fn candidate_thresholds(scores: &[f64], n_points: usize) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() <= n_points {
        return sorted;
    }
    let last = sorted.len() - 1;
    let mut out: Vec<f64> = (0..n_points)
        .map(|i| sorted[(i as f64 * last as f64 / (n_points - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

pub fn threshold_sweep(scores: &[f64], truth: &[u32], n_points: usize) -> Result<Sweep> {
    threshold_sweep_directed(scores, truth, n_points, Direction::Above)
}

/// Precision/recall/F1 at each candidate threshold and the best-F1 point
/// (ties go to the lower threshold).
pub fn threshold_sweep_directed(
    scores: &[f64],
    truth: &[u32],
    n_points: usize,
    direction: Direction,
) -> Result<Sweep> {
    if n_points < 2 {
        return Err(Error::config("a threshold sweep needs at least 2 points"));
    }
    if scores.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::contract("no scores to sweep"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }

    // Sort once; every threshold's counts come from a binary search.
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(truth)
        .map(|(&s, &t)| (s, t == ANOMALY))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos = pairs.iter().filter(|p| p.1).count();
    let mut pos_prefix = Vec::with_capacity(pairs.len() + 1);
    pos_prefix.push(0usize);
    for p in &pairs {
        pos_prefix.push(pos_prefix.last().unwrap() + usize::from(p.1));
    }

    let points: Vec<CurvePoint> = candidate_thresholds(scores, n_points)
        .into_iter()
        .map(|threshold| {
            let (flagged_pos, flagged) = match direction {
                Direction::Above => {
                    let cut = pairs.partition_point(|p| p.0 <= threshold);
                    (total_pos - pos_prefix[cut], pairs.len() - cut)
                }
                Direction::Below => {
                    let cut = pairs.partition_point(|p| p.0 < threshold);
                    (pos_prefix[cut], cut)
                }
            };
            let (precision, recall, f1) =
                prf(flagged_pos, flagged - flagged_pos, total_pos - flagged_pos);
            CurvePoint {
                threshold,
                precision,
                recall,
                f1,
            }
        })
        .collect();

    let mut best = points[0];
    for p in &points[1..] {
        if p.f1 > best.f1 || (p.f1 == best.f1 && p.threshold < best.threshold) {
            best = *p;
        }
    }
    Ok(Sweep { points, best })
}
