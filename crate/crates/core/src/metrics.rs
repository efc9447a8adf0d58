//! Binary-classification metrics with "real" (label 1) as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "F1 Score")]
    pub f1: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    /// Absent when only one class is present.
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl MetricsReport {
    /// Values in `[0, 1]`, F1 the harmonic mean of precision and recall
    /// (to four-decimal rounding when no confusion counts are attached), and
    /// exact agreement with the confusion counts when present.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let fields = [
            ("Accuracy", Some(self.accuracy)),
            ("F1 Score", Some(self.f1)),
            ("Precision", Some(self.precision)),
            ("Recall", Some(self.recall)),
            ("AUC", self.auc),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("{name} = {v} outside [0, 1]"));
                }
            }
        }
        match self.confusion {
            Some(c) => {
                let n = c.total();
                let expect = [
                    ("Accuracy", self.accuracy, ratio(c.tp + c.tn, n)),
                    ("Precision", self.precision, ratio(c.tp, c.tp + c.fp)),
                    ("Recall", self.recall, ratio(c.tp, c.tp + c.fn_)),
                    ("F1 Score", self.f1, f1_from(self.precision, self.recall)),
                ];
                for (name, got, want) in expect {
                    if (got - want).abs() > 1e-12 {
                        return bad(format!("{name} = {got} but the counts give {want}"));
                    }
                }
            }
            None => {
                let hm = f1_from(self.precision, self.recall);
                if (self.f1 - hm).abs() > 1e-3 {
                    return bad(format!("F1 Score {} is not the harmonic mean {hm}", self.f1));
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", probs.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} is not 0 or 1")));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {p}")));
    }
    Ok(())
}

/// Predict real iff `prob > threshold`. Undefined precision, recall and F1
/// are reported as 0.
pub fn binary_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    check_inputs(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::InvalidInput("no records to score".into()));
    }
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p > threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let has_both = labels.contains(&0) && labels.contains(&1);
    Ok(MetricsReport {
        accuracy: ratio(c.tp + c.tn, c.total()),
        f1: f1_from(precision, recall),
        precision,
        recall,
        auc: if has_both { Some(roc_auc(probs, labels)?) } else { None },
        confusion: Some(c),
        threshold,
    })
}

/// Rank-based (Mann-Whitney) AUC; tied scores share their average rank,
/// which gives half credit to tied positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum, kept integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 average to (i + j + 2) / 2
        let twice_avg = (i + j + 2) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += pos * twice_avg;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}
