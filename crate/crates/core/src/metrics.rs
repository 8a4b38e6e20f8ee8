//! Detection and calibration metrics: AUC-ROC, TNR at a target TPR, ECE,
//! accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Scores with binary labels; `true` marks the positive class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBinarySet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredBinarySet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape {
                op: "scored set",
                lhs: vec![scores.len()],
                rhs: vec![labels.len()],
            });
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::contract("NaN score"));
        }
        Ok(Self { scores, labels })
    }

    /// Positives followed by negatives.
    pub fn from_groups(positives: &[f64], negatives: &[f64]) -> Result<Self> {
        let scores = positives.iter().chain(negatives).copied().collect();
        let labels = std::iter::repeat_n(true, positives.len())
            .chain(std::iter::repeat_n(false, negatives.len()))
            .collect();
        Self::new(scores, labels)
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let pos = self.labels.iter().filter(|&&l| l).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::contract(format!(
                "need both classes, got {pos} positives and {neg} negatives"
            )));
        }
        Ok((pos, neg))
    }

    pub fn auc(&self) -> Result<f64> {
        auc_roc(self)
    }

    pub fn tnr_at_tpr(&self, target: f64) -> Result<f64> {
        tnr_at_tpr(self, target)
    }
}

/// Mann–Whitney AUC: `P(pos > neg) + ½·P(pos = neg)`, via mid-ranks.
pub fn auc_roc(s: &ScoredBinarySet) -> Result<f64> {
    let (pos, neg) = s.counts()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Twice the rank sum of the positives, so mid-ranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1, mid-rank (i + j + 2)/2.
        let mid2 = (i + j + 2) as u128;
        let p = order[i..=j].iter().filter(|&&k| s.labels[k]).count() as u128;
        rank_sum2 += mid2 * p;
        i = j + 1;
    }
    let (pos_u, neg_u) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - pos_u * (pos_u + 1);
    Ok(u2 as f64 / (2 * pos_u * neg_u) as f64)
}

/// TNR at the largest threshold whose TPR (positives scoring `≥ t`) reaches
/// `target`; negatives count as rejected when they score strictly below it.
pub fn tnr_at_tpr(s: &ScoredBinarySet, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::contract(format!("target TPR {target} outside (0, 1]")));
    }
    let (pos, neg) = s.counts()?;
    let mut p: Vec<f64> = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(_, &l)| l)
        .map(|(&v, _)| v)
        .collect();
    p.sort_by(|a, b| b.total_cmp(a));
    let needed = (1..=pos)
        .find(|&m| m as f64 / pos as f64 >= target)
        .unwrap_or(pos);
    let t = p[needed - 1];
    let rejected = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(&v, &l)| !l && v < t)
        .count();
    Ok(rejected as f64 / neg as f64)
}

/// Predicted class (first maximum) and its probability for each row.
pub fn argmax_rows(probs: &Array) -> Vec<(usize, f64)> {
    probs
        .iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
        })
        .collect()
}

pub fn accuracy(probs: &Array, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|((k, _), &y)| *k == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Expected calibration error over `bins` equal-width confidence bins.
/// Confidence `c` falls in bin `⌈c·B⌉ − 1` (so bin b covers `(b/B, (b+1)/B]`).
pub fn ece(probs: &Array, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::contract("ece needs at least one bin"));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape {
            op: "ece",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for ((k, c), &y) in argmax_rows(probs).into_iter().zip(labels) {
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        if k == y {
            hits[b] += 1.0;
        }
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n as f64)
        .sum())
}

/// Which end of a score indicates out-of-distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Uncertainty scores such as predictive entropy.
    HighIsOod,
    /// Density scores: high means in-distribution.
    HighIsInDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub auc: f64,
    pub tnr_at_tpr95: f64,
}

/// AUC-ROC and TNR@TPR95 for detecting OOD samples (the positive class).
pub fn ood_eval(id_scores: &[f64], ood_scores: &[f64], direction: Direction) -> Result<DetectionScores> {
    let orient = |v: &[f64]| -> Vec<f64> {
        match direction {
            Direction::HighIsOod => v.to_vec(),
            Direction::HighIsInDistribution => v.iter().map(|x| -x).collect(),
        }
    };
    let set = ScoredBinarySet::from_groups(&orient(ood_scores), &orient(id_scores))?;
    Ok(DetectionScores {
        auc: auc_roc(&set)?,
        tnr_at_tpr95: tnr_at_tpr(&set, 0.95)?,
    })
}
