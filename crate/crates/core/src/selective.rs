//! Selective classification: abstain when the explainer's discriminator
//! scores a sample below an in-distribution density threshold.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{predictive_entropy, Classifier};
use crate::data::{fmt_f64, LabeledSet};
use crate::error::{Error, Result};
use crate::pce::Pce;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Predicted { probs: Vec<f64>, entropy: f64, density: f64 },
    Abstained { density: f64 },
}

impl Decision {
    pub fn density(&self) -> f64 {
        match self {
            Decision::Predicted { density, .. } | Decision::Abstained { density } => *density,
        }
    }

    pub fn is_abstained(&self) -> bool {
        matches!(self, Decision::Abstained { .. })
    }

    pub fn predicted_class(&self) -> Option<usize> {
        match self {
            Decision::Predicted { probs, .. } => {
                // First maximum, as everywhere else.
                let mut best = 0;
                for (k, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = k;
                    }
                }
                Some(best)
            }
            Decision::Abstained { .. } => None,
        }
    }
}

/// A (typically fine-tuned) classifier gated by the explainer's density.
/// `anchor` is the classifier the explainer was trained against; its
/// penultimate features feed the fused discriminator.
#[derive(Clone, Debug)]
pub struct SelectiveClassifier<'a> {
    pub classifier: &'a Classifier,
    pub anchor: &'a Classifier,
    pub pce: &'a Pce,
    pub threshold: f64,
}

impl<'a> SelectiveClassifier<'a> {
    pub fn new(classifier: &'a Classifier, anchor: &'a Classifier, pce: &'a Pce, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::contract(format!("density threshold {threshold} outside [0, 1]")));
        }
        if classifier.dim() != anchor.dim() || classifier.classes() != anchor.classes() {
            return Err(Error::contract("classifier and explainer anchor disagree on shapes"));
        }
        Ok(Self {
            classifier,
            anchor,
            pce,
            threshold,
        })
    }

    /// Predict when the density is at least the threshold, abstain otherwise.
    pub fn decide(&self, x: &Array) -> Result<Vec<Decision>> {
        let density = self.pce.density(self.anchor, x)?;
        let probs = self.classifier.predict_proba(x)?;
        let entropy = predictive_entropy(&probs)?;
        Ok(density
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                if d >= self.threshold {
                    Decision::Predicted {
                        probs: probs.row(i).to_vec(),
                        entropy: entropy[i],
                        density: d,
                    }
                } else {
                    Decision::Abstained { density: d }
                }
            })
            .collect())
    }
}

/// Per-set coverage statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub set: String,
    pub n: usize,
    pub abstention_rate: f64,
    /// Accuracy on the non-abstained rows; `None` when every row abstained.
    pub covered_accuracy: Option<f64>,
    pub covered_mean_entropy: Option<f64>,
    pub mean_density: f64,
}

pub fn coverage_row(name: &str, decisions: &[Decision], labels: &[usize]) -> Result<CoverageRow> {
    if decisions.len() != labels.len() {
        return Err(Error::Shape {
            op: "coverage",
            lhs: vec![decisions.len()],
            rhs: vec![labels.len()],
        });
    }
    let n = decisions.len();
    let mut covered = 0usize;
    let mut hits = 0usize;
    let mut entropy = 0.0;
    for (d, &y) in decisions.iter().zip(labels) {
        if let Decision::Predicted { entropy: e, .. } = d {
            covered += 1;
            entropy += e;
            if d.predicted_class() == Some(y) {
                hits += 1;
            }
        }
    }
    let mean = |v: f64| (covered > 0).then(|| v / covered as f64);
    Ok(CoverageRow {
        set: name.to_string(),
        n,
        abstention_rate: if n == 0 { 0.0 } else { (n - covered) as f64 / n as f64 },
        covered_accuracy: mean(hits as f64),
        covered_mean_entropy: mean(entropy),
        mean_density: decisions.iter().map(Decision::density).sum::<f64>() / n.max(1) as f64,
    })
}

/// Decide every named set and summarise it.
pub fn coverage_report(model: &SelectiveClassifier, sets: &[(&str, &LabeledSet)]) -> Result<Vec<CoverageRow>> {
    sets.iter()
        .map(|(name, set)| coverage_row(name, &model.decide(&set.features)?, &set.labels))
        .collect()
}

/// CSV `sample_id, set, density, decision, predicted_class, entropy`;
/// abstentions leave the last two columns empty.
pub fn write_decisions_csv<W: Write>(rows: &[(&str, &[Decision])], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sample_id", "set", "density", "decision", "predicted_class", "entropy"])?;
    for (set, decisions) in rows {
        for (i, d) in decisions.iter().enumerate() {
            let (kind, class, entropy) = match d {
                Decision::Predicted { entropy, .. } => (
                    "predicted",
                    d.predicted_class().map_or(String::new(), |k| k.to_string()),
                    fmt_f64(*entropy),
                ),
                Decision::Abstained { .. } => ("abstained", String::new(), String::new()),
            };
            wr.write_record([i.to_string(), set.to_string(), fmt_f64(d.density()), kind.into(), class, entropy])?;
        }
    }
    wr.flush()?;
    Ok(())
}
