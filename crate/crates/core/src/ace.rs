//! Counterfactual augmentation, mixed real/augmented datasets, soft-label
//! fine-tuning and decision-boundary traversals.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::classifier::{fit, Classifier, ClassifierConfig, Objective, TrainReport};
use crate::data::{fmt_f64, parse_f64, LabeledSet, SoftLabeledSet};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::Rng;
use crate::pce::{sample_condition, Condition, Pce};
use crate::tensor::Array;

/// One counterfactual `x̂ = G(x, c)` with `c` as its soft label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub x: Vec<f64>,
    pub condition: Condition,
    /// Row of the source set the sample was generated from.
    pub source_index: usize,
    /// The drawn `c[k]`.
    pub u: f64,
}

/// A random `fraction` of `train` (indices ascending) used as generation source.
pub fn source_subset(train: &LabeledSet, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("source fraction {fraction} outside (0, 1]")));
    }
    let take = (train.len() as f64 * fraction).round() as usize;
    let mut idx = rng.sample_indices(train.len(), take);
    idx.sort_unstable();
    Ok(idx)
}

/// `m` counterfactuals per source row and per counterfactual class. The
/// origin class is the classifier's prediction; with `K > 2` every other
/// class is targeted in turn.
pub fn generate_ace(pce: &Pce, f: &Classifier, source: &LabeledSet, m: usize, rng: &mut Rng) -> Result<Vec<AugmentedSample>> {
    if m == 0 {
        return Err(Error::contract("need at least one augmentation per sample"));
    }
    let k = f.classes();
    let preds = f.predict(&source.features)?;
    let mut rows = Vec::new();
    let mut conds = Vec::new();
    let mut meta = Vec::new();
    for (i, &origin) in preds.iter().enumerate() {
        for target in (0..k).filter(|&j| j != origin) {
            for _ in 0..m {
                let (c, u) = sample_condition(k, origin, target, rng, None)?;
                rows.push(i);
                conds.extend_from_slice(c.values());
                meta.push((c, u));
            }
        }
    }
    let x = source.features.select_rows(&rows);
    let c = Array::new(vec![rows.len(), k], conds)?;
    let x_hat = pce.generate(&x, &c)?;
    Ok(x_hat
        .iter_rows()
        .zip(meta)
        .zip(rows)
        .map(|((row, (condition, u)), source_index)| AugmentedSample {
            x: row.to_vec(),
            condition,
            source_index,
            u,
        })
        .collect())
}

/// CSV with columns `x0..x{d-1}, c0..c{K-1}, source_index, u`.
pub fn write_augmented_csv<W: Write>(samples: &[AugmentedSample], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let (d, k) = samples
        .first()
        .map_or((0, 0), |s| (s.x.len(), s.condition.classes()));
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend((0..k).map(|j| format!("c{j}")));
    header.push("source_index".into());
    header.push("u".into());
    wr.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.x.iter().map(|v| fmt_f64(*v)).collect();
        rec.extend(s.condition.values().iter().map(|v| fmt_f64(*v)));
        rec.push(s.source_index.to_string());
        rec.push(fmt_f64(s.u));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_augmented_csv<R: Read>(r: R) -> Result<Vec<AugmentedSample>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    let d = headers.iter().filter(|h| h.starts_with('x')).count();
    let k = headers.iter().filter(|h| h.starts_with('c')).count();
    if headers.len() != d + k + 2 {
        return Err(Error::contract("augmented CSV has unexpected columns"));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let x = (0..d).map(|j| parse_f64(&rec[j])).collect::<Result<Vec<_>>>()?;
        let c = (d..d + k).map(|j| parse_f64(&rec[j])).collect::<Result<Vec<_>>>()?;
        let source_index = rec[d + k]
            .parse()
            .map_err(|_| Error::contract(format!("bad source index `{}`", &rec[d + k])))?;
        out.push(AugmentedSample {
            x,
            condition: Condition::new(c)?,
            source_index,
            u: parse_f64(&rec[d + k + 1])?,
        });
    }
    Ok(out)
}

/// Real rows with one-hot targets mixed with augmented rows with soft targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedDataset {
    pub data: SoftLabeledSet,
    pub real_count: usize,
    pub augmented_count: usize,
    pub rho: f64,
}

/// Draw `round(ρ·total)` augmented and `total − round(ρ·total)` real rows
/// without replacement, then shuffle. `total` defaults to `|real|`.
pub fn build_mixed(
    real: &LabeledSet,
    aug: &[AugmentedSample],
    rho: f64,
    total: Option<usize>,
    classes: usize,
    rng: &mut Rng,
) -> Result<MixedDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::contract(format!("mix ratio {rho} outside [0, 1]")));
    }
    let total = total.unwrap_or(real.len());
    let n_aug = (rho * total as f64).round() as usize;
    let n_real = total - n_aug;
    if n_aug > aug.len() {
        return Err(Error::contract(format!(
            "mix needs {n_aug} augmented samples but only {} are available",
            aug.len()
        )));
    }
    if n_real > real.len() {
        return Err(Error::contract(format!(
            "mix needs {n_real} real samples but only {} are available",
            real.len()
        )));
    }
    let d = real.dim();
    let real_idx = rng.sample_indices(real.len(), n_real);
    let aug_idx = rng.sample_indices(aug.len(), n_aug);
    let one_hot = real.one_hot(classes)?;
    let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(total);
    for &i in &real_idx {
        rows.push((real.features.row(i).to_vec(), one_hot.row(i).to_vec()));
    }
    for &i in &aug_idx {
        let s = &aug[i];
        if s.x.len() != d || s.condition.classes() != classes {
            return Err(Error::contract("augmented sample does not match the real data shape"));
        }
        rows.push((s.x.clone(), s.condition.values().to_vec()));
    }
    rng.shuffle(&mut rows);
    let features = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let targets = rows.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    Ok(MixedDataset {
        data: SoftLabeledSet::new(
            Array::new(vec![total, d], features)?,
            Array::new(vec![total, classes], targets)?,
        )?,
        real_count: n_real,
        augmented_count: n_aug,
        rho,
    })
}

impl MixedDataset {
    /// CSV with columns `x0..x{d-1}, t0..t{K-1}, augmented`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let (d, k) = (self.data.features.cols(), self.data.targets.cols());
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.extend((0..k).map(|j| format!("t{j}")));
        wr.write_record(&header)?;
        for (x, t) in self.data.features.iter_rows().zip(self.data.targets.iter_rows()) {
            let rec: Vec<String> = x.iter().chain(t).map(|v| fmt_f64(*v)).collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AceConfig {
    /// Fraction of the training set used as generation source.
    pub source_fraction: f64,
    /// Augmentations per source sample.
    pub m: usize,
    /// Augmented share of the mixed dataset.
    pub rho: f64,
    /// Mixed dataset size; defaults to the training set size.
    pub total: Option<usize>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self {
            source_fraction: 0.5,
            m: 4,
            rho: 0.3,
            total: None,
            finetune_epochs: 8,
            finetune_lr: 1e-4,
        }
    }
}

/// Fine-tune a copy of `f` on `mixed` with the soft cross-entropy; the
/// checkpoint is selected on `eval` by the classifier rule.
pub fn finetune(
    f: &Classifier,
    mixed: &MixedDataset,
    eval: &LabeledSet,
    base: &ClassifierConfig,
    epochs: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<(Classifier, TrainReport)> {
    let config = ClassifierConfig {
        epochs,
        lr,
        ..base.clone()
    };
    fit(
        f.clone(),
        &mixed.data.features,
        &mixed.data.targets,
        eval,
        &config,
        Objective::SoftLabels,
        "finetune",
        rng,
    )
}

/// One point of a traversal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalStep {
    pub x_hat: Vec<f64>,
    pub condition: Condition,
    pub probs: Vec<f64>,
}

/// Sweep `c[k]` linearly from 1 to 0 in `steps` values and record
/// `(G(x, c), c, f(G(x, c)))`.
pub fn traversal(pce: &Pce, f: &Classifier, x: &[f64], k: usize, k_c: usize, steps: usize) -> Result<Vec<TraversalStep>> {
    if steps < 2 {
        return Err(Error::contract("a traversal needs at least two steps"));
    }
    let classes = f.classes();
    let mut conds = Vec::with_capacity(steps);
    for i in 0..steps {
        let u = 1.0 - i as f64 / (steps - 1) as f64;
        conds.push(Condition::binary(classes, k, k_c, u)?);
    }
    let xs = Array::new(vec![steps, x.len()], x.repeat(steps))?;
    let cs = Array::new(
        vec![steps, classes],
        conds.iter().flat_map(|c| c.values().iter().copied()).collect(),
    )?;
    let x_hat = pce.generate(&xs, &cs)?;
    let probs = f.predict_proba(&x_hat)?;
    Ok(conds
        .into_iter()
        .enumerate()
        .map(|(i, condition)| TraversalStep {
            x_hat: x_hat.row(i).to_vec(),
            condition,
            probs: probs.row(i).to_vec(),
        })
        .collect())
}

/// Fraction of query rows whose traversal has `f(x̂)[k]` non-increasing
/// (within `tol`) along the sweep, `k` being the predicted class.
pub fn monotone_fraction(pce: &Pce, f: &Classifier, x: &Array, steps: usize, tol: f64, rng: &mut Rng) -> Result<f64> {
    let preds = metrics::argmax_rows(&f.predict_proba(x)?);
    let mut ok = 0;
    for (row, (k, _)) in x.iter_rows().zip(preds) {
        let k_c = crate::pce::other_class(f.classes(), k, rng);
        let t = traversal(pce, f, row, k, k_c, steps)?;
        if t.windows(2).all(|w| w[1].probs[k] <= w[0].probs[k] + tol) {
            ok += 1;
        }
    }
    Ok(ok as f64 / x.rows().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::soft_cross_entropy;
    use crate::data::{two_moons, Split};
    use crate::nn::Module;
    use crate::pce::PceConfig;
    use crate::tensor::Graph;

    fn fixtures() -> (Classifier, Pce, LabeledSet) {
        let data = two_moons(100, 0.1, &mut Rng::new(0)).unwrap();
        let f = Classifier::new(2, 2, &ClassifierConfig::default(), &mut Rng::new(1)).unwrap();
        let pce = Pce::new(&f, &PceConfig::default(), &mut Rng::new(2));
        (f, pce, data)
    }

    #[test]
    fn ace_counts_and_labels() {
        let (f, pce, data) = fixtures();
        let aug = generate_ace(&pce, &f, &data, 4, &mut Rng::new(3)).unwrap();
        assert_eq!(aug.len(), 400);
        for s in &aug {
            assert!((s.condition.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        write_augmented_csv(&aug, &mut buf).unwrap();
        assert_eq!(read_augmented_csv(&buf[..]).unwrap(), aug);
    }

    fn fake_aug(n: usize) -> Vec<AugmentedSample> {
        (0..n)
            .map(|i| AugmentedSample {
                x: vec![i as f64, 0.0],
                condition: Condition::binary(2, 0, 1, 0.25).unwrap(),
                source_index: i,
                u: 0.25,
            })
            .collect()
    }

    #[test]
    fn mix_counts() {
        let real = two_moons(1000, 0.1, &mut Rng::new(0)).unwrap();
        let aug = fake_aug(400);
        let m = build_mixed(&real, &aug, 0.3, Some(1000), 2, &mut Rng::new(1)).unwrap();
        assert_eq!((m.augmented_count, m.real_count), (300, 700));
        let pure = build_mixed(&real, &aug, 0.0, None, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(pure.augmented_count, 0);
        let all_aug = build_mixed(&real, &aug, 1.0, Some(400), 2, &mut Rng::new(1)).unwrap();
        assert_eq!(all_aug.real_count, 0);
        let err = build_mixed(&real, &aug, 0.5, Some(1000), 2, &mut Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("500") && err.to_string().contains("400"));
        let again = build_mixed(&real, &aug, 0.3, Some(1000), 2, &mut Rng::new(1)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn soft_ce_values() {
        let g = Graph::new();
        let p = g.constant(Array::from_rows(&[[0.5, 0.5]]).unwrap());
        assert!((soft_cross_entropy(&p, &p).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-9);
        let q = Array::from_rows(&[[0.2, 0.8], [0.9, 0.1]]).unwrap();
        let qt = g.constant(q.clone());
        let h: f64 = q.data().iter().map(|v| -v * v.ln()).sum::<f64>() / 2.0;
        assert!((soft_cross_entropy(&qt, &qt).unwrap().item() - h).abs() < 1e-11);
    }

    #[test]
    fn zero_epoch_finetune_is_identity_and_preserves_input() {
        let (f, _, data) = fixtures();
        let real = LabeledSet { split: Split::Train, ..data.clone() };
        let mixed = build_mixed(&real, &[], 0.0, None, 2, &mut Rng::new(0)).unwrap();
        let before = f.clone();
        let (g0, rep) = finetune(&f, &mixed, &data, &ClassifierConfig::default(), 0, 1e-4, &mut Rng::new(1)).unwrap();
        assert_eq!(g0, f);
        assert!(rep.selected.is_none());
        let (g1, _) = finetune(&f, &mixed, &data, &ClassifierConfig::default(), 2, 1e-4, &mut Rng::new(1)).unwrap();
        assert_eq!(f, before);
        assert_ne!(g1.named_state(), f.named_state());
    }

    #[test]
    fn traversal_endpoints() {
        let (f, pce, _) = fixtures();
        let t = traversal(&pce, &f, &[0.3, -0.2], 0, 1, 5).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0].condition.values(), &[1.0, 0.0]);
        assert_eq!(t[4].condition.values(), &[0.0, 1.0]);
        assert!(traversal(&pce, &f, &[0.3, -0.2], 0, 1, 1).is_err());
    }
}
