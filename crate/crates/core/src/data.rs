//! Two-Moons data and its out-of-distribution companions.
//!
//! All generators are pure functions of their arguments and the random
//! stream; identical inputs give bitwise-identical outputs.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Features with hard class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: Array,
    pub labels: Vec<usize>,
    pub split: Split,
}

/// Features with soft (simplex) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabeledSet {
    pub features: Array,
    pub targets: Array,
}

impl LabeledSet {
    pub fn new(features: Array, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "labeled set",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }

    pub fn empty(dim: usize, split: Split) -> Self {
        Self {
            features: Array::zeros(&[0, dim]),
            labels: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Hard labels promoted to one-hot rows over `k` classes.
    pub fn one_hot(&self, k: usize) -> Result<Array> {
        let mut data = vec![0.0; self.len() * k];
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= k {
                return Err(Error::contract(format!("label {y} outside 0..{k}")));
            }
            data[i * k + y] = 1.0;
        }
        Array::new(vec![self.len(), k], data)
    }

    pub fn to_soft(&self, k: usize) -> Result<SoftLabeledSet> {
        Ok(SoftLabeledSet {
            features: self.features.clone(),
            targets: self.one_hot(k)?,
        })
    }

    /// Write as CSV with header `x0,...,label` and 17-significant-digit floats.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        wr.write_record(&header)?;
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            rec.push(y.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, split: Split) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let d = headers.len().saturating_sub(1);
        if headers.get(d) != Some("label") {
            return Err(Error::contract("labeled CSV must end with a `label` column"));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            for j in 0..d {
                data.push(parse_f64(&rec[j])?);
            }
            labels.push(
                rec[d]
                    .parse()
                    .map_err(|_| Error::contract(format!("bad label `{}`", &rec[d])))?,
            );
        }
        LabeledSet::new(Array::new(vec![labels.len(), d], data)?, labels, split)
    }
}

impl SoftLabeledSet {
    pub fn new(features: Array, targets: Array) -> Result<Self> {
        if features.rows() != targets.rows() {
            return Err(Error::Shape {
                op: "soft labeled set",
                lhs: features.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        for (i, row) in targets.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract(format!("soft label row {i} is not a simplex point")));
            }
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::contract(format!("bad number `{s}`")))
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| lo + step * i as f64)
}

/// Two interleaving half circles: `n/2` outer points `(cos θ, sin θ)` labelled
/// 0 and `n/2` inner points `(1 − cos θ, 1 − sin θ − 0.5)` labelled 1, with θ
/// evenly spaced on `[0, π]`, plus Gaussian noise of std `noise`.
pub fn two_moons(n: usize, noise: f64, rng: &mut Rng) -> Result<LabeledSet> {
    if !n.is_multiple_of(2) {
        return Err(Error::contract(format!("two-moons needs an even count, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::contract("noise must be non-negative"));
    }
    let half = n / 2;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for t in linspace(0.0, PI, half) {
        data.extend_from_slice(&[t.cos(), t.sin()]);
        labels.push(0);
    }
    for t in linspace(0.0, PI, half) {
        data.extend_from_slice(&[1.0 - t.cos(), 1.0 - t.sin() - 0.5]);
        labels.push(1);
    }
    if noise > 0.0 {
        for v in data.iter_mut() {
            *v += noise * rng.gaussian();
        }
    }
    LabeledSet::new(Array::new(vec![n, 2], data)?, labels, Split::Train)
}

/// Label given to the unseen near-OOD class.
pub const NEAR_OOD_LABEL: usize = 2;
/// Label given to far-OOD samples.
pub const FAR_OOD_LABEL: usize = 3;

/// Rotate `(x, y)` counter-clockwise by 90° about `(cx, cy)`.
pub fn rotate90(p: [f64; 2], center: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    [center[0] - dy, center[1] + dx]
}

/// A third, unseen-class moon: the outer moon rotated by 90° about
/// `(0.5, 0.25)`, with the same noise model as [`two_moons`].
pub fn near_ood_moons(n: usize, noise: f64, rng: &mut Rng) -> Result<LabeledSet> {
    if !n.is_multiple_of(2) {
        return Err(Error::contract(format!("near-OOD moons needs an even count, got {n}")));
    }
    let mut data = Vec::with_capacity(n * 2);
    for t in linspace(0.0, PI, n) {
        let [x, y] = rotate90([t.cos(), t.sin()], [0.5, 0.25]);
        data.extend_from_slice(&[x, y]);
    }
    if noise > 0.0 {
        for v in data.iter_mut() {
            *v += noise * rng.gaussian();
        }
    }
    LabeledSet::new(Array::new(vec![n, 2], data)?, vec![NEAR_OOD_LABEL; n], Split::Test)
}

/// Axis-aligned sampling box, one `[lo, hi]` per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn square(half_width: f64, dim: usize) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

/// Uniform samples from `bounds`, rejecting any proposal within `radius` of
/// a point of `exclude`. Gives up after `100·n` proposals.
pub fn far_ood_uniform(
    n: usize,
    bounds: &SampleBox,
    exclude: &Array,
    radius: f64,
    rng: &mut Rng,
) -> Result<LabeledSet> {
    let d = bounds.lo.len();
    if bounds.hi.len() != d || (exclude.rows() > 0 && exclude.cols() != d) {
        return Err(Error::Shape {
            op: "far_ood_uniform",
            lhs: vec![d],
            rhs: exclude.shape().to_vec(),
        });
    }
    let r2 = radius * radius;
    let budget = 100 * n;
    let mut data = Vec::with_capacity(n * d);
    let mut proposals = 0;
    let mut p = vec![0.0; d];
    while data.len() < n * d {
        if proposals >= budget {
            return Err(Error::Generation(format!(
                "rejection budget of {budget} proposals exhausted after {} accepted points",
                data.len() / d
            )));
        }
        proposals += 1;
        for j in 0..d {
            p[j] = rng.uniform_in(bounds.lo[j], bounds.hi[j]);
        }
        let too_close = exclude.iter_rows().any(|q| {
            q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < r2
        });
        if !too_close {
            data.extend_from_slice(&p);
        }
    }
    LabeledSet::new(Array::new(vec![n, d], data)?, vec![FAR_OOD_LABEL; n], Split::Test)
}

/// Stratified split: within each class, a shuffled `train_fraction` share
/// goes to the training set.
pub fn stratified_split(
    data: &LabeledSet,
    train_fraction: f64,
    rng: &mut Rng,
) -> (LabeledSet, LabeledSet) {
    let k = data.labels.iter().max().map_or(0, |m| m + 1);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..k {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let cut = (idx.len() as f64 * train_fraction).round() as usize;
        train_idx.extend_from_slice(&idx[..cut]);
        test_idx.extend_from_slice(&idx[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let mut train = data.subset(&train_idx);
    train.split = Split::Train;
    let mut test = data.subset(&test_idx);
    test.split = Split::Test;
    (train, test)
}

/// Per-dimension affine standardization fitted on a reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit mean and (population) standard deviation per dimension.
    pub fn fit(features: &Array) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if n == 0 {
            return Err(Error::contract("cannot standardize with an empty reference set"));
        }
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        if let Some(j) = std.iter().position(|&s| s == 0.0) {
            return Err(Error::contract(format!("dimension {j} has zero spread")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &Array) -> Array {
        let d = self.mean.len();
        let mut out = features.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn invert(&self, features: &Array) -> Array {
        let d = self.mean.len();
        let mut out = features.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.std[j] + self.mean[j];
        }
        out
    }

    pub fn apply_set(&self, set: &LabeledSet) -> LabeledSet {
        LabeledSet {
            features: self.apply(&set.features),
            labels: set.labels.clone(),
            split: set.split,
        }
    }
}

/// Fit on `reference` and standardize every set in `sets` with those
/// statistics.
pub fn standardize(reference: &LabeledSet, sets: &[&LabeledSet]) -> Result<(Standardizer, Vec<LabeledSet>)> {
    let s = Standardizer::fit(&reference.features)?;
    let out = sets.iter().map(|set| s.apply_set(set)).collect();
    Ok((s, out))
}
