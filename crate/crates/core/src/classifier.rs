//! The MLP classifier, its training loop, predictive entropy, MC-dropout,
//! seed ensembles and pseudo-labelling of ambiguous samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Adam, BatchNorm, BatchStats, Dense, Dropout, Init, Module, Rng};
use crate::tensor::{Array, Graph, Param, Tensor, EPS_LOG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of final epochs eligible for checkpoint selection.
    pub select_window: f64,
    /// Accuracy slack relative to the best epoch when minimizing ECE.
    pub accuracy_slack: f64,
    pub ece_bins: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.1,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            select_window: 0.2,
            accuracy_slack: 0.005,
            ece_bins: 15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and active dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Running statistics with dropout active.
    McDropout,
}

/// Result of one forward pass.
pub struct Forward {
    pub logits: Tensor,
    /// 64-D activations feeding the output layer.
    pub penultimate: Tensor,
    /// Batch statistics of both batch-norm layers (training mode only).
    pub stats: Vec<BatchStats>,
}

/// `Dense → BN → ReLU → Dropout → Dense → BN → ReLU → Dense`, softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub l1: Dense,
    pub bn1: BatchNorm,
    pub dropout: Dropout,
    pub l2: Dense,
    pub bn2: BatchNorm,
    pub head: Dense,
}

impl Classifier {
    pub fn new(dim: usize, classes: usize, config: &ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract("classifier needs at least two classes"));
        }
        let h = config.hidden;
        Ok(Self {
            l1: Dense::new("l1", dim, h, Init::He, rng),
            bn1: BatchNorm::new("bn1", h),
            dropout: Dropout::new(config.dropout)?,
            l2: Dense::new("l2", h, h, Init::He, rng),
            bn2: BatchNorm::new("bn2", h),
            head: Dense::new("head", h, classes, Init::Xavier, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.l1.fan_in()
    }

    pub fn classes(&self) -> usize {
        self.head.fan_out()
    }

    pub fn hidden(&self) -> usize {
        self.head.fan_in()
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, mode: Mode, mut rng: Option<&mut Rng>) -> Result<Forward> {
        let mut stats = Vec::new();
        let mut bn = |layer: &BatchNorm, h: &Tensor| -> Result<Tensor> {
            if mode == Mode::Train {
                let (out, s) = layer.forward_train(g, h)?;
                stats.push(s);
                Ok(out)
            } else {
                layer.forward_eval(g, h)
            }
        };
        let h = bn(&self.bn1, &self.l1.forward(g, x)?)?.relu();
        let h = match mode {
            Mode::Eval => h,
            _ => self.dropout.forward(g, &h, rng.as_deref_mut())?,
        };
        let penultimate = bn(&self.bn2, &self.l2.forward(g, &h)?)?.relu();
        let logits = self.head.forward(g, &penultimate)?;
        Ok(Forward {
            logits,
            penultimate,
            stats,
        })
    }

    /// Evaluation-mode logits on a graph, for callers that differentiate
    /// through a frozen classifier.
    pub fn logits(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(g, x, Mode::Eval, None)?.logits)
    }

    pub fn predict_proba(&self, x: &Array) -> Result<Array> {
        let g = Graph::inference();
        let f = self.forward(&g, &g.constant(x.clone()), Mode::Eval, None)?;
        Ok(f.logits.softmax()?.array())
    }

    pub fn predict(&self, x: &Array) -> Result<Vec<usize>> {
        Ok(metrics::argmax_rows(&self.predict_proba(x)?)
            .into_iter()
            .map(|(k, _)| k)
            .collect())
    }

    pub fn penultimate(&self, x: &Array) -> Result<Array> {
        let g = Graph::inference();
        Ok(self
            .forward(&g, &g.constant(x.clone()), Mode::Eval, None)?
            .penultimate
            .array())
    }

    pub(crate) fn apply_stats(&mut self, stats: &[BatchStats]) {
        if let [s1, s2] = stats {
            self.bn1.update_running(s1);
            self.bn2.update_running(s2);
        }
    }
}

impl Module for Classifier {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.l1.params();
        v.extend(self.bn1.params());
        v.extend(self.l2.params());
        v.extend(self.bn2.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.l2.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &Array)> {
        let mut v = Vec::new();
        for bn in [&self.bn1, &self.bn2] {
            v.push((format!("{}.running_mean", bn.name()), &bn.running_mean));
            v.push((format!("{}.running_var", bn.name()), &bn.running_var));
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut v = Vec::new();
        for bn in [&mut self.bn1, &mut self.bn2] {
            let name = bn.name().to_string();
            v.push((format!("{name}.running_mean"), &mut bn.running_mean));
            v.push((format!("{name}.running_var"), &mut bn.running_var));
        }
        v
    }
}

/// Anything that maps a batch to class probabilities.
pub trait ProbabilisticModel {
    fn proba(&self, x: &Array) -> Result<Array>;
}

impl ProbabilisticModel for Classifier {
    fn proba(&self, x: &Array) -> Result<Array> {
        self.predict_proba(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub ece: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned checkpoint; `None` when no epoch ran.
    pub selected: Option<usize>,
}

impl TrainReport {
    pub fn selected_record(&self) -> Option<&EpochRecord> {
        self.selected.map(|i| &self.epochs[i])
    }
}

/// Loss used by [`fit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Objective {
    /// Cross-entropy through log-softmax, for one-hot targets.
    HardLabels,
    /// `−Σ t·log(p + ε)` on softmax probabilities.
    SoftLabels,
}

/// Mean cross-entropy of logits against one-hot or soft targets via
/// log-softmax.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = logits.value().rows() as f64;
    Ok(logits.log_softmax()?.mul(targets)?.sum().scale(-1.0 / n))
}

/// Mean over rows of `−Σ_k t_k · log(p_k + ε)`.
pub fn soft_cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = probs.value().rows() as f64;
    Ok(probs.log_guarded().mul(targets)?.sum().scale(-1.0 / n))
}

/// Shared minibatch loop for base training and fine-tuning, with
/// checkpoint selection over the final epochs.
pub(crate) fn fit(
    mut model: Classifier,
    features: &Array,
    targets: &Array,
    eval: &LabeledSet,
    config: &ClassifierConfig,
    objective: Objective,
    stage: &'static str,
    rng: &mut Rng,
) -> Result<(Classifier, TrainReport)> {
    let n = features.rows();
    let mut opt = Adam::new(config.lr, config.beta1, config.beta2);
    let mut shuffle = rng.child("shuffle");
    let mut drop = rng.child("dropout");
    let window = ((config.epochs as f64 * config.select_window).ceil() as usize).clamp(1, config.epochs.max(1));
    let first_eligible = config.epochs.saturating_sub(window);
    let mut report = TrainReport::default();
    let mut candidates: Vec<(usize, Classifier)> = Vec::new();
    let batch = config.batch_size.max(2);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = shuffle.permutation(n);
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(batch) {
            // Batch norm needs at least two rows.
            if chunk.len() < 2 {
                continue;
            }
            let g = Graph::new();
            let x = g.constant(features.select_rows(chunk));
            let t = g.constant(targets.select_rows(chunk));
            let fwd = model.forward(&g, &x, Mode::Train, Some(&mut drop))?;
            let loss = match objective {
                Objective::HardLabels => cross_entropy(&fwd.logits, &t)?,
                Objective::SoftLabels => soft_cross_entropy(&fwd.logits.softmax()?, &t)?,
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage,
                    step,
                    loss: "cross-entropy",
                });
            }
            g.backward(&loss)?.accumulate_into(model.params_mut());
            opt.step(&mut model.params_mut())?;
            model.apply_stats(&fwd.stats);
            total += value * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let probs = model.predict_proba(&eval.features)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: if seen > 0 { total / seen as f64 } else { 0.0 },
            test_accuracy: metrics::accuracy(&probs, &eval.labels),
            ece: metrics::ece(&probs, &eval.labels, config.ece_bins)?,
        });
        if epoch >= first_eligible {
            candidates.push((epoch, model.clone()));
        }
    }
    let Some(pick) = select_checkpoint(&report.epochs, first_eligible, config.accuracy_slack) else {
        return Ok((model, report));
    };
    report.selected = Some(pick);
    let chosen = candidates
        .into_iter()
        .find(|(e, _)| *e == pick)
        .map(|(_, m)| m)
        .expect("selected epoch is in the window");
    Ok((chosen, report))
}

/// Lowest ECE among epochs `first..` whose accuracy is within `slack` of the
/// best accuracy seen in any epoch; if none qualifies, the most accurate
/// epoch in the window. Ties go to the later epoch.
pub fn select_checkpoint(records: &[EpochRecord], first: usize, slack: f64) -> Option<usize> {
    if records.len() <= first {
        return None;
    }
    let best = records.iter().map(|r| r.test_accuracy).fold(f64::MIN, f64::max);
    let window = first..records.len();
    let eligible = window
        .clone()
        .filter(|&i| records[i].test_accuracy >= best - slack - 1e-12)
        .min_by(|&a, &b| records[a].ece.total_cmp(&records[b].ece).then(b.cmp(&a)));
    eligible.or_else(|| {
        window.max_by(|&a, &b| {
            records[a]
                .test_accuracy
                .total_cmp(&records[b].test_accuracy)
                .then(a.cmp(&b))
        })
    })
}

/// Train a fresh classifier on `train`, selecting the checkpoint on `eval`.
pub fn train_classifier(
    train: &LabeledSet,
    eval: &LabeledSet,
    classes: usize,
    config: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(Classifier, TrainReport)> {
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let model = Classifier::new(train.dim(), classes, config, &mut rng.child("init"))?;
    let targets = train.one_hot(classes)?;
    fit(
        model,
        &train.features,
        &targets,
        eval,
        config,
        Objective::HardLabels,
        "classifier",
        &mut rng.child("fit"),
    )
}

/// Natural-log entropy of each probability row, `−Σ p log(p + ε)`.
pub fn predictive_entropy(probs: &Array) -> Result<Vec<f64>> {
    probs
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("row {i} sums to {s}, not 1")));
            }
            Ok(-row.iter().map(|&p| p * (p + EPS_LOG).ln()).sum::<f64>())
        })
        .collect()
}

/// Mean softmax over `passes` forward passes with dropout active and batch
/// norm in evaluation mode.
pub fn mc_dropout_proba(model: &Classifier, x: &Array, passes: usize, rng: &mut Rng) -> Result<Array> {
    if passes == 0 {
        return Err(Error::contract("MC-dropout needs at least one pass"));
    }
    let mut acc = Array::zeros(&[x.rows(), model.classes()]);
    for _ in 0..passes {
        let g = Graph::inference();
        let f = model.forward(&g, &g.constant(x.clone()), Mode::McDropout, Some(rng))?;
        let p = f.logits.softmax()?;
        for (a, v) in acc.data_mut().iter_mut().zip(p.value().data()) {
            *a += v;
        }
    }
    Ok(acc.map(|v| v / passes as f64))
}

/// Indices of the `⌈q·n⌉` largest scores, ties broken by ascending index;
/// returned in ascending index order.
pub fn top_fraction(scores: &[f64], q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("fraction {q} outside (0, 1]")));
    }
    let k = ((q * scores.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx.sort_unstable();
    Ok(idx)
}

/// Pseudo-label the ambiguous in-distribution samples of `test`: the top
/// `q` fraction by MC-dropout predictive entropy.
pub fn label_aid(model: &Classifier, test: &LabeledSet, q: f64, passes: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let pe = predictive_entropy(&mc_dropout_proba(model, &test.features, passes, rng)?)?;
    top_fraction(&pe, q)
}

/// Independently seeded classifiers averaged in probability space.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Classifier>,
}

impl ProbabilisticModel for Ensemble {
    fn proba(&self, x: &Array) -> Result<Array> {
        let mut acc: Option<Array> = None;
        for m in &self.members {
            let p = m.predict_proba(x)?;
            acc = Some(match acc {
                None => p,
                Some(mut a) => {
                    for (s, v) in a.data_mut().iter_mut().zip(p.data()) {
                        *s += v;
                    }
                    a
                }
            });
        }
        let n = self.members.len() as f64;
        acc.map(|a| a.map(|v| v / n))
            .ok_or_else(|| Error::contract("empty ensemble"))
    }
}

/// Thread cap from `ACE_LAB_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("ACE_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

pub(crate) fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// One classifier per seed, each on its own `(seed, "classifier")` stream,
/// trained in parallel.
pub fn train_ensemble(
    train: &LabeledSet,
    eval: &LabeledSet,
    classes: usize,
    config: &ClassifierConfig,
    seeds: &[u64],
) -> Result<(Ensemble, Vec<TrainReport>)> {
    if seeds.len() < 2 {
        return Err(Error::contract("an ensemble needs at least two members"));
    }
    let results: Vec<Result<(Classifier, TrainReport)>> = with_pool(|| {
        seeds
            .par_iter()
            .map(|&s| train_classifier(train, eval, classes, config, &mut Rng::stream(s, "classifier")))
            .collect()
    });
    let mut members = Vec::with_capacity(seeds.len());
    let mut reports = Vec::with_capacity(seeds.len());
    for r in results {
        let (m, rep) = r?;
        members.push(m);
        reports.push(rep);
    }
    Ok((Ensemble { members }, reports))
}
