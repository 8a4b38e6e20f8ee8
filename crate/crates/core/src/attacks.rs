//! White-box adversarial attacks (FGSM, DeepFool, Carlini–Wagner L2) and
//! robustness sweeps. Every attack targets the true label and differentiates
//! through the attacked model's own evaluation-mode logits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy, Classifier};
use crate::data::{fmt_f64, LabeledSet, SampleBox};
use crate::error::{Error, Result};
use crate::metrics::{self, ScoredBinarySet};
use crate::nn::Module;
use crate::tensor::{Array, Graph, Tensor};

/// Anything with differentiable logits.
pub trait LogitModel {
    fn classes(&self) -> usize;
    /// Evaluation-mode logits on `g`; model parameters do not track gradients.
    fn logits_on(&self, g: &Graph, x: &Tensor) -> Result<Tensor>;
}

impl LogitModel for Classifier {
    fn classes(&self) -> usize {
        Classifier::classes(self)
    }

    fn logits_on(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        g.freeze(self.params());
        self.logits(g, x)
    }
}

fn check_labels(model: &dyn LogitModel, x: &Array, y: &[usize]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Shape {
            op: "attack labels",
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    if let Some(&bad) = y.iter().find(|&&k| k >= model.classes()) {
        return Err(Error::contract(format!("label {bad} outside 0..{}", model.classes())));
    }
    Ok(())
}

fn finite(a: &Array, what: &str) -> Result<()> {
    if a.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Attack(format!("non-finite {what}")))
    }
}

fn one_hot(rows: &[usize], classes: usize) -> Array {
    let mut a = Array::zeros(&[rows.len(), classes]);
    for (i, &k) in rows.iter().enumerate() {
        a.data_mut()[i * classes + k] = 1.0;
    }
    a
}

fn logits_of(model: &dyn LogitModel, x: &Array) -> Result<Array> {
    let g = Graph::inference();
    Ok(model.logits_on(&g, &g.constant(x.clone()))?.array())
}

fn predicted(logits: &Array) -> Vec<usize> {
    metrics::argmax_rows(logits).into_iter().map(|(k, _)| k).collect()
}

fn clip(x: &mut Array, bounds: &SampleBox) {
    let d = bounds.lo.len();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v = v.clamp(bounds.lo[i % d], bounds.hi[i % d]);
    }
}

/// `x + ε·sign(∇ₓ CE(f(x), y))`, optionally clipped to a box. `sign(0) = 0`.
pub fn fgsm(model: &dyn LogitModel, x: &Array, y: &[usize], eps: f64, bounds: Option<&SampleBox>) -> Result<Array> {
    check_labels(model, x, y)?;
    if !(eps >= 0.0) {
        return Err(Error::contract(format!("FGSM step {eps} must be non-negative")));
    }
    let g = Graph::new();
    let xt = g.input(x.clone(), true);
    let logits = model.logits_on(&g, &xt)?;
    // Summed so each row's gradient does not depend on the batch size.
    let loss = cross_entropy(&logits, &g.constant(one_hot(y, model.classes())))?.scale(y.len() as f64);
    let grad = g.grad(&loss, &[&xt], None, false)?.remove(0).array();
    finite(&grad, "FGSM gradient")?;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let mut out = Array::new(
        x.shape().to_vec(),
        x.data().iter().zip(grad.data()).map(|(a, gv)| a + eps * sign(*gv)).collect(),
    )?;
    if let Some(b) = bounds {
        clip(&mut out, b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepFoolOutcome {
    /// `x + (1 + η)·r`.
    pub adversarial: Array,
    /// Accumulated perturbation `r` before the overshoot.
    pub perturbation: Array,
    pub iterations: Vec<usize>,
    /// Whether the label changed at the returned point.
    pub flipped: Vec<bool>,
}

/// Multi-class DeepFool: linearise the logit differences at the current
/// point and step onto the nearest linearised boundary, until the label
/// flips or `max_iter` steps are spent. Rows misclassified at the start are
/// returned unchanged.
pub fn deepfool(model: &dyn LogitModel, x: &Array, y: &[usize], max_iter: usize, eta: f64) -> Result<DeepFoolOutcome> {
    check_labels(model, x, y)?;
    let (n, d, k) = (x.rows(), x.cols(), model.classes());
    let mut r = Array::zeros(&[n, d]);
    let mut iterations = vec![0; n];
    let mut active: Vec<bool> = predicted(&logits_of(model, x)?).iter().zip(y).map(|(p, t)| p == t).collect();
    let point = |r: &Array| -> Array {
        let data = x.data().iter().zip(r.data()).map(|(a, b)| a + (1.0 + eta) * b).collect();
        Array::new(vec![n, d], data).expect("same shape")
    };
    for _ in 0..max_iter {
        let cur = point(&r);
        let labels = predicted(&logits_of(model, &cur)?);
        for i in 0..n {
            if labels[i] != y[i] {
                active[i] = false;
            }
        }
        let rows: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        if rows.is_empty() {
            break;
        }
        let g = Graph::new();
        let xt = g.input(cur.select_rows(&rows), true);
        let logits = model.logits_on(&g, &xt)?;
        let z = logits.array();
        finite(&z, "DeepFool logits")?;
        // Best (|f_j| / ‖w_j‖, f_j, w_j) per active row.
        let mut best: Vec<Option<(f64, f64, Vec<f64>)>> = vec![None; rows.len()];
        for j in 0..k {
            let mut seed = Array::zeros(&[rows.len(), k]);
            for (a, &i) in rows.iter().enumerate() {
                if y[i] != j {
                    seed.data_mut()[a * k + j] = 1.0;
                    seed.data_mut()[a * k + y[i]] = -1.0;
                }
            }
            let w = g.grad(&logits, &[&xt], Some(&g.constant(seed)), false)?.remove(0).array();
            finite(&w, "DeepFool gradient")?;
            for (a, &i) in rows.iter().enumerate() {
                if y[i] == j {
                    continue;
                }
                let wj = w.row(a);
                let norm = wj.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let fj = z.row(a)[j] - z.row(a)[y[i]];
                let dist = fj.abs() / norm;
                if best[a].as_ref().is_none_or(|b| dist < b.0) {
                    best[a] = Some((dist, fj, wj.to_vec()));
                }
            }
        }
        for (a, &i) in rows.iter().enumerate() {
            match &best[a] {
                Some((_, fj, wj)) => {
                    let norm2: f64 = wj.iter().map(|v| v * v).sum();
                    let step = fj.abs() / norm2;
                    for (c, wv) in wj.iter().enumerate() {
                        r.data_mut()[i * d + c] += step * wv;
                    }
                    iterations[i] += 1;
                }
                // Flat logits: nowhere to go.
                None => active[i] = false,
            }
        }
    }
    let adversarial = point(&r);
    let flipped = predicted(&logits_of(model, &adversarial)?)
        .iter()
        .zip(y)
        .map(|(p, t)| p != t)
        .collect();
    Ok(DeepFoolOutcome {
        adversarial,
        perturbation: r,
        iterations,
        flipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwConfig {
    pub c: f64,
    pub kappa: f64,
    pub lr: f64,
    pub iters: usize,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            kappa: 0.0,
            lr: 0.01,
            iters: 100,
        }
    }
}

/// Carlini–Wagner L2 in tanh space over `bounds`, minimising
/// `‖δ‖² + c·max(z_y − max_{j≠y} z_j, −κ)` by plain gradient descent.
/// Returns the lowest-loss iterate per row, the clean input counting as
/// iterate zero.
pub fn carlini_wagner(model: &dyn LogitModel, x: &Array, y: &[usize], cfg: &CwConfig, bounds: &SampleBox) -> Result<Array> {
    Ok(carlini_wagner_path(model, x, y, cfg, bounds, &[cfg.iters])?.remove(0))
}

/// Best iterate so far after each of `checkpoints` steps (ascending).
pub fn carlini_wagner_path(
    model: &dyn LogitModel,
    x: &Array,
    y: &[usize],
    cfg: &CwConfig,
    bounds: &SampleBox,
    checkpoints: &[usize],
) -> Result<Vec<Array>> {
    check_labels(model, x, y)?;
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("CW checkpoints must be ascending"));
    }
    let (n, d, k) = (x.rows(), x.cols(), model.classes());
    if bounds.lo.len() != d {
        return Err(Error::contract("CW box dimension does not match the input"));
    }
    let span: Vec<f64> = bounds.hi.iter().zip(&bounds.lo).map(|(h, l)| h - l).collect();
    if span.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("CW box must have positive width"));
    }
    let lo = Array::new(vec![d], bounds.lo.clone())?;
    let span_a = Array::new(vec![d], span.clone())?;
    let yhot = one_hot(y, k);
    let limit = 1.0 - 1e-6;
    let mut w = x.clone();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        let t = (2.0 * (*v - bounds.lo[i % d]) / span[i % d] - 1.0).clamp(-limit, limit);
        *v = t.atanh();
    }

    // Per-row loss and its gradient w.r.t. w at the current iterate.
    let eval = |w: &Array, want_grad: bool| -> Result<(Array, Vec<f64>, Option<Array>)> {
        let g = Graph::new();
        let wt = g.input(w.clone(), want_grad);
        let xa = wt.tanh().offset(1.0).scale(0.5).mul(&g.constant(span_a.clone()))?.add(&g.constant(lo.clone()))?;
        let delta = xa.sub(&g.constant(x.clone()))?;
        let logits = model.logits_on(&g, &xa)?;
        let z = logits.array();
        let mut other = Array::zeros(&[n, k]);
        for i in 0..n {
            let j = (0..k)
                .filter(|&j| j != y[i])
                .max_by(|&a, &b| z.row(i)[a].total_cmp(&z.row(i)[b]).then(b.cmp(&a)))
                .unwrap_or(y[i]);
            other.data_mut()[i * k + j] = 1.0;
        }
        let zy = logits.mul(&g.constant(yhot.clone()))?.sum_rows()?;
        let zo = logits.mul(&g.constant(other))?.sum_rows()?;
        let hinge = zy.sub(&zo)?.offset(cfg.kappa).relu().offset(-cfg.kappa);
        let rows = delta.square()?.sum_rows()?.add(&hinge.scale(cfg.c))?;
        let losses = rows.array().into_data();
        let grad = if want_grad {
            Some(g.grad(&rows.sum(), &[&wt], None, false)?.remove(0).array())
        } else {
            None
        };
        Ok((xa.array(), losses, grad))
    };

    // Iterate zero is the clean input itself.
    let clean_margin = {
        let z = logits_of(model, x)?;
        (0..n)
            .map(|i| {
                let zo = (0..k).filter(|&j| j != y[i]).map(|j| z.row(i)[j]).fold(f64::NEG_INFINITY, f64::max);
                cfg.c * ((z.row(i)[y[i]] - zo).max(-cfg.kappa))
            })
            .collect::<Vec<_>>()
    };
    let mut best = x.clone();
    let mut best_loss = clean_margin;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    let last = checkpoints.last().copied().unwrap_or(0);
    let mut step = 0;
    loop {
        while next.peek().is_some_and(|&&c| c == step) {
            out.push(best.clone());
            next.next();
        }
        if step == last {
            break;
        }
        let (xa, losses, grad) = eval(&w, true)?;
        if step > 0 {
            // Iterate `step` was reached by the previous update.
            for i in 0..n {
                if losses[i] < best_loss[i] {
                    best_loss[i] = losses[i];
                    best.data_mut()[i * d..(i + 1) * d].copy_from_slice(xa.row(i));
                }
            }
        }
        let grad = grad.expect("gradient requested");
        finite(&grad, "CW gradient")?;
        for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
            *wv -= cfg.lr * gv;
        }
        step += 1;
        let (xa, losses, _) = eval(&w, false)?;
        for i in 0..n {
            if losses[i] < best_loss[i] {
                best_loss[i] = losses[i];
                best.data_mut()[i * d..(i + 1) * d].copy_from_slice(xa.row(i));
            }
        }
    }
    Ok(out)
}

/// AUC of the true-class score: for two classes the class-1 probability
/// against `y == 1`, otherwise the mean one-vs-rest AUC over present classes.
pub fn true_class_auc(probs: &Array, labels: &[usize]) -> Result<f64> {
    let k = probs.cols();
    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut total = 0.0;
    let mut used = 0;
    for c in classes {
        let scores = probs.iter_rows().map(|r| r[c]).collect();
        let set = ScoredBinarySet::new(scores, labels.iter().map(|&y| y == c).collect())?;
        if set.labels.iter().all(|&l| l) || set.labels.iter().all(|&l| !l) {
            continue;
        }
        total += set.auc()?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::contract("true-class AUC needs at least two classes present"));
    }
    Ok(total / used as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub fgsm_eps: Vec<f64>,
    pub deepfool_iters: Vec<usize>,
    pub deepfool_eta: f64,
    /// Iteration budget of the unrestricted ("best") DeepFool run.
    pub deepfool_best_iters: usize,
    pub cw_iters: Vec<usize>,
    pub cw_c: f64,
    pub cw_lr: f64,
    pub cw_kappa: Vec<f64>,
    /// The CW box is the training data range widened by this many std.
    pub box_std: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            fgsm_eps: (0..16).map(|i| f64::from(i) / 50.0).collect(),
            deepfool_iters: vec![0, 1, 2, 3, 5, 10],
            deepfool_eta: 0.02,
            deepfool_best_iters: 50,
            cw_iters: (0..=10).map(|i| i * 10).collect(),
            cw_c: 1.0,
            cw_lr: 0.01,
            cw_kappa: vec![0.0, 5.0],
            box_std: 3.0,
        }
    }
}

/// Per-dimension `[min − s·std, max + s·std]` of `features`.
pub fn data_box(features: &Array, s: f64) -> SampleBox {
    let (n, d) = (features.rows(), features.cols());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut mean = vec![0.0; d];
    for r in features.iter_rows() {
        for j in 0..d {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
            mean[j] += r[j] / n as f64;
        }
    }
    for j in 0..d {
        let var = features.iter_rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        let pad = s * var.sqrt();
        lo[j] -= pad;
        hi[j] += pad;
    }
    SampleBox { lo, hi }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub attack: String,
    pub magnitude: f64,
    pub auc: f64,
    pub accuracy: f64,
}

fn sweep_row(model_name: &str, model: &Classifier, attack: String, magnitude: f64, x: &Array, y: &[usize]) -> Result<SweepRow> {
    let probs = model.predict_proba(x)?;
    Ok(SweepRow {
        model: model_name.to_string(),
        attack,
        magnitude,
        auc: true_class_auc(&probs, y)?,
        accuracy: metrics::accuracy(&probs, y),
    })
}

/// Attack each model with its own gradients over every grid point and record
/// accuracy and true-class AUC on the perturbed test set.
pub fn robustness_sweep(models: &[(&str, &Classifier)], test: &LabeledSet, cfg: &AttackConfig, bounds: &SampleBox) -> Result<Vec<SweepRow>> {
    let (x, y) = (&test.features, &test.labels[..]);
    let mut rows = Vec::new();
    for &(name, model) in models {
        for &eps in &cfg.fgsm_eps {
            let adv = fgsm(model, x, y, eps, None)?;
            rows.push(sweep_row(name, model, "fgsm".into(), eps, &adv, y)?);
        }
        for &it in &cfg.deepfool_iters {
            let adv = deepfool(model, x, y, it, cfg.deepfool_eta)?.adversarial;
            rows.push(sweep_row(name, model, "deepfool".into(), it as f64, &adv, y)?);
        }
        let best = deepfool(model, x, y, cfg.deepfool_best_iters, cfg.deepfool_eta)?.adversarial;
        rows.push(sweep_row(name, model, "deepfool_best".into(), cfg.deepfool_best_iters as f64, &best, y)?);
        let mut checkpoints = cfg.cw_iters.clone();
        checkpoints.sort_unstable();
        for &kappa in &cfg.cw_kappa {
            let cw = CwConfig {
                c: cfg.cw_c,
                kappa,
                lr: cfg.cw_lr,
                iters: checkpoints.last().copied().unwrap_or(0),
            };
            let path = carlini_wagner_path(model, x, y, &cw, bounds, &checkpoints)?;
            for (&it, adv) in checkpoints.iter().zip(&path) {
                rows.push(sweep_row(name, model, format!("cw_kappa{kappa}"), it as f64, adv, y)?);
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["model", "attack", "magnitude", "auc"])?;
    for r in rows {
        wr.write_record([r.model.clone(), r.attack.clone(), fmt_f64(r.magnitude), fmt_f64(r.auc)])?;
    }
    wr.flush()?;
    Ok(())
}
