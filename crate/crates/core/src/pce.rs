//! Progressive counterfactual explainer: an encoder/conditional-decoder
//! generator and a discriminator fused with the frozen classifier's features,
//! trained adversarially with classifier-consistency, reconstruction and
//! path-length terms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Mode};
use crate::data::{fmt_f64, LabeledSet};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Adam, Dense, Init, Module, Rng};
use crate::tensor::{vjp, Array, Graph, Param, Tensor};

/// One of the four traversal intervals for `c[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// `[0.8, 1.0]`: high data likelihood for the original class.
    Original,
    /// `[0.5, 0.8)`: walking towards the decision boundary.
    Approach,
    /// `[0.2, 0.5)`: crossing the boundary.
    Crossing,
    /// `[0.0, 0.2)`: high data likelihood for the counterfactual class.
    Counterfactual,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Original, Band::Approach, Band::Crossing, Band::Counterfactual];

    pub fn range(self) -> (f64, f64) {
        match self {
            Band::Original => (0.8, 1.0),
            Band::Approach => (0.5, 0.8),
            Band::Crossing => (0.2, 0.5),
            Band::Counterfactual => (0.0, 0.2),
        }
    }

    /// The band containing `c[k] = u`.
    pub fn of(u: f64) -> Band {
        if u >= 0.8 {
            Band::Original
        } else if u >= 0.5 {
            Band::Approach
        } else if u >= 0.2 {
            Band::Crossing
        } else {
            Band::Counterfactual
        }
    }
}

/// A desired classification outcome: a point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition(Vec<f64>);

impl Condition {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let s: f64 = values.iter().sum();
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("{values:?} is not a simplex point")));
        }
        Ok(Self(values))
    }

    /// Zero vector with `c[k] = u` and `c[k_c] = 1 − u`.
    pub fn binary(classes: usize, k: usize, k_c: usize, u: f64) -> Result<Self> {
        if k == k_c {
            return Err(Error::contract(format!("origin and counterfactual class are both {k}")));
        }
        if k >= classes || k_c >= classes {
            return Err(Error::contract(format!("class index outside 0..{classes}")));
        }
        let mut c = vec![0.0; classes];
        c[k] = u;
        c[k_c] = 1.0 - u;
        Self::new(c)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// Draw `u` uniformly from `[0, 1]` (or from `band`) and build the binary
/// condition. Returns the condition and `u`.
pub fn sample_condition(
    classes: usize,
    k: usize,
    k_c: usize,
    rng: &mut Rng,
    band: Option<Band>,
) -> Result<(Condition, f64)> {
    let (lo, hi) = band.map_or((0.0, 1.0), Band::range);
    let u = rng.uniform_in(lo, hi);
    Ok((Condition::binary(classes, k, k_c, u)?, u))
}

/// A uniformly drawn class other than `k`.
pub fn other_class(classes: usize, k: usize, rng: &mut Rng) -> usize {
    if classes == 2 {
        return 1 - k;
    }
    let j = rng.below(classes - 1);
    if j >= k {
        j + 1
    } else {
        j
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PceConfig {
    pub lambda_adv: f64,
    pub lambda_f: f64,
    pub lambda_rec: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training set the explainer sees.
    pub subset_fraction: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// EMA decay of the path-length target `a`.
    pub path_decay: f64,
    pub latent: usize,
    pub hidden: usize,
    /// Feed the classifier's penultimate features to the discriminator head.
    pub fusion: bool,
}

impl Default for PceConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 10.0,
            lambda_f: 10.0,
            lambda_rec: 100.0,
            epochs: 200,
            batch_size: 64,
            subset_fraction: 0.5,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            path_decay: 0.99,
            latent: 64,
            hidden: 64,
            fusion: true,
        }
    }
}

impl PceConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_adv, self.lambda_f, self.lambda_rec];
        if lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.path_decay) {
            return Err(Error::contract("path-length decay outside [0, 1]"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::contract("subset fraction outside (0, 1]"));
        }
        Ok(())
    }
}

/// `e: x → w`, a ReLU layer followed by a linear latent layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub l1: Dense,
    pub l2: Dense,
}

impl Encoder {
    pub fn new(dim: usize, hidden: usize, latent: usize, rng: &mut Rng) -> Self {
        Self {
            l1: Dense::new("encoder.l1", dim, hidden, Init::He, rng),
            l2: Dense::new("encoder.l2", hidden, latent, Init::Xavier, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(g, &self.l1.forward(g, x)?.relu())
    }

    pub fn latent(&self) -> usize {
        self.l2.fan_out()
    }
}

/// `g(w, c)`: decodes `[w, φ(c)]` back to input space.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub embed: Dense,
    pub l1: Dense,
    pub l2: Dense,
}

impl Decoder {
    pub fn new(classes: usize, latent: usize, hidden: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            embed: Dense::new("decoder.embed", classes, latent, Init::Xavier, rng),
            l1: Dense::new("decoder.l1", 2 * latent, hidden, Init::He, rng),
            l2: Dense::new("decoder.l2", hidden, dim, Init::Xavier, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.embed.fan_in()
    }

    pub fn forward(&self, g: &Graph, w: &Tensor, c: &Tensor) -> Result<Tensor> {
        let phi = self.embed.forward(g, c)?;
        let h = self.l1.forward(g, &Tensor::concat_cols(&[w, &phi])?)?.relu();
        self.l2.forward(g, &h)
    }
}

/// ReLU trunk plus a sigmoid head, optionally fed the classifier's
/// penultimate features alongside the trunk's.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub t1: Dense,
    pub t2: Dense,
    pub head: Dense,
    pub fusion: bool,
}

impl Discriminator {
    pub fn new(dim: usize, hidden: usize, classifier_features: Option<usize>, rng: &mut Rng) -> Self {
        let extra = classifier_features.unwrap_or(0);
        Self {
            t1: Dense::new("disc.t1", dim, hidden, Init::He, rng),
            t2: Dense::new("disc.t2", hidden, hidden, Init::He, rng),
            head: Dense::new("disc.head", hidden + extra, 1, Init::Xavier, rng),
            fusion: classifier_features.is_some(),
        }
    }

    /// `D(x) ∈ (0, 1)`, shape `[n, 1]`. `features` are the frozen
    /// classifier's penultimate activations for the same rows.
    pub fn forward(&self, g: &Graph, x: &Tensor, features: Option<&Tensor>) -> Result<Tensor> {
        let h = self.t2.forward(g, &self.t1.forward(g, x)?.relu())?.relu();
        let h = match (self.fusion, features) {
            (true, Some(f)) => Tensor::concat_cols(&[&h, f])?,
            (true, None) => return Err(Error::contract("fused discriminator needs classifier features")),
            (false, _) => h,
        };
        Ok(self.head.forward(g, &h)?.sigmoid())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.t1.params();
        v.extend(self.t2.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.t1.params_mut();
        v.extend(self.t2.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// `−mean log(D(x)+ε) − mean log(1 − D(x̂)+ε)`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = d_real.log_guarded().mean();
    let fake = d_fake.neg().offset(1.0).log_guarded().mean();
    Ok(real.add(&fake)?.neg())
}

/// Non-saturating generator loss `−mean log(D(x̂)+ε)`.
pub fn generator_adv_loss(d_fake: &Tensor) -> Tensor {
    d_fake.log_guarded().mean().neg()
}

/// Mean over rows of `KL(p ‖ c) = Σ_k p_k (log(p_k+ε) − log(c_k+ε))`.
pub fn kl_to_condition(probs: &Tensor, c: &Tensor) -> Result<Tensor> {
    let n = probs.value().rows() as f64;
    let ratio = probs.log_guarded().sub(&c.log_guarded())?;
    Ok(probs.mul(&ratio)?.sum().scale(1.0 / n))
}

/// `mean|x − x̄| + mean|e(x) − e(x̄)|`.
pub fn reconstruction_term(x: &Tensor, x_bar: &Tensor, ex: &Tensor, ex_bar: &Tensor) -> Result<Tensor> {
    let a = x.sub(x_bar)?.abs().mean();
    let b = ex.sub(ex_bar)?.abs().mean();
    a.add(&b)
}

/// Row norms `‖Jᵀ_w y_i‖₂` of the generator output's vector–Jacobian product
/// with respect to the latent code, shape `[n, 1]`.
pub fn path_lengths(output: &Tensor, latent: &Tensor, probe: &Tensor) -> Result<Tensor> {
    Ok(vjp(output, latent, probe)?.square()?.sum_rows()?.sqrt())
}

/// `mean (p − a)²`.
pub fn path_length_penalty(lengths: &Tensor, a: f64) -> Result<Tensor> {
    Ok(lengths.offset(-a).square()?.mean())
}

/// The explainer: generator `G(x, c) = g(e(x), c)` plus discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Pce {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    /// Path-length target `a`, shape `[1]`.
    pub path_mean: Array,
}

impl Pce {
    pub fn new(f: &Classifier, config: &PceConfig, rng: &mut Rng) -> Self {
        Self::with_shape(f.dim(), f.classes(), f.hidden(), config, rng)
    }

    /// Same as [`Pce::new`] given only the classifier's dimensions.
    pub fn with_shape(d: usize, k: usize, classifier_hidden: usize, config: &PceConfig, rng: &mut Rng) -> Self {
        let fused = config.fusion.then_some(classifier_hidden);
        Self {
            encoder: Encoder::new(d, config.hidden, config.latent, &mut rng.child("encoder")),
            decoder: Decoder::new(k, config.latent, config.hidden, d, &mut rng.child("decoder")),
            discriminator: Discriminator::new(d, config.hidden, fused, &mut rng.child("discriminator")),
            path_mean: Array::scalar(0.0),
        }
    }

    pub fn classes(&self) -> usize {
        self.decoder.classes()
    }

    pub fn path_target(&self) -> f64 {
        self.path_mean.data()[0]
    }

    fn check_conditions(&self, x: &Array, c: &Array) -> Result<()> {
        if c.cols() != self.classes() || c.rows() != x.rows() {
            return Err(Error::contract(format!(
                "conditions have shape {:?}, expected [{}, {}]",
                c.shape(),
                x.rows(),
                self.classes()
            )));
        }
        Ok(())
    }

    /// `x̂ = G(x, c)` with one condition row per input row.
    pub fn generate(&self, x: &Array, c: &Array) -> Result<Array> {
        self.check_conditions(x, c)?;
        let g = Graph::inference();
        let w = self.encoder.forward(&g, &g.constant(x.clone()))?;
        Ok(self.decoder.forward(&g, &w, &g.constant(c.clone()))?.array())
    }

    pub fn encode(&self, x: &Array) -> Result<Array> {
        let g = Graph::inference();
        Ok(self.encoder.forward(&g, &g.constant(x.clone()))?.array())
    }

    /// Discriminator output per sample, read as an in-distribution density.
    pub fn density(&self, f: &Classifier, x: &Array) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let xt = g.constant(x.clone());
        let feats = if self.discriminator.fusion {
            Some(f.forward(&g, &xt, Mode::Eval, None)?.penultimate)
        } else {
            None
        };
        Ok(self.discriminator.forward(&g, &xt, feats.as_ref())?.value().data().to_vec())
    }

    fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        generator_params_mut(&mut self.encoder, &mut self.decoder)
    }

    fn generator_params(&self) -> Vec<&Param> {
        let mut v = self.encoder.l1.params();
        v.extend(self.encoder.l2.params());
        v.extend(self.decoder.embed.params());
        v.extend(self.decoder.l1.params());
        v.extend(self.decoder.l2.params());
        v
    }
}

fn generator_params_mut<'a>(enc: &'a mut Encoder, dec: &'a mut Decoder) -> Vec<&'a mut Param> {
    let mut v = enc.l1.params_mut();
    v.extend(enc.l2.params_mut());
    v.extend(dec.embed.params_mut());
    v.extend(dec.l1.params_mut());
    v.extend(dec.l2.params_mut());
    v
}

impl Module for Pce {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.generator_params();
        v.extend(self.discriminator.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = generator_params_mut(&mut self.encoder, &mut self.decoder);
        v.extend(self.discriminator.params_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &Array)> {
        vec![("path.mean".into(), &self.path_mean)]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Array)> {
        vec![("path.mean".into(), &mut self.path_mean)]
    }
}

/// Generator-side loss terms for one batch, before weighting.
pub struct GeneratorTerms {
    pub adv: Tensor,
    pub reg: Tensor,
    pub kl: Tensor,
    pub rec: Tensor,
    /// Per-sample path lengths, `[n, 1]`.
    pub lengths: Tensor,
}

impl GeneratorTerms {
    /// `λ_adv·(adv + reg) + λ_f·kl + λ_rec·rec`.
    pub fn total(&self, config: &PceConfig) -> Result<Tensor> {
        self.adv
            .add(&self.reg)?
            .scale(config.lambda_adv)
            .add(&self.kl.scale(config.lambda_f))?
            .add(&self.rec.scale(config.lambda_rec))
    }
}

/// Build every generator loss term on `g`. The classifier and the
/// discriminator must already be frozen on `g`. Path-length terms are
/// skipped (zero) when `with_reg` is false.
#[allow(clippy::too_many_arguments)]
pub fn generator_terms(
    pce: &Pce,
    f: &Classifier,
    g: &Graph,
    x: &Tensor,
    c: &Tensor,
    fx: &Tensor,
    probe: &Tensor,
    with_reg: bool,
) -> Result<GeneratorTerms> {
    let (enc, dec) = (&pce.encoder, &pce.decoder);
    let w = enc.forward(g, x)?;
    let x_hat = dec.forward(g, &w, c)?;
    let fwd = f.forward(g, &x_hat, Mode::Eval, None)?;
    let feats = pce.discriminator.fusion.then_some(&fwd.penultimate);
    let d_fake = pce.discriminator.forward(g, &x_hat, feats)?;
    let adv = generator_adv_loss(&d_fake);
    let n = x.value().rows();
    let (lengths, reg) = if with_reg {
        let p = path_lengths(&x_hat, &w, probe)?;
        let r = path_length_penalty(&p, pce.path_target())?;
        (p, r)
    } else {
        (g.constant(Array::zeros(&[n, 1])), g.scalar(0.0))
    };
    let kl = kl_to_condition(&fwd.logits.softmax()?, c)?;
    let x_self = dec.forward(g, &w, fx)?;
    let x_cyc = dec.forward(g, &enc.forward(g, &x_hat)?, fx)?;
    let rec = reconstruction_term(x, &x_self, &w, &enc.forward(g, &x_self)?)?
        .add(&reconstruction_term(x, &x_cyc, &w, &enc.forward(g, &x_cyc)?)?)?;
    Ok(GeneratorTerms {
        adv,
        reg,
        kl,
        rec,
        lengths,
    })
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub l_reg: f64,
    pub l_f: f64,
    pub l_rec: f64,
    pub a: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub steps: Vec<StepRecord>,
    /// Per-epoch means of each loss column.
    pub epochs: Vec<StepRecord>,
}

impl TrainingCurve {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "epoch", "loss_d", "loss_g_adv", "l_reg", "l_f", "l_rec", "a"])?;
        for r in &self.steps {
            wr.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                fmt_f64(r.loss_d),
                fmt_f64(r.loss_g_adv),
                fmt_f64(r.l_reg),
                fmt_f64(r.l_f),
                fmt_f64(r.l_rec),
                fmt_f64(r.a),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn finite(v: f64, step: usize, loss: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            stage: "pce",
            step,
            loss,
        })
    }
}

/// Conditions for a batch: origin `k` is the classifier's prediction, the
/// counterfactual class is another class, `c[k] ~ U(0, 1)`.
pub fn batch_conditions(probs: &Array, rng: &mut Rng) -> Result<(Array, Vec<f64>)> {
    let k = probs.cols();
    let mut data = Vec::with_capacity(probs.len());
    let mut us = Vec::with_capacity(probs.rows());
    for (origin, _) in metrics::argmax_rows(probs) {
        let other = other_class(k, origin, rng);
        let (c, u) = sample_condition(k, origin, other, rng, None)?;
        data.extend_from_slice(c.values());
        us.push(u);
    }
    Ok((Array::new(vec![probs.rows(), k], data)?, us))
}

/// Train the explainer around the frozen classifier `f`.
pub fn train_pce(f: &Classifier, data: &LabeledSet, config: &PceConfig, rng: &mut Rng) -> Result<(Pce, TrainingCurve)> {
    config.validate()?;
    if data.dim() != f.dim() {
        return Err(Error::Shape {
            op: "train_pce",
            lhs: vec![data.dim()],
            rhs: vec![f.dim()],
        });
    }
    let mut pce = Pce::new(f, config, &mut rng.child("init"));
    let mut subset_rng = rng.child("subset");
    let take = ((data.len() as f64 * config.subset_fraction).round() as usize).max(2);
    let mut subset = subset_rng.sample_indices(data.len(), take);
    subset.sort_unstable();
    let x_all = data.features.select_rows(&subset);
    let probs_all = f.predict_proba(&x_all)?;
    let mut order_rng = rng.child("shuffle");
    let mut cond_rng = rng.child("conditions");
    let mut probe_rng = rng.child("probe");
    let mut opt_g = Adam::new(config.lr, config.beta1, config.beta2);
    let mut opt_d = Adam::new(config.lr, config.beta1, config.beta2);
    let with_adv = config.lambda_adv > 0.0;
    let mut curve = TrainingCurve::default();
    let mut step = 0;
    let batch = config.batch_size.max(1);
    let dim = f.dim();
    for epoch in 0..config.epochs {
        let order = order_rng.permutation(x_all.rows());
        let first_step = curve.steps.len();
        for chunk in order.chunks(batch) {
            let xb = x_all.select_rows(chunk);
            let pb = probs_all.select_rows(chunk);
            let (cb, _) = batch_conditions(&pb, &mut cond_rng)?;

            // Discriminator step, generator fixed.
            let x_hat = pce.generate(&xb, &cb)?;
            let gd = if with_adv { Graph::new() } else { Graph::inference() };
            gd.freeze(f.params());
            let feats = |t: &Tensor| -> Result<Option<Tensor>> {
                Ok(if pce.discriminator.fusion {
                    Some(f.forward(&gd, t, Mode::Eval, None)?.penultimate)
                } else {
                    None
                })
            };
            let xr = gd.constant(xb.clone());
            let xf = gd.constant(x_hat);
            let d_real = pce.discriminator.forward(&gd, &xr, feats(&xr)?.as_ref())?;
            let d_fake = pce.discriminator.forward(&gd, &xf, feats(&xf)?.as_ref())?;
            let loss_d = discriminator_loss(&d_real, &d_fake)?;
            let loss_d_value = finite(loss_d.item(), step, "loss-D")?;
            if with_adv {
                let weighted = loss_d.scale(config.lambda_adv);
                gd.backward(&weighted)?
                    .accumulate_into(pce.discriminator.params_mut());
                opt_d.step(&mut pce.discriminator.params_mut())?;
            }

            // Generator and encoder step, discriminator fixed.
            let g = Graph::new();
            g.freeze(f.params());
            g.freeze(pce.discriminator.params());
            let x = g.constant(xb);
            let c = g.constant(cb);
            let fx = g.constant(pb);
            let probe = g.constant(Array::new(vec![chunk.len(), dim], probe_rng.gaussian_vec(chunk.len() * dim))?);
            let terms = generator_terms(&pce, f, &g, &x, &c, &fx, &probe, with_adv)?;
            let total = terms.total(config)?;
            let record = StepRecord {
                step,
                epoch,
                loss_d: loss_d_value,
                loss_g_adv: finite(terms.adv.item(), step, "loss-G-adv")?,
                l_reg: finite(terms.reg.item(), step, "L_reg")?,
                l_f: finite(terms.kl.item(), step, "L_f")?,
                l_rec: finite(terms.rec.item(), step, "L_rec")?,
                a: pce.path_target(),
            };
            finite(total.item(), step, "total")?;
            g.backward(&total)?.accumulate_into(pce.generator_params_mut());
            opt_g.step(&mut pce.generator_params_mut())?;
            if with_adv {
                let lengths = terms.lengths.value();
                let mean_p = lengths.sum() / lengths.len() as f64;
                let a = pce.path_target();
                pce.path_mean = Array::scalar(a + (1.0 - config.path_decay) * (mean_p - a));
            }
            curve.steps.push(record);
            step += 1;
        }
        curve.epochs.push(epoch_mean(&curve.steps[first_step..], epoch, step));
    }
    Ok((pce, curve))
}

fn epoch_mean(rows: &[StepRecord], epoch: usize, step: usize) -> StepRecord {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&StepRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
    StepRecord {
        step,
        epoch,
        loss_d: avg(|r| r.loss_d),
        loss_g_adv: avg(|r| r.loss_g_adv),
        l_reg: avg(|r| r.l_reg),
        l_f: avg(|r| r.l_f),
        l_rec: avg(|r| r.l_rec),
        a: rows.last().map_or(0.0, |r| r.a),
    }
}

/// Mean over samples of the L1 distance `‖G(x, f(x)) − x‖₁`.
pub fn self_reconstruction_l1(pce: &Pce, f: &Classifier, x: &Array) -> Result<f64> {
    let rec = pce.generate(x, &f.predict_proba(x)?)?;
    let total: f64 = rec.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / x.rows().max(1) as f64)
}

/// Mean `KL(f(G(x, c)) ‖ c)` for freshly sampled conditions.
pub fn consistency_kl(pce: &Pce, f: &Classifier, x: &Array, rng: &mut Rng) -> Result<f64> {
    let (c, _) = batch_conditions(&f.predict_proba(x)?, rng)?;
    let p = f.predict_proba(&pce.generate(x, &c)?)?;
    let g = Graph::inference();
    Ok(kl_to_condition(&g.constant(p), &g.constant(c))?.item())
}

/// Accuracy of `D ≥ 0.5` at telling real rows from generated ones.
pub fn discriminator_accuracy(pce: &Pce, f: &Classifier, x: &Array, rng: &mut Rng) -> Result<f64> {
    let (c, _) = batch_conditions(&f.predict_proba(x)?, rng)?;
    let fake = pce.generate(x, &c)?;
    let real_hits = pce.density(f, x)?.iter().filter(|&&d| d >= 0.5).count();
    let fake_hits = pce.density(f, &fake)?.iter().filter(|&&d| d < 0.5).count();
    Ok((real_hits + fake_hits) as f64 / (2 * x.rows()).max(1) as f64)
}
