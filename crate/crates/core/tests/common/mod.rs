#![allow(dead_code)]

use acelab_core::nn::{Dense, Init, Rng};
use acelab_core::tensor::{Array, Graph, Param, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

pub fn random_array(rng: &mut Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| scale * rng.gaussian()).collect()).unwrap()
}

/// Random point on the open simplex, one per row.
pub fn random_simplex(rng: &mut Rng, n: usize, k: usize) -> Array {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.05, 1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Array::new(vec![n, k], data).unwrap()
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// Largest relative error over differentiable elements.
    pub worst: f64,
    pub checked: usize,
    /// Elements that only agreed at a refined step.
    pub kinks: usize,
}

impl GradCheck {
    pub fn merge(&mut self, o: GradCheck) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.kinks += o.kinks;
    }
}

/// Compares every element of the selected parameters against central
/// differences with relative-error denominator max(|a|, |b|, 1e-8).
///
/// Differences below the rounding resolution of the loss count as agreement.
/// An element that fails at the default step is retried with steps 10× and
/// 100× smaller, since a ReLU or |·| kink inside the stencil is not a
/// gradient error; those are tallied as kinks.
pub fn max_grad_error<M>(
    model: &mut M,
    select: impl Fn(&mut M) -> Vec<&mut Param>,
    loss: impl Fn(&Graph, &M) -> Tensor,
) -> GradCheck {
    let g = Graph::new();
    let l = loss(&g, model);
    let base = l.item();
    let grads = g.backward(&l).unwrap();
    let analytic: Vec<Array> = select(model)
        .into_iter()
        .map(|p| grads.param(p).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect();
    drop(grads);
    drop(l);
    let eval = |m: &M| loss(&Graph::new(), m).item();
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR);
    let mut out = GradCheck::default();
    for (k, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let exact = a.data()[j];
            let orig = select(model)[k].value().data()[j];
            // error at step h, or zero when below the loss's rounding resolution
            let mut central = |h: f64| {
                select(model)[k].value_mut().data_mut()[j] = orig + h;
                let up = eval(model);
                select(model)[k].value_mut().data_mut()[j] = orig - h;
                let down = eval(model);
                select(model)[k].value_mut().data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let resolution = 16.0 * f64::EPSILON * up.abs().max(down.abs()).max(base.abs()).max(1.0) / h;
                if (exact - numeric).abs() <= resolution {
                    0.0
                } else {
                    rel(exact, numeric)
                }
            };
            let mut err = central(FD_STEP);
            if err > 1e-4 {
                // a kink inside the stencil; shrink it until the point is smooth
                let refined = [FD_STEP / 10.0, FD_STEP / 100.0].map(&mut central);
                let best = refined.into_iter().fold(f64::INFINITY, f64::min);
                if best <= 1e-4 {
                    out.kinks += 1;
                }
                err = err.min(best);
                if err > 1e-4 && std::env::var("GRAD_DEBUG").is_ok() {
                    eprintln!("param {k}[{j}] exact {exact:e} errors {err:e} {refined:?}");
                }
            }
            out.checked += 1;
            out.worst = out.worst.max(err);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum Act {
    Relu,
    Tanh,
    Sigmoid,
}

/// A randomly configured MLP with random (non-zero) biases.
#[derive(Clone, Debug)]
pub struct RandomNet {
    pub layers: Vec<Dense>,
    pub acts: Vec<Act>,
}

impl RandomNet {
    pub fn new(rng: &mut Rng, input: usize, output: usize, max_depth: usize, max_width: usize) -> Self {
        let depth = 1 + rng.below(max_depth);
        let mut dims = vec![input];
        for _ in 1..depth {
            dims.push(1 + rng.below(max_width));
        }
        dims.push(output);
        let mut layers = Vec::new();
        let mut acts = Vec::new();
        for i in 0..depth {
            let mut l = Dense::new(&format!("l{i}"), dims[i], dims[i + 1], Init::Xavier, rng);
            for b in l.bias.value_mut().data_mut() {
                *b = 0.3 * rng.gaussian();
            }
            layers.push(l);
            acts.push(match rng.below(3) {
                0 => Act::Relu,
                1 => Act::Tanh,
                _ => Act::Sigmoid,
            });
        }
        Self { layers, acts }
    }

    /// Activations between layers; the last layer is linear.
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (l, a)) in self.layers.iter().zip(&self.acts).enumerate() {
            h = l.forward(g, &h).unwrap();
            if i < last {
                h = match a {
                    Act::Relu => h.relu(),
                    Act::Tanh => h.tanh(),
                    Act::Sigmoid => h.sigmoid(),
                };
            }
        }
        h
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// O(n²) Mann–Whitney count.
pub fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for q in neg {
            if p > q {
                s += 1.0;
            } else if p == q {
                s += 0.5;
            }
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Sweep every candidate threshold; keep the largest whose TPR reaches the
/// target and report the share of negatives strictly below it.
pub fn brute_tnr(pos: &[f64], neg: &[f64], target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in pos.iter().chain(neg) {
        let tpr = pos.iter().filter(|&&p| p >= t).count() as f64 / pos.len() as f64;
        if tpr >= target && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the smallest score always reaches full TPR");
    neg.iter().filter(|&&q| q < t).count() as f64 / neg.len() as f64
}

use acelab_core::classifier::{cross_entropy, soft_cross_entropy, Classifier, ClassifierConfig, Mode};
use acelab_core::nn::Module;
use acelab_core::pce::{
    discriminator_loss, generator_adv_loss, generator_terms, kl_to_condition, path_length_penalty, path_lengths,
    reconstruction_term, Pce, PceConfig,
};

/// Two networks differentiated together.
pub struct Pair {
    pub a: RandomNet,
    pub b: RandomNet,
}

impl Pair {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.a.params_mut();
        v.extend(self.b.params_mut());
        v
    }
}

pub const LOSSES: [&str; 10] = [
    "cross_entropy",
    "soft_cross_entropy",
    "discriminator_loss",
    "generator_adv_loss",
    "kl_to_condition",
    "reconstruction",
    "path_length_penalty",
    "classifier_cross_entropy",
    "explainer_generator_objective",
    "explainer_discriminator_objective",
];

/// Worst gradient error of every system loss on networks drawn from `seed`.
pub fn loss_suite(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut rng = Rng::stream(seed, "gradcheck");
    let n = 2 + rng.below(5);
    let d = 1 + rng.below(4);
    let k = 2 + rng.below(3);
    let x = random_array(&mut rng, &[n, d], 1.0);
    let x2 = random_array(&mut rng, &[n, d], 1.0);
    let mut out = Vec::new();

    let mut net = RandomNet::new(&mut rng, d, k, 4, 16);
    let mut onehot = Array::zeros(&[n, k]);
    for i in 0..n {
        let c = rng.below(k);
        onehot.data_mut()[i * k + c] = 1.0;
    }
    let soft = random_simplex(&mut rng, n, k);
    let xa = x.clone();
    out.push((
        LOSSES[0],
        max_grad_error(&mut net, |m| m.params_mut(), |g, m| {
            cross_entropy(&m.forward(g, &g.constant(xa.clone())), &g.constant(onehot.clone())).unwrap()
        }),
    ));
    out.push((
        LOSSES[1],
        max_grad_error(&mut net, |m| m.params_mut(), |g, m| {
            let p = m.forward(g, &g.constant(xa.clone())).softmax().unwrap();
            soft_cross_entropy(&p, &g.constant(soft.clone())).unwrap()
        }),
    ));
    out.push((
        LOSSES[4],
        max_grad_error(&mut net, |m| m.params_mut(), |g, m| {
            let p = m.forward(g, &g.constant(xa.clone())).softmax().unwrap();
            kl_to_condition(&p, &g.constant(soft.clone())).unwrap()
        }),
    ));

    let mut disc = RandomNet::new(&mut rng, d, 1, 4, 16);
    let (xr, xf) = (x.clone(), x2.clone());
    out.push((
        LOSSES[2],
        max_grad_error(&mut disc, |m| m.params_mut(), |g, m| {
            let real = m.forward(g, &g.constant(xr.clone())).sigmoid();
            let fake = m.forward(g, &g.constant(xf.clone())).sigmoid();
            discriminator_loss(&real, &fake).unwrap()
        }),
    ));
    out.push((
        LOSSES[3],
        max_grad_error(&mut disc, |m| m.params_mut(), |g, m| {
            generator_adv_loss(&m.forward(g, &g.constant(xf.clone())).sigmoid())
        }),
    ));

    let m_lat = 1 + rng.below(4);
    let mut rec = Pair {
        a: RandomNet::new(&mut rng, d, d, 4, 16),
        b: RandomNet::new(&mut rng, d, m_lat, 4, 16),
    };
    out.push((
        LOSSES[5],
        max_grad_error(&mut rec, |m| m.params_mut(), |g, m| {
            let xt = g.constant(xa.clone());
            let xbar = m.a.forward(g, &xt);
            reconstruction_term(&xt, &xbar, &m.b.forward(g, &xt), &m.b.forward(g, &xbar)).unwrap()
        }),
    ));

    let mut gen = Pair {
        a: RandomNet::new(&mut rng, d, m_lat, 4, 16),
        b: RandomNet::new(&mut rng, m_lat, d, 4, 16),
    };
    let probe = random_array(&mut rng, &[n, d], 1.0);
    let a = rng.uniform_in(0.0, 1.0);
    out.push((
        LOSSES[6],
        max_grad_error(&mut gen, |m| m.params_mut(), |g, m| {
            let w = m.a.forward(g, &g.constant(xa.clone()));
            let o = m.b.forward(g, &w);
            path_length_penalty(&path_lengths(&o, &w, &g.constant(probe.clone())).unwrap(), a).unwrap()
        }),
    ));

    let ccfg = ClassifierConfig {
        hidden: 3 + rng.below(4),
        dropout: 0.2,
        ..ClassifierConfig::default()
    };
    let mut clf = Classifier::new(d, k, &ccfg, &mut rng.child("classifier")).unwrap();
    for p in clf.params_mut() {
        for v in p.value_mut().data_mut() {
            *v += 0.1 * rng.gaussian();
        }
    }
    out.push((
        LOSSES[7],
        max_grad_error(&mut clf, |m| m.params_mut(), |g, m| {
            let fwd = m
                .forward(g, &g.constant(xa.clone()), Mode::Train, Some(&mut Rng::new(seed)))
                .unwrap();
            cross_entropy(&fwd.logits, &g.constant(onehot.clone())).unwrap()
        }),
    ));

    let pcfg = PceConfig {
        latent: 2 + rng.below(4),
        hidden: 2 + rng.below(5),
        fusion: rng.below(2) == 0,
        ..PceConfig::default()
    };
    let mut pce = Pce::new(&clf, &pcfg, &mut rng.child("pce"));
    pce.path_mean = Array::scalar(rng.uniform_in(0.0, 1.0));
    for l in [
        &mut pce.encoder.l1,
        &mut pce.encoder.l2,
        &mut pce.decoder.embed,
        &mut pce.decoder.l1,
        &mut pce.decoder.l2,
        &mut pce.discriminator.t1,
        &mut pce.discriminator.t2,
        &mut pce.discriminator.head,
    ] {
        for v in l.bias.value_mut().data_mut() {
            *v = 0.3 * rng.gaussian();
        }
    }
    let c = random_simplex(&mut rng, n, k);
    let fx = clf.predict_proba(&x).unwrap();
    fn gen_params(p: &mut Pce) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(p.encoder.l1.params_mut());
        v.extend(p.encoder.l2.params_mut());
        v.extend(p.decoder.embed.params_mut());
        v.extend(p.decoder.l1.params_mut());
        v.extend(p.decoder.l2.params_mut());
        v
    }
    out.push((
        LOSSES[8],
        max_grad_error(&mut pce, gen_params, |g, p| {
            g.freeze(clf.params());
            g.freeze(p.discriminator.params());
            let t = generator_terms(
                p,
                &clf,
                g,
                &g.constant(xa.clone()),
                &g.constant(c.clone()),
                &g.constant(fx.clone()),
                &g.constant(probe.clone()),
                true,
            )
            .unwrap();
            t.total(&pcfg).unwrap()
        }),
    ));
    let fake = pce.generate(&x, &c).unwrap();
    out.push((
        LOSSES[9],
        max_grad_error(&mut pce, |p| p.discriminator.params_mut(), |g, p| {
            g.freeze(clf.params());
            let feats = |v: &Array| {
                p.discriminator
                    .fusion
                    .then(|| clf.forward(g, &g.constant(v.clone()), Mode::Eval, None).unwrap().penultimate)
            };
            let real = p.discriminator.forward(g, &g.constant(xa.clone()), feats(&xa).as_ref()).unwrap();
            let gen = p.discriminator.forward(g, &g.constant(fake.clone()), feats(&fake).as_ref()).unwrap();
            discriminator_loss(&real, &gen).unwrap().scale(pcfg.lambda_adv)
        }),
    ));
    out
}

/// Random scored set with n ≤ 50, both classes present and frequent ties.
pub fn random_scored(rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let n = 2 + rng.below(49);
    let n_pos = 1 + rng.below(n - 1);
    // coarse grids force ties; fine ones exercise the tie-free path
    let levels = [3.0, 10.0, 1e6][rng.below(3)];
    let mut draw = || (rng.uniform() * levels).floor() / levels;
    let pos: Vec<f64> = (0..n_pos).map(|_| draw()).collect();
    let neg: Vec<f64> = (n_pos..n).map(|_| draw()).collect();
    (pos, neg)
}

/// Worst AUC deviation and count of TNR mismatches over `instances` random sets.
pub fn metric_oracle_suite(instances: usize, seed: u64) -> (f64, usize) {
    use acelab_core::metrics::ScoredBinarySet;
    let mut rng = Rng::stream(seed, "metric-oracles");
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for _ in 0..instances {
        let (pos, neg) = random_scored(&mut rng);
        let target = [0.95, 0.5, 1.0, rng.uniform_in(0.01, 1.0)][rng.below(4)];
        let set = ScoredBinarySet::from_groups(&pos, &neg).unwrap();
        worst = worst.max((set.auc().unwrap() - brute_auc(&pos, &neg)).abs());
        if set.tnr_at_tpr(target).unwrap() != brute_tnr(&pos, &neg, target) {
            mismatches += 1;
        }
    }
    (worst, mismatches)
}

/// A configuration small enough to run every stage in seconds.
pub fn tiny_config(seed: u64) -> acelab_core::experiment::ExperimentConfig {
    let mut c = acelab_core::experiment::ExperimentConfig::packaged_default();
    c.seed = seed;
    c.data.n = 200;
    c.data.near_ood_n = 40;
    c.data.far_ood_n = 40;
    c.classifier.epochs = 5;
    c.classifier.hidden = 16;
    c.pce.epochs = 2;
    c.pce.latent = 8;
    c.pce.hidden = 16;
    c.ace.finetune_epochs = 2;
    c.eval.mc_samples = 3;
    c.eval.ensemble_size = 2;
    c.eval.traversal_queries = 4;
    c.eval.traversal_steps = 3;
    c.attacks.fgsm_eps = vec![0.0, 0.1];
    c.attacks.deepfool_iters = vec![0, 2];
    c.attacks.deepfool_best_iters = 5;
    c.attacks.cw_iters = vec![0, 5];
    c
}

/// Affine logits `x W + b`; DeepFool's first step on it has a closed form.
pub struct AffineModel {
    pub w: Array,
    pub b: Array,
}

impl acelab_core::attacks::LogitModel for AffineModel {
    fn classes(&self) -> usize {
        self.b.len()
    }

    fn logits_on(&self, g: &Graph, x: &Tensor) -> acelab_core::Result<Tensor> {
        x.matmul(&g.constant(self.w.clone()))?.add(&g.constant(self.b.clone()))
    }
}

/// Largest deviation of one DeepFool iteration from the minimal affine
/// perturbation `|f_l| / ‖w_l‖² · w_l`, with `l` the closest boundary.
pub fn deepfool_affine_error(instances: usize, seed: u64) -> f64 {
    let mut rng = Rng::stream(seed, "deepfool-affine");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = 1 + rng.below(5);
        let k = 2 + rng.below(4);
        let model = AffineModel {
            w: random_array(&mut rng, &[d, k], 1.0),
            b: random_array(&mut rng, &[k], 1.0),
        };
        let x = random_array(&mut rng, &[8, d], 1.0);
        let logits: Vec<Vec<f64>> = x
            .iter_rows()
            .map(|r| (0..k).map(|j| model.b.data()[j] + (0..d).map(|i| r[i] * model.w.data()[i * k + j]).sum::<f64>()).collect())
            .collect();
        let y: Vec<usize> = logits
            .iter()
            .map(|l| (0..k).fold(0, |best, j| if l[j] > l[best] { j } else { best }))
            .collect();
        let out = acelab_core::attacks::deepfool(&model, &x, &y, 1, 0.02).unwrap();
        for (i, row) in out.perturbation.iter_rows().enumerate() {
            let col = |j: usize| (0..d).map(|a| model.w.data()[a * k + j]).collect::<Vec<f64>>();
            let wy = col(y[i]);
            let mut best: Option<(f64, Vec<f64>, f64)> = None;
            for j in (0..k).filter(|&j| j != y[i]) {
                let wl: Vec<f64> = col(j).iter().zip(&wy).map(|(a, b)| a - b).collect();
                let fl = logits[i][j] - logits[i][y[i]];
                let norm2: f64 = wl.iter().map(|v| v * v).sum();
                let dist = fl.abs() / norm2.sqrt();
                if best.as_ref().is_none_or(|b| dist < b.0) {
                    best = Some((dist, wl, fl.abs() / norm2));
                }
            }
            let (_, wl, scale) = best.unwrap();
            for (r, w) in row.iter().zip(&wl) {
                worst = worst.max((r - scale * w).abs());
            }
        }
    }
    worst
}
