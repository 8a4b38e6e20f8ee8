//! Experiment configuration and the staged pipeline. Every stage reads its
//! inputs from the output directory and writes its own artifacts there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ace::{self, AceConfig};
use crate::archive::{self, write_atomic, WeightArchive};
use crate::attacks::{self, AttackConfig};
use crate::classifier::{
    label_aid, mc_dropout_proba, predictive_entropy, train_classifier, train_ensemble, Classifier, ClassifierConfig,
    Ensemble, ProbabilisticModel,
};
use crate::data::{
    far_ood_uniform, near_ood_moons, standardize, stratified_split, two_moons, LabeledSet, SampleBox, Split, Standardizer,
};
use crate::error::{Error, Result};
use crate::metrics::{self, ood_eval, Direction, ScoredBinarySet};
use crate::nn::Rng;
use crate::pce::{self, train_pce, Pce, PceConfig, TrainingCurve};
use crate::selective::{coverage_row, write_decisions_csv, SelectiveClassifier};

/// The packaged default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/two-moons-default.json");

/// `model → dataset → metric → value`.
pub type Metrics = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

fn put(m: &mut Metrics, model: &str, dataset: &str, metric: &str, v: f64) {
    m.entry(model.into()).or_default().entry(dataset.into()).or_default().insert(metric.into(), v);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub noise: f64,
    pub train_fraction: f64,
    pub near_ood_n: usize,
    pub far_ood_n: usize,
    /// Far-OOD box is `[-w, w]^d` in standardized units.
    pub far_box_half_width: f64,
    pub far_exclusion_radius: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            noise: 0.1,
            train_fraction: 0.8,
            near_ood_n: 400,
            far_ood_n: 400,
            far_box_half_width: 4.0,
            far_exclusion_radius: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mc_samples: usize,
    /// Share of the test set labelled ambiguous by MC-dropout entropy.
    pub aid_fraction: f64,
    /// Seed-ensemble baseline size; 0 disables it.
    pub ensemble_size: usize,
    pub tpr_target: f64,
    pub traversal_queries: usize,
    pub traversal_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: 20,
            aid_fraction: 0.05,
            ensemble_size: 5,
            tpr_target: 0.95,
            traversal_queries: 100,
            traversal_steps: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectiveConfig {
    pub h: f64,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        Self { h: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub pce: PceConfig,
    pub ace: AceConfig,
    pub selective: SelectiveConfig,
    pub eval: EvalConfig,
    pub attacks: AttackConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            pce: PceConfig::default(),
            ace: AceConfig::default(),
            selective: SelectiveConfig::default(),
            eval: EvalConfig::default(),
            attacks: AttackConfig::default(),
            out_dir: PathBuf::from("runs/two-moons"),
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate. Unknown keys and invalid values are all reported
    /// together.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_ignored::deserialize(de, |path| unknown.push(format!("{path}: unknown key")))
            .map_err(|e| Error::Config {
                keys: vec![e.to_string()],
            })?;
        if !unknown.is_empty() {
            return Err(Error::Config { keys: unknown });
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn packaged_default() -> Self {
        Self::from_json(DEFAULT_CONFIG).expect("packaged config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(e) = self.pce.validate() {
            bad.push(format!("pce: {e}"));
        }
        let mut check = |ok: bool, key: &str, why: &str| {
            if !ok {
                bad.push(format!("{key}: {why}"));
            }
        };
        let d = &self.data;
        check(d.n > 0 && d.n.is_multiple_of(2), "data.n", "must be positive and even");
        check(d.near_ood_n.is_multiple_of(2), "data.near_ood_n", "must be even");
        check(d.noise >= 0.0, "data.noise", "must be non-negative");
        check(d.train_fraction > 0.0 && d.train_fraction < 1.0, "data.train_fraction", "must lie in (0, 1)");
        check(d.far_box_half_width > 0.0, "data.far_box_half_width", "must be positive");
        check(d.far_exclusion_radius >= 0.0, "data.far_exclusion_radius", "must be non-negative");
        let c = &self.classifier;
        check(c.hidden > 0, "classifier.hidden", "must be positive");
        check((0.0..1.0).contains(&c.dropout), "classifier.dropout", "must lie in [0, 1)");
        check(c.lr > 0.0, "classifier.lr", "must be positive");
        check(c.ece_bins > 0, "classifier.ece_bins", "must be positive");
        let a = &self.ace;
        check(a.m >= 1, "ace.m", "must be at least 1");
        check((0.0..=1.0).contains(&a.rho), "ace.rho", "must lie in [0, 1]");
        check(a.source_fraction > 0.0 && a.source_fraction <= 1.0, "ace.source_fraction", "must lie in (0, 1]");
        check(a.finetune_lr > 0.0, "ace.finetune_lr", "must be positive");
        check((0.0..=1.0).contains(&self.selective.h), "selective.h", "must lie in [0, 1]");
        let e = &self.eval;
        check(e.mc_samples >= 1, "eval.mc_samples", "must be at least 1");
        check(e.aid_fraction > 0.0 && e.aid_fraction <= 1.0, "eval.aid_fraction", "must lie in (0, 1]");
        check(e.ensemble_size != 1, "eval.ensemble_size", "must be 0 or at least 2");
        check(e.tpr_target > 0.0 && e.tpr_target <= 1.0, "eval.tpr_target", "must lie in (0, 1]");
        check(e.traversal_steps >= 2, "eval.traversal_steps", "must be at least 2");
        let t = &self.attacks;
        check(t.fgsm_eps.iter().all(|&e| e >= 0.0), "attacks.fgsm_eps", "must be non-negative");
        check(t.fgsm_eps.contains(&0.0), "attacks.fgsm_eps", "must include 0");
        check(t.deepfool_iters.contains(&0), "attacks.deepfool_iters", "must include 0");
        check(t.cw_iters.contains(&0), "attacks.cw_iters", "must include 0");
        check(t.cw_kappa.iter().all(|&k| k >= 0.0), "attacks.cw_kappa", "must be non-negative");
        check(t.deepfool_eta > 0.0, "attacks.deepfool_eta", "must be positive");
        check(t.cw_lr > 0.0, "attacks.cw_lr", "must be positive");
        check(t.box_std >= 0.0, "attacks.box_std", "must be non-negative");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys: bad })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainClassifier,
    TrainPce,
    Augment,
    Finetune,
    Evaluate,
    Attack,
    Ablate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainClassifier,
        Stage::TrainPce,
        Stage::Augment,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Attack,
        Stage::Ablate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainClassifier => "train-classifier",
            Stage::TrainPce => "train-pce",
            Stage::Augment => "augment",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Attack => "attack",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Artifact paths relative to the output directory.
pub mod paths {
    pub const TRAIN: &str = "data/train.csv";
    pub const TEST: &str = "data/test.csv";
    pub const NEAR_OOD: &str = "data/near_ood.csv";
    pub const FAR_OOD: &str = "data/far_ood.csv";
    pub const STANDARDIZER: &str = "data/standardizer.json";
    pub const AUGMENTED: &str = "data/augmented.csv";
    pub const MIXED: &str = "data/mixed.csv";
    pub const AID: &str = "data/aid_indices.csv";
    pub const BASELINE: &str = "models/baseline";
    pub const PCE: &str = "models/pce";
    pub const FINETUNED: &str = "models/finetuned";
    pub const DECISIONS: &str = "decisions.csv";
    pub const SWEEP: &str = "sweeps/attacks.csv";
    pub const SUMMARY: &str = "summary.json";
}

/// One configured run rooted at an output directory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

const CLASSES: usize = 2;
const SETS: [&str; 3] = ["test", "near_ood", "far_ood"];

struct Sets {
    train: LabeledSet,
    test: LabeledSet,
    near: LabeledSet,
    far: LabeledSet,
}

impl Sets {
    fn named(&self) -> [(&'static str, &LabeledSet); 3] {
        [("test", &self.test), ("near_ood", &self.near), ("far_ood", &self.far)]
    }
}

impl Experiment {
    /// `out` overrides the configured output directory.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.unwrap_or_else(|| config.out_dir.clone());
        Ok(Self { config, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn rng(&self, label: &str) -> Rng {
        Rng::stream(self.config.seed, label)
    }

    fn require(&self, rel: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() || (rel.starts_with("models/") && WeightArchive::exists(&p)) {
            Ok(p)
        } else {
            Err(Error::Dependency { path: p, stage: stage.name() })
        }
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainClassifier => self.train_classifier(),
            Stage::TrainPce => self.train_pce(),
            Stage::Augment => self.augment(),
            Stage::Finetune => self.finetune(),
            Stage::Evaluate => self.evaluate(),
            Stage::Attack => self.attack(),
            Stage::Ablate => self.ablate(),
            Stage::Report => self.report().map(|_| ()),
        }
    }

    /// Every stage in order; returns the report.
    pub fn run_all(&self) -> Result<Summary> {
        for s in &Stage::ALL[..Stage::ALL.len() - 1] {
            self.run(*s)?;
        }
        self.report()
    }

    fn write_metrics(&self, stage: Stage, m: &Metrics) -> Result<()> {
        let text = serde_json::to_string_pretty(m)?;
        write_atomic(&self.path(&format!("metrics/{}.json", stage.name())), text.as_bytes())
    }

    pub fn read_metrics(&self, stage: Stage) -> Result<Metrics> {
        let p = self.require(&format!("metrics/{}.json", stage.name()), stage)?;
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    fn write_set(&self, rel: &str, set: &LabeledSet) -> Result<()> {
        let mut buf = Vec::new();
        set.write_csv(&mut buf)?;
        write_atomic(&self.path(rel), &buf)
    }

    fn read_set(&self, rel: &str, split: Split) -> Result<LabeledSet> {
        let p = self.require(rel, Stage::GenData)?;
        LabeledSet::read_csv(fs::File::open(p)?, split)
    }

    fn sets(&self) -> Result<Sets> {
        Ok(Sets {
            train: self.read_set(paths::TRAIN, Split::Train)?,
            test: self.read_set(paths::TEST, Split::Test)?,
            near: self.read_set(paths::NEAR_OOD, Split::Test)?,
            far: self.read_set(paths::FAR_OOD, Split::Test)?,
        })
    }

    fn save_classifier(&self, rel: &str, c: &Classifier) -> Result<()> {
        archive::classifier_archive(c).save(&self.path(rel))
    }

    pub fn load_classifier(&self, rel: &str, stage: Stage) -> Result<Classifier> {
        let p = self.require(rel, stage)?;
        archive::classifier_from_archive(&WeightArchive::load(&p)?)
    }

    pub fn load_pce(&self, rel: &str, stage: Stage) -> Result<Pce> {
        let p = self.require(rel, stage)?;
        archive::pce_from_archive(&WeightArchive::load(&p)?)
    }

    fn write_json<T: Serialize>(&self, rel: &str, v: &T) -> Result<()> {
        write_atomic(&self.path(rel), serde_json::to_string_pretty(v)?.as_bytes())
    }

    fn write_with(&self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        write_atomic(&self.path(rel), &buf)
    }

    fn gen_data(&self) -> Result<()> {
        let d = &self.config.data;
        let raw = two_moons(d.n, d.noise, &mut self.rng("moons"))?;
        let (train, test) = stratified_split(&raw, d.train_fraction, &mut self.rng("split"));
        let near = near_ood_moons(d.near_ood_n, d.noise, &mut self.rng("near_ood"))?;
        let (standardizer, sets) = standardize(&train, &[&train, &test, &near])?;
        let far = far_ood_uniform(
            d.far_ood_n,
            &SampleBox::square(d.far_box_half_width, train.dim()),
            &sets[0].features,
            d.far_exclusion_radius,
            &mut self.rng("far_ood"),
        )?;
        self.write_set(paths::TRAIN, &sets[0])?;
        self.write_set(paths::TEST, &sets[1])?;
        self.write_set(paths::NEAR_OOD, &sets[2])?;
        self.write_set(paths::FAR_OOD, &far)?;
        self.write_json(paths::STANDARDIZER, &standardizer)?;
        let mut m = Metrics::new();
        for (name, set) in [("train", &sets[0]), ("test", &sets[1]), ("near_ood", &sets[2]), ("far_ood", &far)] {
            put(&mut m, "data", name, "n", set.len() as f64);
        }
        self.write_metrics(Stage::GenData, &m)
    }

    pub fn standardizer(&self) -> Result<Standardizer> {
        let p = self.require(paths::STANDARDIZER, Stage::GenData)?;
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    fn ensemble_seeds(&self) -> Vec<u64> {
        let mut r = self.rng("ensemble");
        (0..self.config.eval.ensemble_size).map(|_| r.next_u64()).collect()
    }

    fn train_classifier(&self) -> Result<()> {
        let s = self.sets()?;
        let cfg = &self.config.classifier;
        let (f, report) = train_classifier(&s.train, &s.test, CLASSES, cfg, &mut self.rng("classifier"))?;
        self.save_classifier(paths::BASELINE, &f)?;
        self.write_json("curves/baseline.json", &report)?;
        let mut m = Metrics::new();
        let record = |m: &mut Metrics, name: &str, probs: &crate::tensor::Array| -> Result<()> {
            put(m, name, "test", "accuracy", metrics::accuracy(probs, &s.test.labels));
            put(m, name, "test", "ece", metrics::ece(probs, &s.test.labels, cfg.ece_bins)?);
            Ok(())
        };
        record(&mut m, "baseline", &f.predict_proba(&s.test.features)?)?;
        if let Some(r) = report.selected_record() {
            put(&mut m, "baseline", "training", "selected_epoch", r.epoch as f64);
        }
        let seeds = self.ensemble_seeds();
        if seeds.len() >= 2 {
            let (ens, _) = train_ensemble(&s.train, &s.test, CLASSES, cfg, &seeds)?;
            for (i, member) in ens.members.iter().enumerate() {
                self.save_classifier(&format!("models/ensemble-{i}"), member)?;
            }
            record(&mut m, "ensemble", &ens.proba(&s.test.features)?)?;
        }
        self.write_metrics(Stage::TrainClassifier, &m)
    }

    fn load_ensemble(&self) -> Result<Option<Ensemble>> {
        let n = self.config.eval.ensemble_size;
        if n < 2 {
            return Ok(None);
        }
        let members = (0..n)
            .map(|i| self.load_classifier(&format!("models/ensemble-{i}"), Stage::TrainClassifier))
            .collect::<Result<_>>()?;
        Ok(Some(Ensemble { members }))
    }

    /// Consistency, discriminator and density numbers for a trained explainer.
    fn pce_metrics(&self, name: &str, pce: &Pce, f: &Classifier, curve: &TrainingCurve, s: &Sets, m: &mut Metrics) -> Result<()> {
        let r = self.rng(&format!("{name}-eval"));
        let x = &s.train.features;
        put(m, name, "train", "self_reconstruction_l1", pce::self_reconstruction_l1(pce, f, x)?);
        put(m, name, "train", "kl", pce::consistency_kl(pce, f, x, &mut r.child("kl"))?);
        put(m, name, "train", "discriminator_accuracy", pce::discriminator_accuracy(pce, f, x, &mut r.child("disc"))?);
        if let (Some(first), Some(last)) = (curve.epochs.first(), curve.epochs.last()) {
            put(m, name, "curve", "kl_first_epoch", first.l_f);
            put(m, name, "curve", "kl_final_epoch", last.l_f);
            if first.l_f > 0.0 {
                put(m, name, "curve", "kl_ratio", last.l_f / first.l_f);
            }
            put(m, name, "curve", "loss_d_final_epoch", last.loss_d);
        }
        let h = self.config.selective.h;
        let density_test = pce.density(f, &s.test.features)?;
        for (set, data) in [("train", &s.train), ("test", &s.test), ("near_ood", &s.near), ("far_ood", &s.far)] {
            let dens = pce.density(f, &data.features)?;
            let n = dens.len().max(1) as f64;
            put(m, name, set, "mean_density", dens.iter().sum::<f64>() / n);
            put(m, name, set, "abstention_rate", dens.iter().filter(|&&d| d < h).count() as f64 / n);
            if set == "near_ood" || set == "far_ood" {
                let det = ood_eval(&density_test, &dens, Direction::HighIsInDistribution)?;
                put(m, name, set, "density_auc", det.auc);
                put(m, name, set, "density_tnr_at_tpr95", det.tnr_at_tpr95);
            }
        }
        Ok(())
    }

    fn train_pce(&self) -> Result<()> {
        let s = self.sets()?;
        let f = self.load_classifier(paths::BASELINE, Stage::TrainClassifier)?;
        let (pce, curve) = train_pce(&f, &s.train, &self.config.pce, &mut self.rng("pce"))?;
        archive::pce_archive(&pce).save(&self.path(paths::PCE))?;
        self.write_with("curves/pce.csv", |b| curve.write_csv(b))?;
        let mut m = Metrics::new();
        self.pce_metrics("pce", &pce, &f, &curve, &s, &mut m)?;
        self.write_metrics(Stage::TrainPce, &m)
    }

    fn augment(&self) -> Result<()> {
        let s = self.sets()?;
        let f = self.load_classifier(paths::BASELINE, Stage::TrainClassifier)?;
        let pce = self.load_pce(paths::PCE, Stage::TrainPce)?;
        let r = self.rng("augment");
        let idx = ace::source_subset(&s.train, self.config.ace.source_fraction, &mut r.child("source"))?;
        let mut aug = ace::generate_ace(&pce, &f, &s.train.subset(&idx), self.config.ace.m, &mut r.child("conditions"))?;
        for a in &mut aug {
            a.source_index = idx[a.source_index];
        }
        self.write_with(paths::AUGMENTED, |b| ace::write_augmented_csv(&aug, b))?;
        let us: Vec<f64> = aug.iter().map(|a| a.u).collect();
        let mut m = Metrics::new();
        put(&mut m, "ace", "augmented", "count", aug.len() as f64);
        put(&mut m, "ace", "augmented", "u_mean", us.iter().sum::<f64>() / us.len().max(1) as f64);
        put(&mut m, "ace", "augmented", "u_ks_statistic", ks_uniform(&us));
        self.write_metrics(Stage::Augment, &m)
    }

    fn finetune(&self) -> Result<()> {
        let s = self.sets()?;
        let f = self.load_classifier(paths::BASELINE, Stage::TrainClassifier)?;
        let p = self.require(paths::AUGMENTED, Stage::Augment)?;
        let aug = ace::read_augmented_csv(fs::File::open(p)?)?;
        let a = &self.config.ace;
        let mixed = ace::build_mixed(&s.train, &aug, a.rho, a.total, CLASSES, &mut self.rng("mix"))?;
        self.write_with(paths::MIXED, |b| mixed.write_csv(b))?;
        let (g, report) = ace::finetune(
            &f,
            &mixed,
            &s.test,
            &self.config.classifier,
            a.finetune_epochs,
            a.finetune_lr,
            &mut self.rng("finetune"),
        )?;
        self.save_classifier(paths::FINETUNED, &g)?;
        self.write_json("curves/finetune.json", &report)?;
        let probs = g.predict_proba(&s.test.features)?;
        let mut m = Metrics::new();
        put(&mut m, "finetuned", "test", "accuracy", metrics::accuracy(&probs, &s.test.labels));
        put(&mut m, "finetuned", "test", "ece", metrics::ece(&probs, &s.test.labels, self.config.classifier.ece_bins)?);
        put(&mut m, "finetuned", "mixed", "real_count", mixed.real_count as f64);
        put(&mut m, "finetuned", "mixed", "augmented_count", mixed.augmented_count as f64);
        self.write_metrics(Stage::Finetune, &m)
    }

    fn evaluate(&self) -> Result<()> {
        let s = self.sets()?;
        let cfg = &self.config;
        let f = self.load_classifier(paths::BASELINE, Stage::TrainClassifier)?;
        let g = self.load_classifier(paths::FINETUNED, Stage::Finetune)?;
        let pce = self.load_pce(paths::PCE, Stage::TrainPce)?;
        let ensemble = self.load_ensemble()?;
        let r = self.rng("evaluate");
        let passes = cfg.eval.mc_samples;
        let aid = label_aid(&f, &s.test, cfg.eval.aid_fraction, passes, &mut r.child("aid"))?;
        self.write_with(paths::AID, |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["index"])?;
            for i in &aid {
                w.write_record([i.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?;
        let mut is_aid = vec![false; s.test.len()];
        for &i in &aid {
            is_aid[i] = true;
        }

        let mut models: Vec<(&str, [crate::tensor::Array; 3])> = Vec::new();
        let named = s.named();
        let probs_of = |m: &dyn ProbabilisticModel| -> Result<[crate::tensor::Array; 3]> {
            Ok([m.proba(&s.test.features)?, m.proba(&s.near.features)?, m.proba(&s.far.features)?])
        };
        models.push(("baseline", probs_of(&f)?));
        models.push(("finetuned", probs_of(&g)?));
        let mc = r.child("mc");
        models.push((
            "mc_dropout",
            [
                mc_dropout_proba(&f, &s.test.features, passes, &mut mc.child("test"))?,
                mc_dropout_proba(&f, &s.near.features, passes, &mut mc.child("near_ood"))?,
                mc_dropout_proba(&f, &s.far.features, passes, &mut mc.child("far_ood"))?,
            ],
        ));
        if let Some(e) = &ensemble {
            models.push(("ensemble", probs_of(e)?));
        }

        let mut m = Metrics::new();
        let tpr = cfg.eval.tpr_target;
        for (name, probs) in &models {
            put(&mut m, name, "test", "accuracy", metrics::accuracy(&probs[0], &s.test.labels));
            put(&mut m, name, "test", "ece", metrics::ece(&probs[0], &s.test.labels, cfg.classifier.ece_bins)?);
            let pe: Vec<Vec<f64>> = probs.iter().map(predictive_entropy).collect::<Result<_>>()?;
            for (set, values) in SETS.iter().zip(&pe) {
                self.write_scores(&format!("scores/{name}_{set}_pe.csv"), values)?;
                put(&mut m, name, set, "mean_pe", mean(values));
            }
            let aid_set = ScoredBinarySet::new(pe[0].clone(), is_aid.clone())?;
            put(&mut m, name, "aid", "auc", aid_set.auc()?);
            put(&mut m, name, "aid", "tnr_at_tpr95", aid_set.tnr_at_tpr(tpr)?);
            let aid_pe: Vec<f64> = aid.iter().map(|&i| pe[0][i]).collect();
            put(&mut m, name, "aid", "mean_pe", mean(&aid_pe));
            for (k, set) in [(1, "near_ood"), (2, "far_ood")] {
                let ood = ScoredBinarySet::from_groups(&pe[k], &pe[0])?;
                put(&mut m, name, set, "auc", ood.auc()?);
                put(&mut m, name, set, "tnr_at_tpr95", ood.tnr_at_tpr(tpr)?);
            }
        }

        let density: Vec<Vec<f64>> = named.iter().map(|(_, set)| pce.density(&f, &set.features)).collect::<Result<_>>()?;
        for ((set, _), values) in named.iter().zip(&density) {
            self.write_scores(&format!("scores/pce_{set}_density.csv"), values)?;
            put(&mut m, "pce", set, "mean_density", mean(values));
        }
        for (k, set) in [(1, "near_ood"), (2, "far_ood")] {
            let flipped = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
            let det = ScoredBinarySet::from_groups(&flipped(&density[k]), &flipped(&density[0]))?;
            put(&mut m, "pce", set, "density_auc", det.auc()?);
            put(&mut m, "pce", set, "density_tnr_at_tpr95", det.tnr_at_tpr(tpr)?);
        }

        let sc = SelectiveClassifier::new(&g, &f, &pce, cfg.selective.h)?;
        let decisions: Vec<_> = named.iter().map(|(_, set)| sc.decide(&set.features)).collect::<Result<_>>()?;
        let rows: Vec<(&str, &[_])> = named.iter().zip(&decisions).map(|((n, _), d)| (*n, &d[..])).collect();
        self.write_with(paths::DECISIONS, |b| write_decisions_csv(&rows, b))?;
        for ((set, data), d) in named.iter().zip(&decisions) {
            let row = coverage_row(set, d, &data.labels)?;
            put(&mut m, "selective", set, "abstention_rate", row.abstention_rate);
            put(&mut m, "selective", set, "mean_density", row.mean_density);
            if let Some(a) = row.covered_accuracy {
                put(&mut m, "selective", set, "covered_accuracy", a);
            }
            if let Some(e) = row.covered_mean_entropy {
                put(&mut m, "selective", set, "covered_mean_pe", e);
            }
        }

        let q = cfg.eval.traversal_queries.min(s.test.len());
        let queries = s.test.features.select_rows(&(0..q).collect::<Vec<_>>());
        if q > 0 {
            let frac = ace::monotone_fraction(&pce, &f, &queries, cfg.eval.traversal_steps, 1e-9, &mut r.child("traversal"))?;
            put(&mut m, "pce", "traversal", "monotone_fraction", frac);
        }
        self.write_metrics(Stage::Evaluate, &m)
    }

    fn write_scores(&self, rel: &str, values: &[f64]) -> Result<()> {
        self.write_with(rel, |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["sample_id", "score"])?;
            for (i, v) in values.iter().enumerate() {
                w.write_record([i.to_string(), crate::data::fmt_f64(*v)])?;
            }
            w.flush()?;
            Ok(())
        })
    }

    fn attack(&self) -> Result<()> {
        let s = self.sets()?;
        let f = self.load_classifier(paths::BASELINE, Stage::TrainClassifier)?;
        let g = self.load_classifier(paths::FINETUNED, Stage::Finetune)?;
        let cfg = &self.config.attacks;
        let bounds = attacks::data_box(&s.train.features, cfg.box_std);
        let rows = attacks::robustness_sweep(&[("baseline", &f), ("finetuned", &g)], &s.test, cfg, &bounds)?;
        self.write_with(paths::SWEEP, |b| attacks::write_sweep_csv(&rows, b))?;
        let mut m = Metrics::new();
        for r in &rows {
            let key = format!("{}@{}", r.attack, r.magnitude);
            put(&mut m, &r.model, &key, "auc", r.auc);
            put(&mut m, &r.model, &key, "accuracy", r.accuracy);
        }
        self.write_metrics(Stage::Attack, &m)
    }

    /// Explainer configurations with one loss weight zeroed.
    pub fn ablation_arms(&self) -> [(&'static str, PceConfig); 3] {
        let base = &self.config.pce;
        [
            ("no-adv", PceConfig { lambda_adv: 0.0, ..base.clone() }),
            ("no-f", PceConfig { lambda_f: 0.0, ..base.clone() }),
            ("no-rec", PceConfig { lambda_rec: 0.0, ..base.clone() }),
        ]
    }

    fn ablate(&self) -> Result<()> {
        use rayon::prelude::*;
        let s = self.sets()?;
        let f = self.load_classifier(paths::BASELINE, Stage::TrainClassifier)?;
        let arms = self.ablation_arms();
        // Same stream as the full run so arms differ only in their weights.
        let trained: Vec<Result<(Pce, TrainingCurve)>> = crate::classifier::with_pool(|| {
            arms.par_iter()
                .map(|(_, cfg)| train_pce(&f, &s.train, cfg, &mut self.rng("pce")))
                .collect()
        });
        let mut m = Metrics::new();
        for ((tag, _), res) in arms.iter().zip(trained) {
            let (pce, curve) = res?;
            archive::pce_archive(&pce).save(&self.path(&format!("models/pce-{tag}")))?;
            self.write_with(&format!("curves/pce-{tag}.csv"), |b| curve.write_csv(b))?;
            self.pce_metrics(&format!("pce-{tag}"), &pce, &f, &curve, &s, &mut m)?;
        }
        self.write_metrics(Stage::Ablate, &m)
    }

    /// Merge every stage's metrics that exist into `summary.json`.
    pub fn report(&self) -> Result<Summary> {
        let mut stages = BTreeMap::new();
        for st in &Stage::ALL[..Stage::ALL.len() - 1] {
            if self.path(&format!("metrics/{}.json", st.name())).exists() {
                stages.insert(st.name().to_string(), self.read_metrics(*st)?);
            }
        }
        if stages.is_empty() {
            return Err(Error::Dependency {
                path: self.path("metrics"),
                stage: Stage::GenData.name(),
            });
        }
        let summary = Summary {
            seed: self.config.seed,
            stages,
        };
        self.write_json(paths::SUMMARY, &summary)?;
        Ok(summary)
    }
}

/// Every stage's metrics keyed by stage name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub stages: BTreeMap<String, Metrics>,
}

impl Summary {
    /// Look up `stage / model / dataset / metric`.
    pub fn get(&self, stage: &str, model: &str, dataset: &str, metric: &str) -> Option<f64> {
        self.stages.get(stage)?.get(model)?.get(dataset)?.get(metric).copied()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Kolmogorov–Smirnov distance between a sample and `U(0, 1)`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max)
}
