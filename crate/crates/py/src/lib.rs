//! Python bindings. Arrays cross the boundary as lists of rows.

use std::path::PathBuf;

use acelab_core::archive::{self, WeightArchive};
use acelab_core::classifier::{self as clf, ClassifierConfig};
use acelab_core::data::{self, LabeledSet, Split};
use acelab_core::experiment::{self, ExperimentConfig, Stage};
use acelab_core::nn::Rng;
use acelab_core::selective::{self, Decision};
use acelab_core::tensor::Array;
use acelab_core::{attacks, metrics, pce};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(acelab, AcelabError, PyException);

fn py_err(e: acelab_core::Error) -> PyErr {
    AcelabError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for acelab_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn array(rows: Vec<Vec<f64>>) -> PyResult<Array> {
    if rows.is_empty() {
        return Err(AcelabError::new_err("expected at least one row"));
    }
    Array::from_rows(&rows).py()
}

fn rows(a: &Array) -> Vec<Vec<f64>> {
    a.iter_rows().map(<[f64]>::to_vec).collect()
}

fn json_value(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

/// Two-Moons samples: `(features, labels)`.
#[pyfunction]
#[pyo3(signature = (n, noise=0.1, seed=0))]
fn two_moons(n: usize, noise: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let set = data::two_moons(n, noise, &mut Rng::new(seed)).py()?;
    Ok((rows(&set.features), set.labels))
}

#[pyfunction]
fn auc_roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::ScoredBinarySet::new(scores, labels).py()?.auc().py()
}

#[pyfunction]
#[pyo3(signature = (scores, labels, target=0.95))]
fn tnr_at_tpr(scores: Vec<f64>, labels: Vec<bool>, target: f64) -> PyResult<f64> {
    metrics::ScoredBinarySet::new(scores, labels).py()?.tnr_at_tpr(target).py()
}

#[pyfunction]
#[pyo3(signature = (probs, labels, bins=15))]
fn ece(probs: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    metrics::ece(&array(probs)?, &labels, bins).py()
}

#[pyfunction]
fn predictive_entropy(probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    clf::predictive_entropy(&array(probs)?).py()
}

/// The packaged default configuration as a JSON string.
#[pyfunction]
fn default_config() -> &'static str {
    experiment::DEFAULT_CONFIG
}

#[pyclass(module = "acelab")]
struct Classifier {
    inner: clf::Classifier,
}

#[pymethods]
impl Classifier {
    /// Train on `(x, y)`, selecting the checkpoint on `(eval_x, eval_y)`.
    /// `config` is a JSON object of classifier settings.
    #[staticmethod]
    #[pyo3(signature = (x, y, eval_x, eval_y, classes=2, config=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        eval_x: Vec<Vec<f64>>,
        eval_y: Vec<usize>,
        classes: usize,
        config: Option<&str>,
        seed: u64,
    ) -> PyResult<Self> {
        let config: ClassifierConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| AcelabError::new_err(e.to_string()))?,
            None => ClassifierConfig::default(),
        };
        let train = LabeledSet::new(array(x)?, y, Split::Train).py()?;
        let eval = LabeledSet::new(array(eval_x)?, eval_y, Split::Test).py()?;
        let (inner, _) = clf::train_classifier(&train, &eval, classes, &config, &mut Rng::new(seed)).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        let inner = archive::classifier_from_archive(&WeightArchive::load(&stem).py()?).py()?;
        Ok(Self { inner })
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        archive::classifier_archive(&self.inner).save(&stem).py()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict_proba(&array(x)?).py()?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&array(x)?).py()
    }

    /// Mean softmax over `passes` dropout-active forward passes.
    #[pyo3(signature = (x, passes=20, seed=0))]
    fn mc_dropout_proba(&self, x: Vec<Vec<f64>>, passes: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&clf::mc_dropout_proba(&self.inner, &array(x)?, passes, &mut Rng::new(seed)).py()?))
    }

    /// Fast-gradient-sign adversarial copies of `x` against labels `y`.
    fn fgsm(&self, x: Vec<Vec<f64>>, y: Vec<usize>, eps: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&attacks::fgsm(&self.inner, &array(x)?, &y, eps, None).py()?))
    }

    /// DeepFool adversarial points and per-row flip flags.
    #[pyo3(signature = (x, y, max_iter=50, eta=0.02))]
    fn deepfool(&self, x: Vec<Vec<f64>>, y: Vec<usize>, max_iter: usize, eta: f64) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
        let out = attacks::deepfool(&self.inner, &array(x)?, &y, max_iter, eta).py()?;
        Ok((rows(&out.adversarial), out.flipped))
    }
}

#[pyclass(module = "acelab")]
struct Explainer {
    inner: pce::Pce,
}

#[pymethods]
impl Explainer {
    /// Train around a frozen classifier. `config` is a JSON object of
    /// explainer settings.
    #[staticmethod]
    #[pyo3(signature = (classifier, x, y, config=None, seed=0))]
    fn train(classifier: &Classifier, x: Vec<Vec<f64>>, y: Vec<usize>, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: pce::PceConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| AcelabError::new_err(e.to_string()))?,
            None => pce::PceConfig::default(),
        };
        let set = LabeledSet::new(array(x)?, y, Split::Train).py()?;
        let (inner, _) = pce::train_pce(&classifier.inner, &set, &config, &mut Rng::new(seed)).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        let inner = archive::pce_from_archive(&WeightArchive::load(&stem).py()?).py()?;
        Ok(Self { inner })
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        archive::pce_archive(&self.inner).save(&stem).py()
    }

    /// Counterfactuals `G(x, c)`, one condition row per input row.
    fn generate(&self, x: Vec<Vec<f64>>, conditions: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.generate(&array(x)?, &array(conditions)?).py()?))
    }

    /// Discriminator density in (0, 1); `anchor` is the classifier the
    /// explainer was trained against.
    fn density(&self, anchor: &Classifier, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.density(&anchor.inner, &array(x)?).py()
    }

    /// Predict-or-abstain decisions at threshold `h`, as dicts.
    #[pyo3(signature = (classifier, anchor, x, h=0.5))]
    fn decide(&self, py: Python<'_>, classifier: &Classifier, anchor: &Classifier, x: Vec<Vec<f64>>, h: f64) -> PyResult<Vec<Py<PyAny>>> {
        let sc = selective::SelectiveClassifier::new(&classifier.inner, &anchor.inner, &self.inner, h).py()?;
        let decisions: Vec<Decision> = sc.decide(&array(x)?).py()?;
        decisions
            .iter()
            .map(|d| json_value(py, &serde_json::to_string(d).expect("decisions serialize")))
            .collect()
    }
}

/// A configured pipeline rooted at an output directory.
#[pyclass(module = "acelab")]
struct Experiment {
    inner: experiment::Experiment,
}

#[pymethods]
impl Experiment {
    /// `config` is a JSON string; the packaged default is used when omitted.
    #[new]
    #[pyo3(signature = (out, config=None, seed=None))]
    fn new(out: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => ExperimentConfig::from_json(text).py()?,
            None => ExperimentConfig::packaged_default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            inner: experiment::Experiment::new(cfg, Some(out)).py()?,
        })
    }

    /// Run one stage by name, e.g. `"gen-data"`.
    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<()> {
        let s = Stage::parse(stage).ok_or_else(|| AcelabError::new_err(format!("unknown stage `{stage}`")))?;
        py.detach(|| self.inner.run(s)).py()
    }

    /// Every stage, then the merged summary as a dict.
    fn run_all(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let summary = py.detach(|| self.inner.run_all()).py()?;
        json_value(py, &serde_json::to_string(&summary).expect("summary serializes"))
    }

    fn report(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let summary = self.inner.report().py()?;
        json_value(py, &serde_json::to_string(&summary).expect("summary serializes"))
    }

    fn classifier(&self, which: &str) -> PyResult<Classifier> {
        let (rel, stage) = match which {
            "baseline" => (experiment::paths::BASELINE, Stage::TrainClassifier),
            "finetuned" => (experiment::paths::FINETUNED, Stage::Finetune),
            other => return Err(AcelabError::new_err(format!("no classifier named `{other}`"))),
        };
        Ok(Classifier {
            inner: self.inner.load_classifier(rel, stage).py()?,
        })
    }

    fn explainer(&self) -> PyResult<Explainer> {
        Ok(Explainer {
            inner: self.inner.load_pce(experiment::paths::PCE, Stage::TrainPce).py()?,
        })
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }
}

#[pymodule]
fn acelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AcelabError", m.py().get_type::<AcelabError>())?;
    m.add("STAGES", Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    m.add_class::<Classifier>()?;
    m.add_class::<Explainer>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(tnr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(predictive_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
