//! Python bindings: scale bound, logits, verification metrics, dataset
//! generation and training runs.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmcosine::autodiff::Tensor;
use mmcosine::config::{ExperimentConfig, KeyValues};
use mmcosine::datagen::{generate_classification, Dataset, GeneratorConfig};
use mmcosine::losses::{self, ClassifierHead};
use mmcosine::metrics::{self, DcfParams, ScoredTrial};
use mmcosine::model::FeatureBlocks;
use mmcosine::trainer::{self, RunResult};

fn err(e: mmcosine::Error) -> PyErr {
    match e {
        mmcosine::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn trials(scores: Vec<f64>, is_target: Vec<bool>) -> PyResult<Vec<ScoredTrial>> {
    if scores.len() != is_target.len() {
        return Err(PyValueError::new_err("scores and is_target differ in length"));
    }
    Ok(scores.into_iter().zip(is_target).map(|(s, t)| ScoredTrial::new(s, t)).collect())
}

/// Smallest cosine scale reaching posterior `p` for `n_classes` classes.
#[pyfunction]
#[pyo3(signature = (n_classes, p = 0.9))]
fn scale_lower_bound(n_classes: usize, p: f64) -> PyResult<f64> {
    losses::scale_lower_bound(n_classes, p).map_err(err)
}

#[pyfunction]
fn default_scale(n_classes: usize) -> f64 {
    losses::default_scale(n_classes)
}

/// `φa·W_a + φv·W_v + b` for row-major nested lists.
#[pyfunction]
#[pyo3(signature = (phi_a, phi_v, w_a, w_v, b = None))]
fn vanilla_logits(
    phi_a: Vec<Vec<f64>>,
    phi_v: Vec<Vec<f64>>,
    w_a: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    b: Option<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let head = ClassifierHead {
        w_a: matrix(w_a)?,
        w_v: matrix(w_v)?,
        b: b.map(|b| Tensor::new(vec![b.len()], b)).transpose().map_err(err)?,
    };
    let blocks = FeatureBlocks::new(matrix(phi_a)?, matrix(phi_v)?);
    Ok(to_rows(&head.vanilla_logits(&blocks).map_err(err)?))
}

/// `s·(cos θa + cos θv)` per sample and class.
#[pyfunction]
fn mmcosine_logits(
    phi_a: Vec<Vec<f64>>,
    phi_v: Vec<Vec<f64>>,
    w_a: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    s: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let head = ClassifierHead {
        w_a: matrix(w_a)?,
        w_v: matrix(w_v)?,
        b: None,
    };
    let blocks = FeatureBlocks::new(matrix(phi_a)?, matrix(phi_v)?);
    Ok(to_rows(&head.mmcosine_logits(&blocks, s).map_err(err)?))
}

#[pyfunction]
fn verification_score(emb_1: Vec<f64>, emb_2: Vec<f64>) -> PyResult<f64> {
    metrics::verification_score(&emb_1, &emb_2).map_err(err)
}

#[pyfunction]
fn eer(scores: Vec<f64>, is_target: Vec<bool>) -> PyResult<f64> {
    metrics::eer(&trials(scores, is_target)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scores, is_target, c_miss = 1.0, c_fa = 1.0, p_target = 0.01))]
fn min_dcf(scores: Vec<f64>, is_target: Vec<bool>, c_miss: f64, c_fa: f64, p_target: f64) -> PyResult<f64> {
    let params = DcfParams { c_miss, c_fa, p_target };
    metrics::min_dcf(&trials(scores, is_target)?, &params).map_err(err)
}

/// Flattens a `{key: value}` dict into config assignments.
fn assignments(options: Option<&Bound<'_, PyDict>>) -> PyResult<KeyValues> {
    let mut kv = KeyValues::default();
    if let Some(d) = options {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<bool>() {
                Ok(b) => b.to_string(),
                Err(_) => match v.extract::<Vec<usize>>() {
                    Ok(list) => list.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                    Err(_) => v.str()?.to_string(),
                },
            };
            kv.set(key, value);
        }
    }
    Ok(kv)
}

/// Resolves keyword options over the defaults; keys match the config file.
fn experiment(options: Option<&Bound<'_, PyDict>>) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::from_key_values(&assignments(options)?).map_err(err)?;
    Ok(cfg)
}

type SplitArrays = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>);

/// A generated train/test split.
#[pyclass(name = "Dataset", module = "mmcosine")]
struct PyDataset {
    inner: Dataset,
    generator: Option<GeneratorConfig>,
}

#[pymethods]
impl PyDataset {
    /// Generates a dataset; keyword options use config-file keys
    /// (`n_classes`, `dominance`, `data_seed`, ...).
    #[staticmethod]
    #[pyo3(signature = (**options))]
    fn generate(options: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = experiment(options)?;
        let inner = generate_classification(&cfg.data).map_err(err)?;
        Ok(PyDataset {
            inner,
            generator: Some(cfg.data),
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::load(path).map_err(err)?,
            generator: None,
        })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn dims(&self) -> (usize, usize) {
        (self.inner.dim_a, self.inner.dim_v)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    /// `(x_a rows, x_v rows, labels)` for `"train"` or `"test"`.
    fn arrays(&self, split: &str) -> PyResult<SplitArrays> {
        let samples = match split {
            "train" => &self.inner.train,
            "test" => &self.inner.test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        Ok((
            samples.iter().map(|s| s.x_a.clone()).collect(),
            samples.iter().map(|s| s.x_v.clone()).collect(),
            samples.iter().map(|s| s.label).collect(),
        ))
    }

    fn __repr__(&self) -> String {
        let spread = self.generator.as_ref().map_or(String::new(), |g| format!(", dominance={}", g.dominance));
        format!(
            "Dataset(n_classes={}, n_train={}, n_test={}, seed={}{spread})",
            self.inner.n_classes,
            self.inner.train.len(),
            self.inner.test.len(),
            self.inner.seed
        )
    }
}

/// Outcome of one training run.
#[pyclass(name = "RunResult", module = "mmcosine")]
struct PyRunResult {
    inner: RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn joint_acc(&self) -> f64 {
        self.inner.test.joint_acc
    }

    #[getter]
    fn approx_acc(&self) -> (f64, f64) {
        (self.inner.test.approx_acc_a, self.inner.test.approx_acc_v)
    }

    /// `(audio, visual)` linear-probe accuracy, or `None` when probing was off.
    #[getter]
    fn probe(&self) -> Option<(f64, f64)> {
        self.inner.probe.map(|p| (p.acc_a, p.acc_v))
    }

    #[getter]
    fn probe_gap(&self) -> Option<f64> {
        self.inner.probe.map(|p| p.gap())
    }

    #[getter]
    fn final_norm_ratio(&self) -> PyResult<f64> {
        self.inner.final_norm_ratio().map_err(err)
    }

    #[getter]
    fn norm_ratio_trajectory(&self) -> Vec<(usize, f64)> {
        self.inner.norm_ratio_trajectory()
    }

    #[getter]
    fn median_angles(&self) -> (f64, f64) {
        (self.inner.test_angles.median_audio(), self.inner.test_angles.median_visual())
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.final_loss
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn diagnostics_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.log.write_jsonl(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn save_checkpoint(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.model.save_checkpoint(path).map_err(err)
    }

    /// EER and minDCF on `n_pairs` random trials drawn from the test split.
    #[pyo3(signature = (dataset, n_pairs = 2000, target_fraction = 0.5, seed = 0))]
    fn verify(&self, dataset: &PyDataset, n_pairs: usize, target_fraction: f64, seed: u64) -> PyResult<(f64, f64)> {
        let samples = &dataset.inner.test;
        let pairs = mmcosine::datagen::generate_trials(samples, n_pairs, target_fraction, seed).map_err(err)?;
        let m = trainer::evaluate_verification(&self.inner.model, samples, &pairs, &DcfParams::default()).map_err(err)?;
        Ok((m.eer, m.min_dcf))
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult(loss={}, joint_acc={:.4}, probe={:?})",
            self.inner.train_config.loss.variant,
            self.inner.test.joint_acc,
            self.inner.probe.map(|p| (p.acc_a, p.acc_v))
        )
    }
}

/// Trains on `dataset`; keyword options use config-file keys
/// (`loss`, `fusion`, `epochs`, `s`, `seed`, ...).
#[pyfunction]
#[pyo3(signature = (dataset, **options))]
fn train(py: Python<'_>, dataset: &PyDataset, options: Option<&Bound<'_, PyDict>>) -> PyResult<PyRunResult> {
    let cfg = experiment(options)?;
    let tc = cfg.resolved_train();
    let ds = &dataset.inner;
    let mc = trainer::model_config_for(ds, &cfg.arch, &tc);
    let inner = py.detach(|| trainer::train(ds, &mc, &tc)).map_err(err)?;
    Ok(PyRunResult { inner })
}

#[pymodule]
#[pyo3(name = "mmcosine")]
fn mmcosine_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scale_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(default_scale, m)?)?;
    m.add_function(wrap_pyfunction!(vanilla_logits, m)?)?;
    m.add_function(wrap_pyfunction!(mmcosine_logits, m)?)?;
    m.add_function(wrap_pyfunction!(verification_score, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRunResult>()?;
    Ok(())
}
