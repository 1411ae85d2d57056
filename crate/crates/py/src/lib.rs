//! Python bindings: synthetic data, configuration, stage runs, evaluation,
//! checkpoints and inference.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mast_core::autograd::ParamStore;
use mast_core::config::RunConfig;
use mast_core::dataio::{window_count, Database, WINDOW, WINDOW_STEP};
use mast_core::encoder::ModelConfig;
use mast_core::eval::EvalReport;
use mast_core::masking::{generate_mask_sized, MaskStrategy, MaskingConfig};
use mast_core::model::MastModel;
use mast_core::synth::{write_dataset, SynthSpec, NOISE_MV};
use mast_core::training::{predict, TrainWindow};
use mast_core::{eval, pipeline, Error};

create_exception!(mast, MastError, PyException, "Base class of all errors raised by mast.");
create_exception!(mast, ConfigError, MastError, "Invalid configuration or arguments.");
create_exception!(mast, StageOrderError, MastError, "A prerequisite stage checkpoint is missing.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => ConfigError::new_err(e.to_string()),
        Error::StageOrder(_) => StageOrderError::new_err(e.to_string()),
        _ => MastError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Run configuration: defaults, optionally a TOML file, then `key=value`
/// overrides.
#[pyclass(name = "RunConfig", module = "mast")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load(path.as_deref(), &overrides).map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, overrides=Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text, &overrides).map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    /// Returns a copy with further overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let text = self.inner.to_toml().map_err(to_py)?;
        Self::from_toml(&text, overrides)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[getter]
    fn protocol(&self) -> String {
        self.inner.protocol.to_string()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, out={:?}, protocol={})", self.inner.seed, self.inner.out, self.inner.protocol)
    }
}

/// A network with its parameters, ready for inference.
#[pyclass(name = "Model", module = "mast")]
struct PyModel {
    model: MastModel,
    store: ParamStore,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised network. `toy` selects the small 32x32 variant.
    #[new]
    #[pyo3(signature = (seed=0, toy=false))]
    fn new(seed: u64, toy: bool) -> PyResult<Self> {
        let cfg = if toy { ModelConfig::toy() } else { ModelConfig::default() };
        let (model, store) = MastModel::new(&cfg, seed).map_err(to_py)?;
        Ok(PyModel { model, store })
    }

    /// Side length of the square input window.
    #[getter]
    fn input_size(&self) -> usize {
        self.model.cfg.input_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.cfg.num_classes
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.ids().map(|id| self.store.value(id).numel()).sum()
    }

    /// Class index for each flattened `input_size x input_size` window.
    #[pyo3(signature = (windows, batch_size=16))]
    fn predict(&self, py: Python<'_>, windows: Vec<Vec<f64>>, batch_size: usize) -> PyResult<Vec<usize>> {
        let data: Vec<TrainWindow> = windows
            .into_iter()
            .enumerate()
            .map(|(i, data)| TrainWindow {
                data,
                label: 0,
                trial: i,
                frame: 0,
            })
            .collect();
        py.detach(|| predict(&self.model, &self.store, &data, batch_size.max(1))).map_err(to_py)
    }
}

/// A saved training checkpoint.
#[pyclass(name = "Checkpoint", module = "mast")]
struct PyCheckpoint {
    inner: mast_core::training::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = mast_core::training::Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyCheckpoint { inner })
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.header.stage
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.header.epoch
    }

    #[getter]
    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Per-epoch metrics of every stage so far, as dictionaries.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner.header.history).map_err(|e| MastError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    fn model(&self) -> PyResult<PyModel> {
        let (model, store) = self.inner.restore().map_err(to_py)?;
        Ok(PyModel { model, store })
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(stage={}, epoch={})", self.inner.header.stage, self.inner.header.epoch)
    }
}

fn report_to_py<'py>(py: Python<'py>, report: &EvalReport) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(report).map_err(|e| MastError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// Writes the deterministic synthetic 8-gesture dataset and returns the
/// number of recordings.
#[pyfunction]
#[pyo3(signature = (out, n=64, seed=0, subjects=1, sessions=1, db="dba", noise_mv=NOISE_MV))]
fn synth_dataset(
    py: Python<'_>,
    out: PathBuf,
    n: usize,
    seed: u64,
    subjects: u32,
    sessions: u32,
    db: &str,
    noise_mv: f64,
) -> PyResult<usize> {
    let db = Database::parse(db).ok_or_else(|| ConfigError::new_err(format!("unknown database {db:?}")))?;
    let spec = SynthSpec {
        windows: n,
        seed,
        db,
        subjects,
        sessions,
        noise_mv,
    };
    let manifest = py.detach(|| write_dataset(&out, &spec)).map_err(to_py)?;
    Ok(manifest.trials.len())
}

/// Runs one training stage (1, 2 or 3) and saves its checkpoint under
/// `config.out`.
#[pyfunction]
#[pyo3(signature = (config, stage, resume=false))]
fn train(py: Python<'_>, config: &PyRunConfig, stage: u8, resume: bool) -> PyResult<PyCheckpoint> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| pipeline::train(&cfg, stage, resume)).map_err(to_py)?;
    Ok(PyCheckpoint { inner })
}

/// Evaluates the Stage 3 checkpoint, writes the report files and returns
/// the report as a dictionary.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let report = py.detach(|| pipeline::evaluate(&cfg)).map_err(to_py)?;
    report_to_py(py, &report)
}

fn parse_strategy(name: &str) -> PyResult<MaskStrategy> {
    match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "randomblock" => Ok(MaskStrategy::RandomBlock),
        "temporal" => Ok(MaskStrategy::Temporal),
        "sensorwise" => Ok(MaskStrategy::SensorWise),
        "multiscale" => Ok(MaskStrategy::MultiScale),
        _ => Err(ConfigError::new_err(format!("unknown masking strategy {name:?}"))),
    }
}

/// A `size x size` validity mask (1 = observed, 0 = masked) as nested lists.
#[pyfunction]
#[pyo3(signature = (strategy, size=128, ratio=0.5, seed=0))]
fn generate_mask(strategy: &str, size: usize, ratio: f64, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let cfg = MaskingConfig {
        ratio,
        ..MaskingConfig::default()
    }
    .scaled_to(size);
    let mask = generate_mask_sized(parse_strategy(strategy)?, &cfg, size, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
    Ok(mask.grid.chunks(mask.cols).map(|r| r.to_vec()).collect())
}

/// Number of windows a recording of `samples` yields.
#[pyfunction]
#[pyo3(signature = (samples, window=WINDOW, step=WINDOW_STEP))]
fn num_windows(samples: usize, window: usize, step: usize) -> PyResult<usize> {
    if window == 0 || step == 0 {
        return Err(ConfigError::new_err("window and step must be positive"));
    }
    Ok(window_count(samples, window, step))
}

/// Modal prediction; ties go to the smallest class index.
#[pyfunction]
fn majority_vote(preds: Vec<usize>) -> PyResult<usize> {
    eval::majority_vote(&preds).map_err(to_py)
}

/// `k x k` counts with true labels as rows.
#[pyfunction]
fn confusion_matrix(preds: Vec<usize>, labels: Vec<usize>, k: usize) -> PyResult<Vec<Vec<u64>>> {
    eval::confusion_matrix(&preds, &labels, k).map_err(to_py)
}

#[pymodule]
fn mast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("MastError", py.get_type::<MastError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("StageOrderError", py.get_type::<StageOrderError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_mask, m)?)?;
    m.add_function(wrap_pyfunction!(num_windows, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    Ok(())
}
