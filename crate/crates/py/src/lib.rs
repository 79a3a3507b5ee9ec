//! Python bindings for `idp-core`.
//!
//! ```python
//! import idp_py
//! sigma = idp_py.get_noise(1.0, 1e-5, 0.01, 1000)
//! params = idp_py.calibrate([("a", 500, 1.0), ("b", 500, 3.0)], 1e-5, "sample", 0.02, 500, 1.0)
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use idp_core::accountant::{self, RdpOrderGrid, SgmParams};
use idp_core::calibration::{self, CalibrationOptions, Method, ParamArtifact, PrivacyGroup, PrivacySpec};
use idp_core::cli::{self, RunConfig};
use idp_core::data::{assign_groups, make_blobs, AssignmentStrategy, Dataset};
use idp_core::engine::{self, Divisor, PointAssignment, TrainConfig};
use idp_core::model::{Architecture, Model};
use idp_core::{Error, GroupId};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(idp_py, CalibrationError, PyRuntimeError);
create_exception!(idp_py, TrainingError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Calibration { .. } | Error::Infeasible { .. } => CalibrationError::new_err(e.to_string()),
        Error::Training { .. } => TrainingError::new_err(e.to_string()),
        Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cli_to_py(e: cli::CliError) -> PyErr {
    match e.code {
        cli::EXIT_CALIBRATION => CalibrationError::new_err(e.message),
        cli::EXIT_TRAINING => TrainingError::new_err(e.message),
        _ => PyValueError::new_err(e.message),
    }
}

fn parse_method(name: &str) -> PyResult<Method> {
    match name.to_ascii_lowercase().as_str() {
        "sample" => Ok(Method::Sample),
        "scale" => Ok(Method::Scale),
        "combined" => Ok(Method::Combined),
        other => Err(PyValueError::new_err(format!(
            "unknown method `{other}` (expected sample, scale or combined)"
        ))),
    }
}

fn options(precision: f64) -> CalibrationOptions {
    CalibrationOptions::with_precision(precision)
}

/// Per-step RDP of the subsampled Gaussian mechanism at order `alpha`.
#[pyfunction]
fn rdp_sgm_step(q: f64, sigma: f64, alpha: f64) -> PyResult<f64> {
    accountant::rdp_sgm_step(q, sigma, alpha).map_err(to_py)
}

/// ε after `steps` steps at rate `q` and noise `sigma`.
#[pyfunction]
fn epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> PyResult<f64> {
    let params = SgmParams::new(q, sigma, steps).map_err(to_py)?;
    accountant::epsilon_of(&params, delta, &RdpOrderGrid::default()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (epsilon, delta, q, steps, precision = 0.01))]
fn get_noise(epsilon: f64, delta: f64, q: f64, steps: u64, precision: f64) -> PyResult<f64> {
    calibration::get_noise(epsilon, delta, q, steps, &options(precision)).map_err(to_py)
}

/// Returns `(rate, saturated)`.
#[pyfunction]
#[pyo3(signature = (epsilon, delta, sigma, steps, precision = 0.01))]
fn get_sample_rate(epsilon: f64, delta: f64, sigma: f64, steps: u64, precision: f64) -> PyResult<(f64, bool)> {
    let r = calibration::get_sample_rate(epsilon, delta, sigma, steps, &options(precision)).map_err(to_py)?;
    Ok((r.rate, r.saturated))
}

/// Calibrated parameters; serializes to the same JSON as `idp calibrate`.
#[pyclass(name = "Params", module = "idp_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: ParamArtifact,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ParamArtifact =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(PyParams { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn sigma_shared(&self) -> f64 {
        self.inner.sigma_shared
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[getter]
    fn base_rate(&self) -> f64 {
        self.inner.base_rate
    }

    #[getter]
    fn base_clip(&self) -> f64 {
        self.inner.base_clip
    }

    /// `[(id, size, epsilon, q, sigma, clip), ...]`
    #[getter]
    fn groups(&self) -> Vec<(String, u64, f64, f64, f64, f64)> {
        self.inner
            .groups
            .iter()
            .map(|g| (g.id.to_string(), g.size, g.epsilon, g.q, g.sigma, g.clip))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Params(method={}, sigma_shared={:.4}, groups={})",
            self.inner.method,
            self.inner.sigma_shared,
            self.inner.groups.len()
        )
    }
}

fn build_spec(groups: Vec<(String, u64, f64)>, delta: f64) -> PyResult<PrivacySpec> {
    let groups = groups
        .into_iter()
        .map(|(id, size, eps)| PrivacyGroup::new(id, size, eps))
        .collect();
    PrivacySpec::new(groups, delta).map_err(to_py)
}

/// Calibrates `groups` = `[(id, size, epsilon), ...]` with one of
/// `"sample"`, `"scale"`, `"combined"`.
#[pyfunction]
#[pyo3(signature = (groups, delta, method, q, steps, clip, weight = 1.0, precision = 0.01))]
#[allow(clippy::too_many_arguments)]
fn calibrate(
    groups: Vec<(String, u64, f64)>,
    delta: f64,
    method: &str,
    q: f64,
    steps: u64,
    clip: f64,
    weight: f64,
    precision: f64,
) -> PyResult<PyParams> {
    let spec = build_spec(groups, delta)?;
    let method = parse_method(method)?;
    let inner = ParamArtifact::calibrate(&spec, method, weight, q, steps, clip, &options(precision))
        .map_err(to_py)?;
    Ok(PyParams { inner })
}

/// Per-group spend ledger charged one step at a time.
#[pyclass(name = "SpendLedger", module = "idp_py")]
struct PyLedger {
    inner: accountant::SpendLedger,
}

#[pymethods]
impl PyLedger {
    #[new]
    #[pyo3(signature = (group_ids, delta, checkpoint_stride = 1))]
    fn new(group_ids: Vec<String>, delta: f64, checkpoint_stride: u64) -> PyResult<Self> {
        let inner = accountant::SpendLedger::new(
            group_ids.into_iter().map(GroupId::new),
            delta,
            RdpOrderGrid::default(),
            checkpoint_stride,
        )
        .map_err(to_py)?;
        Ok(PyLedger { inner })
    }

    /// Charges one step; `charges` = `[(id, q, sigma), ...]` covering every group.
    fn record_step(&mut self, charges: Vec<(String, f64, f64)>) -> PyResult<()> {
        let charges = charges
            .into_iter()
            .map(|(id, q, s)| Ok((GroupId::new(id), SgmParams::new(q, s, 1).map_err(to_py)?)))
            .collect::<PyResult<Vec<_>>>()?;
        self.inner.record_step(&charges).map_err(to_py)
    }

    /// ε spent so far per group.
    fn current(&self) -> PyResult<BTreeMap<String, f64>> {
        Ok(self
            .inner
            .current()
            .map_err(to_py)?
            .into_iter()
            .map(|(id, c)| (id.to_string(), c.epsilon))
            .collect())
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps()
    }

    #[pyo3(name = "to_csv")]
    fn csv(&mut self) -> PyResult<String> {
        self.inner.ensure_checkpoint().map_err(to_py)?;
        let mut out = Vec::new();
        self.inner.write_csv(&mut out).map_err(to_py)?;
        String::from_utf8(out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Trains on two Gaussian blobs with groups assigned by `proportions`
/// (`[(id, share), ...]`, same ids as in `params`). Returns a dict with the
/// final accuracy, mean batch size and ε spent per group.
#[pyfunction]
#[pyo3(signature = (params, n_per_class, separation, proportions, learning_rate, seed, model = "logistic", hidden = 32, test_per_class = 0))]
#[allow(clippy::too_many_arguments)]
fn train_blobs(
    py: Python<'_>,
    params: &PyParams,
    n_per_class: usize,
    separation: f64,
    proportions: Vec<(String, f64)>,
    learning_rate: f64,
    seed: u64,
    model: &str,
    hidden: usize,
    test_per_class: usize,
) -> PyResult<Py<PyAny>> {
    let artifact = &params.inner;
    let arch = match model {
        "logistic" => Architecture::logistic(2, 2),
        "mlp" => Architecture::mlp(2, hidden, 2),
        other => return Err(PyValueError::new_err(format!("unknown model `{other}`"))),
    };
    let strategy =
        AssignmentStrategy::RandomProportions(proportions.into_iter().map(|(g, p)| (GroupId::new(g), p)).collect());
    let data = make_blobs(n_per_class, 2, separation, seed)
        .and_then(|d| assign_groups(d, &strategy, seed))
        .map_err(to_py)?;
    let test: Option<Dataset> = if test_per_class > 0 {
        Some(make_blobs(test_per_class, 2, separation, seed.wrapping_add(1)).map_err(to_py)?)
    } else {
        None
    };
    let config = TrainConfig {
        learning_rate,
        expected_batch: (artifact.base_rate * data.len() as f64).round() as u64,
        steps: artifact.steps,
        base_clip: artifact.base_clip,
        seed,
        checkpoint_stride: 1,
        divisor: Divisor::Realized,
    };
    let outcome = py
        .detach(|| {
            let assignment = PointAssignment::new(&data, artifact)?;
            let model = Model::init(arch, seed)?;
            engine::train(model, &data, &assignment, artifact, &config, test.as_ref())
        })
        .map_err(to_py)?;
    let spent: BTreeMap<String, f64> = outcome
        .ledger
        .current()
        .map_err(to_py)?
        .into_iter()
        .map(|(id, c)| (id.to_string(), c.epsilon))
        .collect();
    let out = pyo3::types::PyDict::new(py);
    out.set_item("accuracy", outcome.metrics.final_accuracy)?;
    out.set_item("mean_batch_size", outcome.metrics.mean_batch_size())?;
    out.set_item("epsilon_spent", spent)?;
    Ok(out.into_any().unbind())
}

/// `idp calibrate` on a TOML config string; returns the params file path.
#[pyfunction]
fn run_calibrate(config: &str, out_dir: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    let res = cli::cmd_calibrate(&cfg, &out_dir).map_err(cli_to_py)?;
    Ok(res.params_path.display().to_string())
}

/// `idp train`; returns `{group: (spent, budget, within_tolerance)}`.
#[pyfunction]
fn run_train(config: &str, params_path: PathBuf, out_dir: PathBuf) -> PyResult<BTreeMap<String, (f64, f64, bool)>> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    let res = cli::cmd_train(&cfg, &params_path, &out_dir).map_err(cli_to_py)?;
    Ok(res
        .spends
        .into_iter()
        .map(|s| (s.id.to_string(), (s.spent, s.budget, s.within_tolerance)))
        .collect())
}

/// `idp audit`; returns `(passed, report_text)`.
#[pyfunction]
fn run_audit(ledger_path: PathBuf, config: &str) -> PyResult<(bool, String)> {
    let cfg = RunConfig::parse(config).map_err(to_py)?;
    let report = cli::cmd_audit(&ledger_path, &cfg, None).map_err(cli_to_py)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn idp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CalibrationError", m.py().get_type::<CalibrationError>())?;
    m.add("TrainingError", m.py().get_type::<TrainingError>())?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyLedger>()?;
    m.add_function(wrap_pyfunction!(rdp_sgm_step, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(get_noise, m)?)?;
    m.add_function(wrap_pyfunction!(get_sample_rate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(train_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(run_calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(run_train, m)?)?;
    m.add_function(wrap_pyfunction!(run_audit, m)?)?;
    Ok(())
}
