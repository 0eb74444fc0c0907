//! Python bindings: survival losses, send-time bins, model fitting and the
//! experiment runners.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use sendtime::baselines::{fit_cox_linear, fit_cox_mixture, fit_cox_nonlinear, fit_weibull, SurvivalData};
use sendtime::experiment::{end_to_end, run_experiment, ExperimentConfig};
use sendtime::model::{FittedModel, ModelKind};
use sendtime::numerics::LbfgsOptions;
use sendtime::survival::{self, SurvivalBatch};
use sendtime::synth::{generate, GeneratorSpec};
use sendtime::training::TrainConfig;
use sendtime::virtual_time;

create_exception!(sendtime_py, SendtimeError, PyException);

fn err(e: sendtime::Error) -> PyErr {
    SendtimeError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    SendtimeError::new_err(format!("invalid JSON: {e}"))
}

/// Hands a serialisable value to Python as plain dicts and lists.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn batch(scores: Vec<f64>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<SurvivalBatch> {
    SurvivalBatch::new(scores, durations, events).map_err(err)
}

fn data(x: Vec<Vec<f64>>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<SurvivalData> {
    SurvivalData::new(x, durations, events).map_err(err)
}

/// Efron negative log partial likelihood of hazard ratios `phi`.
#[pyfunction]
fn efron_nll(phi: Vec<f64>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    survival::efron_nll(&batch(phi, durations, events)?).map_err(err)
}

/// Gradient of the Efron NLL with respect to each `log phi`.
#[pyfunction]
fn efron_nll_gradient(phi: Vec<f64>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<Vec<f64>> {
    survival::efron_nll_gradient(&batch(phi, durations, events)?).map_err(err)
}

/// Harrell's C-index; higher scores should open sooner.
#[pyfunction]
fn c_index(scores: Vec<f64>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    if scores.len() != durations.len() || scores.len() != events.len() {
        return Err(SendtimeError::new_err("scores, durations and events differ in length"));
    }
    survival::concordance_counts(&scores, &durations, &events).c_index().map_err(err)
}

#[pyfunction]
fn weibull_survival(t: f64, lam: f64, gamma: f64) -> PyResult<f64> {
    survival::weibull_survival(t, lam, gamma).map_err(err)
}

#[pyfunction]
fn weibull_hazard(t: f64, lam: f64, gamma: f64) -> PyResult<f64> {
    survival::weibull_hazard(t, lam, gamma).map_err(err)
}

/// Equal-count partition of the week into send-time bins.
#[pyclass(module = "sendtime_py", name = "BinScheme", from_py_object)]
#[derive(Clone)]
struct PyBinScheme(virtual_time::BinScheme);

#[pymethods]
impl PyBinScheme {
    #[staticmethod]
    fn fit(send_times: Vec<i64>, bins: usize) -> PyResult<Self> {
        virtual_time::fit_bins(&send_times, bins).map(Self).map_err(err)
    }

    #[staticmethod]
    fn uniform(bins: usize) -> PyResult<Self> {
        virtual_time::BinScheme::uniform(bins).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        virtual_time::BinScheme::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn bin_of(&self, ts: i64) -> usize {
        self.0.bin_of(ts)
    }

    #[getter]
    fn bin_count(&self) -> usize {
        self.0.bin_count()
    }

    #[getter]
    fn boundaries(&self) -> Vec<i64> {
        self.0.boundaries().to_vec()
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    fn __len__(&self) -> usize {
        self.0.bin_count()
    }

    fn __repr__(&self) -> String {
        format!("BinScheme(bins={}, hash={})", self.0.bin_count(), self.0.hash())
    }
}

/// A fitted survival model of any supported kind.
#[pyclass(module = "sendtime_py", name = "Model")]
struct PyModel {
    model: FittedModel,
    seq_len: usize,
    scheme_hash: Option<String>,
}

impl PyModel {
    fn new(model: FittedModel) -> Self {
        Self {
            model,
            seq_len: 1,
            scheme_hash: None,
        }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let m = FittedModel::load(&path).map_err(err)?;
        Ok(Self {
            model: m.model,
            seq_len: m.seq_len,
            scheme_hash: m.scheme_hash,
        })
    }

    #[pyo3(signature = (path, scheme=None, seq_len=None))]
    fn save(&self, path: PathBuf, scheme: Option<&PyBinScheme>, seq_len: Option<usize>) -> PyResult<()> {
        self.model
            .save(&path, scheme.map(|s| &s.0), seq_len.unwrap_or(self.seq_len))
            .map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.model.kind().as_str()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[getter]
    fn scheme_hash(&self) -> Option<String> {
        self.scheme_hash.clone()
    }

    /// Ranking score of one feature row (not available for `rnn_s`).
    fn score(&self, x: Vec<f64>) -> PyResult<f64> {
        self.model.score_row(&x).map_err(err)
    }

    fn log_score(&self, x: Vec<f64>) -> PyResult<f64> {
        self.model.log_score_row(&x).map_err(err)
    }

    /// C-index of the model's scores on rows `x`.
    fn concordance(&self, x: Vec<Vec<f64>>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
        let scores = x
            .iter()
            .map(|r| self.model.log_score_row(r))
            .collect::<sendtime::Result<Vec<_>>>()
            .map_err(err)?;
        c_index(scores, durations, events)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, seq_len={})", self.kind(), self.seq_len)
    }
}

#[pyfunction]
fn fit_weibull_model(x: Vec<Vec<f64>>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<PyModel> {
    let (m, _) = fit_weibull(&data(x, durations, events)?, &LbfgsOptions::default()).map_err(err)?;
    Ok(PyModel::new(FittedModel::Weibull(m)))
}

#[pyfunction]
fn fit_cox_linear_model(x: Vec<Vec<f64>>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<PyModel> {
    let (m, _) = fit_cox_linear(&data(x, durations, events)?, &LbfgsOptions::default()).map_err(err)?;
    Ok(PyModel::new(FittedModel::CoxLinear(m)))
}

#[pyfunction]
fn fit_cox_mixture_model(x: Vec<Vec<f64>>, durations: Vec<f64>, events: Vec<bool>) -> PyResult<PyModel> {
    let (m, _) = fit_cox_mixture(&data(x, durations, events)?, &LbfgsOptions::default()).map_err(err)?;
    Ok(PyModel::new(FittedModel::CoxMixture(m)))
}

#[pyfunction]
#[pyo3(signature = (x, durations, events, hidden=32, epochs=30, lr=0.001, batch_size=256, seed=0))]
#[allow(clippy::too_many_arguments)]
fn fit_cox_nonlinear_model(
    x: Vec<Vec<f64>>,
    durations: Vec<f64>,
    events: Vec<bool>,
    hidden: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyModel> {
    let cfg = TrainConfig {
        lr,
        batch_size,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let (m, _) = fit_cox_nonlinear(&data(x, durations, events)?, hidden, &cfg).map_err(err)?;
    Ok(PyModel::new(FittedModel::CoxNonlinear(m)))
}

/// Writes a synthetic population to `out_dir`; `spec` is generator JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None, seed=None))]
fn synth<'py>(py: Python<'py>, out_dir: PathBuf, spec: Option<&str>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut spec: GeneratorSpec = match spec {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => GeneratorSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = py.detach(|| generate(&spec)).map_err(err)?;
    out.write_to_dir(&out_dir).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "messages": out.emails.len(),
            "purchases": out.purchases.len(),
            "window": out.truth.window,
        }),
    )
}

fn config(json: &str) -> PyResult<ExperimentConfig> {
    let c: ExperimentConfig = serde_json::from_str(json).map_err(json_err)?;
    c.validate().map_err(err)?;
    Ok(c)
}

/// Runs the model x window x length grid described by a config JSON.
#[pyfunction]
fn experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = config(config_json)?;
    let r = py.detach(|| run_experiment(&c)).map_err(err)?;
    to_py(py, &r)
}

/// Runs ingest through report and returns the report.
#[pyfunction]
fn pipeline<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = config(config_json)?;
    let r = py.detach(|| end_to_end(&c)).map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
fn model_kinds() -> Vec<&'static str> {
    ModelKind::ALL.iter().map(|k| k.as_str()).collect()
}

#[pymodule]
fn sendtime_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SendtimeError", m.py().get_type::<SendtimeError>())?;
    m.add_class::<PyBinScheme>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(efron_nll, m)?)?;
    m.add_function(wrap_pyfunction!(efron_nll_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(c_index, m)?)?;
    m.add_function(wrap_pyfunction!(weibull_survival, m)?)?;
    m.add_function(wrap_pyfunction!(weibull_hazard, m)?)?;
    m.add_function(wrap_pyfunction!(fit_weibull_model, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cox_linear_model, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cox_mixture_model, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cox_nonlinear_model, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(model_kinds, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
