//! Python bindings: the metric functions, the focal loss, and whole
//! pipeline runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use deferral_core::config::{smoke_config, ExperimentConfig};
use deferral_core::loss::FocalParams;
use deferral_core::metrics::{self, ConfusionCounts};
use deferral_core::pipeline::Run;
use deferral_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(format!("{}: {other}", other.category())),
    }
}

fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts::new(tp, tn, fp, fn_)
}

/// Cohen's kappa of a binary confusion matrix.
#[pyfunction]
#[pyo3(signature = (tp, tn, fp, fn_))]
fn cohen_kappa(tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<f64> {
    metrics::cohen_kappa(&counts(tp, tn, fp, fn_)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (tp, tn, fp, fn_))]
fn f1(tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<f64> {
    metrics::f1(&counts(tp, tn, fp, fn_)).map_err(py_err)
}

/// Area under the ROC curve; ties count one half.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    metrics::auroc(&metrics::samples_from(&scores, &labels)).map_err(py_err)
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    metrics::auprc(&metrics::samples_from(&scores, &labels)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (p, y, alpha = 2.0, gamma = 2.0))]
fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> PyResult<f64> {
    let fp = FocalParams::new(alpha, gamma).map_err(py_err)?;
    Ok(deferral_core::loss::focal_loss(p, y, fp))
}

/// Runs every stage into `out` and returns the test-split summary as JSON.
///
/// `config` is a TOML path; `smoke=True` uses the small built-in config
/// instead. The GIL is released while the pipeline runs.
#[pyfunction]
#[pyo3(signature = (out, config = None, seed = None, smoke = false))]
fn run_pipeline(py: Python<'_>, out: PathBuf, config: Option<PathBuf>, seed: Option<u64>, smoke: bool) -> PyResult<String> {
    let mut cfg = match (config, smoke) {
        (Some(_), true) => return Err(PyValueError::new_err("pass either config or smoke, not both")),
        (Some(p), false) => ExperimentConfig::load(&p).map_err(py_err)?,
        (None, true) => smoke_config(seed.unwrap_or(7)),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s).map_err(py_err)?;
    }
    py.detach(|| {
        let run = Run::open(cfg, &out)?;
        run.run_all()?;
        Ok::<_, Error>(std::fs::read_to_string(run.path("summary.json"))?)
    })
    .map_err(py_err)
}

#[pymodule]
fn deferral(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
