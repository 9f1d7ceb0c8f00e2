//! Python bindings: synthetic corpora, text metrics and generation from a
//! trained run directory. Text is split on whitespace.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use refinedial::experiment::TrainedRun;
use refinedial::Error;

pub mod api;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Parse { .. } | Error::Format(_) | Error::Io(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Writes a synthetic corpus under `out` and returns its summary statistics.
#[pyfunction]
#[pyo3(signature = (out, users=200, pairs_per_user=40, vocab_size=2000, seed=7))]
fn synthesize(
    py: Python<'_>,
    out: &str,
    users: usize,
    pairs_per_user: usize,
    vocab_size: usize,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let stats = api::synthesize(Path::new(out), users, pairs_per_user, vocab_size, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    for (k, v) in stats {
        d.set_item(k, v)?;
    }
    Ok(d.unbind())
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, n=1))]
fn bleu(candidate: &str, reference: &str, n: usize) -> PyResult<f64> {
    api::bleu(candidate, reference, n).map_err(py_err)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    api::rouge_l(candidate, reference)
}

#[pyfunction]
#[pyo3(signature = (candidates, n=1))]
fn distinct(candidates: Vec<String>, n: usize) -> PyResult<f64> {
    api::distinct(&candidates, n).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (response, history, stopwords=Vec::new()))]
fn persona_f1(response: &str, history: Vec<String>, stopwords: Vec<String>) -> f64 {
    api::persona_f1(response, &history, &stopwords)
}

/// A trained run directory.
#[pyclass(unsendable)]
struct Run {
    inner: TrainedRun,
}

#[pymethods]
impl Run {
    #[new]
    #[pyo3(signature = (path, checkpoint=None))]
    fn new(path: &str, checkpoint: Option<&str>) -> PyResult<Self> {
        let inner = TrainedRun::open(Path::new(path), checkpoint.map(Path::new)).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Answers `(user, query)` pairs; `user` may be None or unknown, which
    /// means no profiles.
    #[pyo3(signature = (queries, seed=1, no_profile=false))]
    fn respond(
        &self,
        py: Python<'_>,
        queries: Vec<(Option<String>, String)>,
        seed: u64,
        no_profile: bool,
    ) -> PyResult<Vec<Py<PyDict>>> {
        let out = api::respond(&self.inner, &queries, seed, no_profile).map_err(py_err)?;
        out.into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("response", r.response)?;
                d.set_item("sim_profile", r.sim_profile)?;
                d.set_item("per_profile", r.per_profile)?;
                Ok(d.unbind())
            })
            .collect()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.model.vocab_size
    }
}

#[pymodule]
#[pyo3(name = "refinedial")]
fn refinedial_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(distinct, m)?)?;
    m.add_function(wrap_pyfunction!(persona_f1, m)?)?;
    m.add_class::<Run>()?;
    Ok(())
}
