//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use stct_core::io::{load_matrix, save_matrix, KvConfig};
use stct_core::oracle::{run_suite, Suite};
use stct_core::pipeline::{run_stct as run_pipeline, RunConfig};
use stct_core::select::PseudoLabelMatrix;
use stct_core::synth::{gaussian_mixture as generate, MixtureSpec};
use stct_core::{
    harden, knn_pseudo_labels as knn, make_symmetric_t as symmetric, one_hot, run_nmc as nmc, Convention,
    FeatureMatrix, HardLabelVector, NmcConfig, SoftLabelMatrix, StctError,
};

create_exception!(stct, CoreError, PyException, "Raised when the core library reports a failure.");

type Rows = Vec<Vec<f64>>;

fn err(e: StctError) -> PyErr {
    match e.root() {
        StctError::InputDomain(_) | StctError::Config(_) => PyValueError::new_err(e.to_string()),
        _ => CoreError::new_err(e.to_string()),
    }
}

fn features(rows: &Rows) -> PyResult<FeatureMatrix> {
    FeatureMatrix::from_rows(rows).map_err(err)
}

fn soft(rows: &Rows) -> PyResult<SoftLabelMatrix> {
    SoftLabelMatrix::from_rows(rows).map_err(err)
}

fn to_rows(a: &ndarray::Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Balanced mixture with centers on the first `classes` axes.
/// Returns `(features, labels)`.
#[pyfunction]
#[pyo3(signature = (classes, n, d, sep, seed = 0))]
fn gaussian_mixture(py: Python<'_>, classes: usize, n: usize, d: usize, sep: f64, seed: u64) -> PyResult<(Rows, Vec<usize>)> {
    let ds = py
        .detach(|| generate(&MixtureSpec::balanced(classes, n, d, sep, seed)))
        .map_err(err)?;
    let labels = ds.clean_labels.expect("generated data carries clean labels").0;
    Ok((to_rows(ds.features.as_array()), labels))
}

#[pyfunction]
#[pyo3(signature = (classes, rho, convention = "include"))]
fn make_symmetric_t(classes: usize, rho: f64, convention: &str) -> PyResult<Rows> {
    let conv: Convention = convention.parse().map_err(err)?;
    Ok(to_rows(symmetric(classes, rho, conv).map_err(err)?.as_array()))
}

/// Corrupts `labels` with symmetric noise. Returns `(noisy, mask)`.
#[pyfunction]
#[pyo3(signature = (labels, classes, rho, convention = "include", seed = 0))]
fn inject_noise(labels: Vec<usize>, classes: usize, rho: f64, convention: &str, seed: u64) -> PyResult<(Vec<usize>, Vec<bool>)> {
    let conv: Convention = convention.parse().map_err(err)?;
    let t = symmetric(classes, rho, conv).map_err(err)?;
    let (noisy, mask) = stct_core::inject_noise(&HardLabelVector(labels), &t, seed).map_err(err)?;
    Ok((noisy.0, mask))
}

/// Rounds needed so that a fraction `beta` of `n` samples lands in the
/// sub-training split at least once, with validation fraction `r`.
#[pyfunction]
fn required_sampling_times(n: usize, r: f64, beta: f64) -> PyResult<usize> {
    stct_core::required_sampling_times(n, r, beta).map_err(err)
}

/// One exact gradient step on the sub-training labels.
#[pyfunction]
fn meta_label_update(ht: Rows, hv: Rows, yt: Rows, yv: Rows, eta: f64, reg: f64) -> PyResult<Rows> {
    let out = stct_core::meta_label_update(&features(&ht)?, &features(&hv)?, &soft(&yt)?, &soft(&yv)?, eta, reg).map_err(err)?;
    Ok(to_rows(out.as_array()))
}

/// Label correction on fixed embeddings. Returns
/// `(corrected soft labels, hardened labels, rounds, stop reason)`.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, classes, r = 0.5, eta = 2.0, seed = 0))]
fn run_nmc(
    py: Python<'_>,
    embeddings: Rows,
    labels: Vec<usize>,
    classes: usize,
    r: f64,
    eta: f64,
    seed: u64,
) -> PyResult<(Rows, Vec<usize>, usize, String)> {
    let h = features(&embeddings)?;
    let y = one_hot(&HardLabelVector(labels), classes).map_err(err)?;
    let cfg = NmcConfig {
        r,
        eta,
        seed,
        ..NmcConfig::default()
    };
    let out = py.detach(|| nmc(&h, &y, &cfg, None)).map_err(err)?;
    let stop = serde_json::to_value(out.stop).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    Ok((to_rows(out.corrected.as_array()), harden(&out.corrected).0, out.trace.rounds.len(), stop))
}

#[pyfunction]
fn knn_pseudo_labels(embeddings: Rows, labels: Vec<usize>, k: usize, classes: usize) -> PyResult<Rows> {
    let yp = knn(&features(&embeddings)?, &HardLabelVector(labels), k, classes).map_err(err)?;
    Ok(to_rows(&yp.0))
}

/// Per-class indices of the samples whose neighbor vote best supports
/// their label.
#[pyfunction]
fn select_clean(labels: Vec<usize>, pseudo: Rows, mu_hat: f64) -> PyResult<Vec<Vec<usize>>> {
    let yp = PseudoLabelMatrix(features(&pseudo)?.into_inner());
    stct_core::select_clean(&HardLabelVector(labels), &yp, mu_hat).map_err(err)
}

/// Full alternation from `key = value` config text. Returns the run
/// report as a dict with `epochs` and `summary`.
#[pyfunction]
#[pyo3(signature = (config = "", out = None))]
fn run_stct<'py>(py: Python<'py>, config: &str, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let kv = KvConfig::parse(config).map_err(err)?;
    let mut cfg = RunConfig::from_kv(&kv, std::path::Path::new(".")).map_err(err)?;
    if out.is_some() {
        cfg.out = out;
    }
    let result = py.detach(|| run_pipeline(&cfg)).map_err(err)?;
    let text = serde_json::to_string(&result.report).map_err(|e| err(e.into()))?;
    from_json(py, &text)
}

/// Runs an oracle suite (`theorems`, `gradients`, `coverage` or `all`)
/// and returns its reports as dicts.
#[pyfunction]
#[pyo3(signature = (suite = "gradients"))]
fn verify<'py>(py: Python<'py>, suite: &str) -> PyResult<Bound<'py, PyAny>> {
    let suite: Suite = suite.parse().map_err(err)?;
    let reports = py.detach(|| run_suite(suite)).map_err(err)?;
    let text = serde_json::to_string(&reports).map_err(|e| err(e.into()))?;
    from_json(py, &text)
}

#[pyfunction]
#[pyo3(name = "save_matrix")]
fn py_save_matrix(path: PathBuf, rows: Rows) -> PyResult<()> {
    save_matrix(&path, features(&rows)?.as_array()).map_err(err)
}

#[pyfunction]
#[pyo3(name = "load_matrix")]
fn py_load_matrix(path: PathBuf) -> PyResult<Rows> {
    Ok(to_rows(&load_matrix(&path).map_err(err)?))
}

#[pymodule]
fn stct(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CoreError", m.py().get_type::<CoreError>())?;
    m.add_function(wrap_pyfunction!(gaussian_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(make_symmetric_t, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(required_sampling_times, m)?)?;
    m.add_function(wrap_pyfunction!(meta_label_update, m)?)?;
    m.add_function(wrap_pyfunction!(run_nmc, m)?)?;
    m.add_function(wrap_pyfunction!(knn_pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(select_clean, m)?)?;
    m.add_function(wrap_pyfunction!(run_stct, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(py_save_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(py_load_matrix, m)?)?;
    Ok(())
}
