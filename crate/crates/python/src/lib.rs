//! Python bindings for the scoring, metric, loss and perturbation primitives.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vqa_robust::kernel::{self, Matrix};
use vqa_robust::{data, metrics, pipeline, scoring, toy};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

/// Lowercased answer tokens with punctuation and articles removed.
#[pyfunction]
fn normalize(text: &str) -> Vec<String> {
    scoring::normalize(text).tokens
}

#[pyfunction]
fn token_recall(gold: &str, pred: &str) -> PyResult<f64> {
    scoring::token_recall(&scoring::normalize(gold), &scoring::normalize(pred)).map_err(err)
}

#[pyfunction]
fn closed_accuracy(gold: &str, pred: &str) -> PyResult<f64> {
    scoring::closed_accuracy(gold, pred).map_err(err)
}

#[pyfunction]
fn cluster_mad(scores: Vec<f64>) -> PyResult<f64> {
    metrics::cluster_mad(&scores).map_err(err)
}

/// Coefficient of variation in percent, `None` when the mean is zero.
#[pyfunction]
fn cluster_cv(scores: Vec<f64>) -> PyResult<Option<f64>> {
    metrics::cluster_cv(&scores).map_err(err)
}

#[pyfunction]
fn cosine_sim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    kernel::cosine_sim(&a, &b).map_err(err)
}

#[pyfunction]
fn mean_pool(hidden: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    kernel::mean_pool(&matrix(hidden)?).map_err(err)
}

/// Summed token cross-entropy and its gradient with respect to the logits.
#[pyfunction]
fn ar_cross_entropy(logits: Vec<Vec<f64>>, targets: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (value, grad) = kernel::ar_cross_entropy(&matrix(logits)?, &targets).map_err(err)?;
    Ok((value, grad.iter_rows().map(<[f64]>::to_vec).collect()))
}

#[pyfunction]
#[pyo3(signature = (anchor, positives, negatives, temperature = kernel::DEFAULT_TEMPERATURE))]
fn info_nce(anchor: Vec<f64>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    Ok(kernel::info_nce(&anchor, &positives, &negatives, temperature)
        .map_err(err)?
        .value)
}

#[pyfunction]
fn rule_word_perturb(question: &str, seed: u64) -> PyResult<String> {
    pipeline::rule_word_perturb(question, seed).map_err(err)
}

/// Scores a predictions file against a clusters file and returns the report as JSON.
#[pyfunction]
fn score_files(clusters: &str, predictions: &str, model_id: &str) -> PyResult<String> {
    let (clusters, _) = data::load_clusters(clusters).map_err(err)?;
    let preds = data::load_predictions(predictions).map_err(err)?;
    let outcome = scoring::score_predictions(&clusters, &preds, model_id).map_err(err)?;
    let (_, report) = metrics::evaluate(model_id, &clusters, &outcome).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// Trains one toy model. `settings` holds `key = value` pairs as in a toy config file.
#[pyfunction]
#[pyo3(signature = (settings = None))]
fn toy_run<'py>(py: Python<'py>, settings: Option<Vec<(String, String)>>) -> PyResult<Bound<'py, PyDict>> {
    let mut s = toy::ToySettings::default();
    for (k, v) in settings.unwrap_or_default() {
        s.set(&k, &v).map_err(err)?;
    }
    let result = toy::run(&s).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("mode", result.mode.as_str())?;
    out.set_item("seed", result.seed)?;
    out.set_item("initial_loss", result.curve.initial())?;
    out.set_item("final_loss", result.curve.last())?;
    out.set_item("accuracy", result.evaluation.accuracy)?;
    out.set_item("mean_mad", result.mean_mad())?;
    out.set_item(
        "report",
        serde_json::to_string(&result.evaluation.report).map_err(err)?,
    )?;
    Ok(out)
}

#[pymodule]
fn vqa_robust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(token_recall, m)?)?;
    m.add_function(wrap_pyfunction!(closed_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_mad, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_cv, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(mean_pool, m)?)?;
    m.add_function(wrap_pyfunction!(ar_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(rule_word_perturb, m)?)?;
    m.add_function(wrap_pyfunction!(score_files, m)?)?;
    m.add_function(wrap_pyfunction!(toy_run, m)?)?;
    Ok(())
}
