//! Python bindings for the contraprompt core crate.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists, so nothing here needs to mirror every Rust type.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use contraprompt::gateway::{Cassette, CassetteMode, Gateway};
use contraprompt::harness;
use contraprompt::io::from_jsonl;
use contraprompt::metrics::{self, Normalizer, Score};
use contraprompt::mining::{self, MineOptions};
use contraprompt::optimizer::{OptimizationConfig, Optimizer};
use contraprompt::retry::{self, AttemptSet, ErrorType};
use contraprompt::tree;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn attempt_sets(jsonl: &str) -> PyResult<Vec<AttemptSet>> {
    from_jsonl(jsonl).map_err(|(line, msg)| value_error(format!("line {line}: {msg}")))
}

#[pyfunction]
#[pyo3(signature = (prediction, gold, strip_articles = true))]
fn token_f1(prediction: &str, gold: &str, strip_articles: bool) -> f64 {
    metrics::token_f1_with(&Normalizer { strip_articles }, prediction, gold).value()
}

#[pyfunction]
fn exact_match(prediction: &str, gold: &str) -> f64 {
    metrics::exact_match(prediction, gold).value()
}

#[pyfunction]
fn macro_f1(predictions: Vec<Vec<String>>, golds: Vec<Vec<String>>, universe: Vec<String>) -> PyResult<f64> {
    metrics::macro_f1(&predictions, &golds, &universe)
        .map(Score::value)
        .map_err(value_error)
}

/// Feedback text for a failed attempt; `error_type` is one of the closed labels.
#[pyfunction]
fn make_feedback(score: f64, error_type: &str) -> String {
    retry::make_feedback(Score::new(score), ErrorType::parse_label(error_type))
}

/// First-attempt failures later rescued, over all first-attempt failures.
/// `None` when nothing failed first.
#[pyfunction]
fn retry_success_rate(attempts_jsonl: &str) -> PyResult<Option<f64>> {
    Ok(retry::compute_retry_success_rate(&attempt_sets(attempts_jsonl)?))
}

/// Mines an attempts log; returns `{"pairs": [...], "groups": [...]}`.
#[pyfunction]
#[pyo3(signature = (attempts_jsonl, delta_min = mining::DEFAULT_DELTA_MIN, threshold = None, strict_success_pairs = false))]
fn mine<'py>(
    py: Python<'py>,
    attempts_jsonl: &str,
    delta_min: f64,
    threshold: Option<f64>,
    strict_success_pairs: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let options = MineOptions {
        delta_min,
        threshold,
        strict_success_pairs,
    };
    to_py(py, &mining::mine(&attempt_sets(attempts_jsonl)?, &options))
}

#[pyclass(name = "RuleTree", frozen)]
struct PyRuleTree {
    inner: tree::RuleTree,
}

#[pymethods]
impl PyRuleTree {
    /// Parses and validates tree text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        tree::parse(text)
            .map(|inner| PyRuleTree { inner })
            .map_err(value_error)
    }

    /// Structural problems as `path: message` strings; empty when valid.
    #[staticmethod]
    fn violations(text: &str) -> PyResult<Vec<String>> {
        let parsed = tree::parse_unchecked(text).map_err(value_error)?;
        Ok(match tree::validate(&parsed) {
            Ok(()) => Vec::new(),
            Err(v) => v.iter().map(ToString::to_string).collect(),
        })
    }

    fn serialize(&self) -> PyResult<String> {
        tree::serialize(&self.inner).map_err(value_error)
    }

    #[getter]
    fn always(&self) -> Vec<String> {
        self.inner.always.clone()
    }

    #[getter]
    fn branches<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.branches)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn rules(&self) -> Vec<String> {
        self.inner.rule_texts().into_iter().map(str::to_string).collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "RuleTree(always={}, branches={}, depth={})",
            self.inner.always.len(),
            self.inner.branches.len(),
            self.inner.depth()
        )
    }
}

/// Loads a dataset file into example dicts.
#[pyfunction]
#[pyo3(signature = (path, seed = 0))]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let examples = harness::load_dataset(&path, seed).map_err(value_error)?;
    to_py(py, &examples)
}

/// Runs the optimizer against a recorded cassette, with no network access.
/// Returns a summary dict; the full record lands in `run_dir` when given.
#[pyfunction]
#[pyo3(signature = (dataset, cassette, config, run_dir = None, base_prompt = None))]
fn optimize_replay<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    cassette: PathBuf,
    config: PathBuf,
    run_dir: Option<PathBuf>,
    base_prompt: Option<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let summary = py.detach(move || -> Result<serde_json::Value, String> {
        let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
        let config = OptimizationConfig::parse(&text).map_err(|e| e.to_string())?;
        let examples = harness::load_dataset(&dataset, config.seed).map_err(|e| e.to_string())?;
        let splits = harness::split(&examples, config.train_n, config.val_n, config.seed)
            .map_err(|e| e.to_string())?;
        let cassette = Cassette::load(&cassette, CassetteMode::Replay).map_err(|e| e.to_string())?;
        let gateway = Gateway::replay(Arc::new(cassette))
            .with_model(config.model.clone())
            .with_limits(config.limits.clone());
        let base = base_prompt.unwrap_or_else(|| contraprompt::prompts::DEFAULT_BASE_PROMPT.to_string());
        let mut optimizer = Optimizer::new(config, &gateway);
        if let Some(dir) = run_dir {
            optimizer = optimizer.with_run_dir(dir);
        }
        let outcome = optimizer
            .run(&splits.train, &splits.val, &base)
            .map_err(|e| e.to_string())?;
        Ok(serde_json::json!({
            "best_iteration": outcome.best.iteration,
            "train_score": outcome.best.train_score,
            "tree": outcome.best.tree,
            "completed": outcome.state.completed,
            "stop_reason": outcome.state.stop.map(|s| s.as_str()),
            "aborted": outcome.aborted,
            "trajectory": outcome.state.trajectory,
        }))
    });
    to_py(py, &summary.map_err(PyRuntimeError::new_err)?)
}

/// The report table for a finished run directory.
#[pyfunction]
fn report(run_dir: PathBuf) -> PyResult<String> {
    harness::build_report(&run_dir)
        .map(|r| r.to_table())
        .map_err(value_error)
}

#[pymodule]
fn contraprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("COARSE_FEEDBACK", contraprompt::prompts::COARSE_FEEDBACK)?;
    m.add_class::<PyRuleTree>()?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(make_feedback, m)?)?;
    m.add_function(wrap_pyfunction!(retry_success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mine, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_replay, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
