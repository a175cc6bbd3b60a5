//! Python bindings: event scoring, dataset building, cross-validation and
//! the analytics helpers, returning plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use odorwatch_core::analytics::{
    cuts_for, default_stopwords, ngram_frequency, quantile_sorted, segment_users, tokenize, UserActivity,
};
use odorwatch_core::config::{Provenance, RunConfig};
use odorwatch_core::ensemble::{ForestParams, Task, Variant};
use odorwatch_core::evaluation::{event_confusion, rolling_cv, DaytimePolicy, ForestLearner};
use odorwatch_core::store::Store;
use odorwatch_core::synthetic::{generate, SyntheticConfig};

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let l = PyList::empty(py);
            for x in a {
                l.append(to_py(py, x)?)?;
            }
            l.into_any().unbind()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn ser<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
    )
}

fn runtime<E: ToString>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn load_config(config: Option<&str>, data_dir: Option<&str>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(std::path::Path::new(p)).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = data_dir {
        cfg.data_dir = d.into();
    }
    Ok(cfg)
}

/// Event-level confusion of two hourly series. `local_hours` gives each
/// hour's local hour of day; `all_day` scores every hour.
#[pyfunction]
#[pyo3(signature = (truth, predicted, local_hours, all_day = false))]
fn event_scores(
    py: Python<'_>,
    truth: Vec<bool>,
    predicted: Vec<bool>,
    local_hours: Vec<u8>,
    all_day: bool,
) -> PyResult<Py<PyAny>> {
    if truth.len() != predicted.len() || truth.len() != local_hours.len() {
        return Err(PyValueError::new_err(
            "truth, predicted and local_hours must have equal length",
        ));
    }
    let policy = if all_day {
        DaytimePolicy::all_day()
    } else {
        DaytimePolicy::default()
    };
    let c = event_confusion(&truth, &predicted, &local_hours, &policy);
    let d = PyDict::new(py);
    d.set_item("tp", c.tp)?;
    d.set_item("fp", c.fp)?;
    d.set_item("fn", c.fn_)?;
    d.set_item("precision", c.precision())?;
    d.set_item("recall", c.recall())?;
    d.set_item("fscore", c.fscore())?;
    Ok(d.into_any().unbind())
}

/// Writes the synthetic benchmark into an empty store at `data_dir`.
#[pyfunction]
#[pyo3(signature = (data_dir, hours = 2 * 365 * 24, seed = 7))]
fn synthesize(py: Python<'_>, data_dir: &str, hours: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let b = py
        .detach(|| {
            let store = Store::open(data_dir)?;
            let b = generate(&SyntheticConfig {
                seed,
                hours,
                ..SyntheticConfig::default()
            })
            .map_err(|e| odorwatch_core::store::StoreError::Rejected(e.to_string()))?;
            store.append_readings(b.readings.clone())?;
            for r in &b.reports {
                store.append_report(r.clone())?;
            }
            Ok::<_, odorwatch_core::store::StoreError>(b)
        })
        .map_err(runtime)?;
    let d = PyDict::new(py);
    d.set_item("readings", b.readings.len())?;
    d.set_item("reports", b.reports.len())?;
    d.set_item("positive_rate", b.positive_rate())?;
    Ok(d.into_any().unbind())
}

/// Predictor rows (None where missing), column names, hour starts and labels.
#[pyfunction]
#[pyo3(signature = (data_dir, config = None))]
fn build_dataset(py: Python<'_>, data_dir: &str, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config, Some(data_dir))?;
    let d = py.detach(|| {
        let store = Store::open(&cfg.data_dir).map_err(runtime)?;
        cfg.pipeline().map_err(runtime)?.full_dataset(&store).map_err(runtime)
    })?;
    let out = PyDict::new(py);
    out.set_item("columns", d.x.columns.iter().map(|c| c.to_string()).collect::<Vec<_>>())?;
    out.set_item("hours", d.x.hours.iter().map(|h| h.hour_start).collect::<Vec<_>>())?;
    let rows: Vec<Vec<Option<f64>>> = (0..d.x.n_rows()).map(|r| d.x.row(r).to_vec()).collect();
    out.set_item("x", rows)?;
    out.set_item("score", d.labels.iter().map(|l| l.score).collect::<Vec<_>>())?;
    out.set_item("positive", d.labels.iter().map(|l| l.positive).collect::<Vec<_>>())?;
    out.set_item("provenance", ser(py, &Provenance::of(&cfg))?)?;
    Ok(out.into_any().unbind())
}

/// Rolling-origin CV of one variant (`cls-et`, `cls-rf`, `reg-et`, `reg-rf`).
#[pyfunction]
#[pyo3(signature = (data_dir, variant = "cls-et", trees = 200, config = None, max_test_folds = None))]
fn cross_validate(
    py: Python<'_>,
    data_dir: &str,
    variant: &str,
    trees: usize,
    config: Option<&str>,
    max_test_folds: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config, Some(data_dir))?;
    let (v, t) = match variant {
        "cls-et" => (Variant::ExtraTrees, Task::Classification),
        "cls-rf" => (Variant::RandomForest, Task::Classification),
        "reg-et" => (Variant::ExtraTrees, Task::Regression),
        "reg-rf" => (Variant::RandomForest, Task::Regression),
        other => return Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
    };
    let report = py.detach(|| {
        let store = Store::open(&cfg.data_dir).map_err(runtime)?;
        let d = cfg.pipeline().map_err(runtime)?.full_dataset(&store).map_err(runtime)?;
        let mut p = ForestParams::new(v, t);
        p.n_trees = trees;
        p.score_threshold = cfg.labels.threshold as f64;
        let mut cv = cfg.cv;
        if max_test_folds.is_some() {
            cv.max_test_folds = max_test_folds;
        }
        rolling_cv(&d, &cfg.calendar().map_err(runtime)?, &cv, &ForestLearner::new(p)).map_err(runtime)
    })?;
    ser(py, &report)
}

/// Segments users given `(user, reports, events)` counts.
#[pyfunction]
fn segment(py: Python<'_>, users: Vec<(String, u64, u64)>) -> PyResult<Py<PyAny>> {
    let acts: Vec<UserActivity> = users
        .into_iter()
        .map(|(u, r, e)| UserActivity::counts(u, r, e))
        .collect();
    let cuts = cuts_for(&acts).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let seg = segment_users(&acts).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = PyDict::new(py);
    out.set_item("report_cut", cuts.report_cut)?;
    out.set_item("event_cut", cuts.event_cut)?;
    let groups = PyDict::new(py);
    for (u, g) in &seg.assignment {
        groups.set_item(u, g.as_str())?;
    }
    out.set_item("groups", groups)?;
    out.set_item("shares", ser(py, &seg.shares)?)?;
    Ok(out.into_any().unbind())
}

/// Most frequent n-grams after stopword removal, as `(gram, count)`.
#[pyfunction]
#[pyo3(signature = (texts, n = 1))]
fn ngrams(texts: Vec<String>, n: usize) -> PyResult<Vec<(String, usize)>> {
    ngram_frequency(&texts, n, default_stopwords()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn tokens(text: &str) -> Vec<String> {
    tokenize(text)
}

/// Linear-interpolation quantile of `values`.
#[pyfunction]
fn quantile(mut values: Vec<f64>, q: f64) -> Option<f64> {
    values.sort_by(f64::total_cmp);
    quantile_sorted(&values, q)
}

/// Hash of a configuration file, or of the defaults, as artifacts record it.
#[pyfunction]
#[pyo3(signature = (config = None, data_dir = None))]
fn config_hash(config: Option<&str>, data_dir: Option<&str>) -> PyResult<String> {
    Ok(load_config(config, data_dir)?.hash())
}

#[pymodule]
fn odorwatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", odorwatch_core::config::CODE_VERSION)?;
    m.add_function(wrap_pyfunction!(event_scores, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(ngrams, m)?)?;
    m.add_function(wrap_pyfunction!(tokens, m)?)?;
    m.add_function(wrap_pyfunction!(quantile, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    Ok(())
}
