//! Python bindings. Structured values cross the boundary as plain Python
//! dicts and lists with the same field names as the JSON files written by
//! the command-line tool.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use simplex_rank::baselines::{bootstrap_rank_ci, bradley_terry_ties, simple_average, single_judge};
use simplex_rank::eval::spearman;
use simplex_rank::geometry::{barycentric_coords, make_nonidentifiability_witness};
use simplex_rank::inference::fit_dataset;
use simplex_rank::io::{load_dataset as load_file, save_dataset as save_file};
use simplex_rank::judge::{parse_evaluations as parse_reply, render_prompt as render, JudgeQuestion, TaskKind};
use simplex_rank::model::{
    Hyperparameters, JudgeVertices, MarginalScoreDistribution, Ranking, RubricSpec, ScoreDataset,
    DEFAULT_STRATUM,
};
use simplex_rank::sampler::SamplerConfig;
use simplex_rank::synthetic::{generate_synthetic, JudgeSource, ShiftSpec, SyntheticSpec};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import(obj.py(), "json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// A dataset given as a dict or as a path to a score file.
fn dataset_arg(obj: &Bound<'_, PyAny>) -> PyResult<ScoreDataset> {
    match obj.extract::<PathBuf>() {
        Ok(path) => load_file(&path).map_err(err),
        Err(_) => from_py(obj),
    }
}

#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &load_file(&path).map_err(err)?)
}

#[pyfunction]
fn save_dataset(dataset: &Bound<'_, PyAny>, path: PathBuf) -> PyResult<()> {
    save_file(&dataset_arg(dataset)?, &path).map_err(err)
}

/// Returns `(dataset, truth)`.
#[pyfunction]
#[pyo3(signature = (
    num_questions, num_candidates, num_judges, levels=3, assigned_levels=None,
    beta_max=0.0, quality=None, perfect_judges=false, correlation=0.0, shift=0.0,
    num_strata=1, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    num_questions: usize,
    num_candidates: usize,
    num_judges: usize,
    levels: usize,
    assigned_levels: Option<usize>,
    beta_max: f64,
    quality: Option<f64>,
    perfect_judges: bool,
    correlation: f64,
    shift: f64,
    num_strata: usize,
    seed: u64,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let rubric = RubricSpec::new(levels, assigned_levels.unwrap_or(levels)).map_err(err)?;
    let mut spec = SyntheticSpec::new(num_questions, num_candidates, num_judges, rubric);
    spec.judges = match (perfect_judges, quality) {
        (true, _) => JudgeSource::Perfect,
        (false, Some(quality)) => JudgeSource::PriorWithQuality { beta_max, quality },
        (false, None) => JudgeSource::Prior { beta_max },
    };
    spec.correlation = correlation;
    if shift > 0.0 {
        spec.shift = Some(ShiftSpec {
            magnitude: shift,
            delta: None,
        });
    }
    spec.num_strata = num_strata.max(1);
    let (ds, truth) = py.detach(|| generate_synthetic(&spec, seed));
    Ok((to_py(py, &ds)?, to_py(py, &truth)?))
}

/// Fits the Bayesian model; returns the stratified report (`pooled`,
/// `strata`, `question_counts`).
#[pyfunction]
#[pyo3(signature = (
    dataset, omega=0.0, beta_max=0.0, self_adjust=true, chains=4, warmup=1000,
    samples=1000, seed=0, stratify=false
))]
#[allow(clippy::too_many_arguments)]
fn rank<'py>(
    py: Python<'py>,
    dataset: &Bound<'py, PyAny>,
    omega: f64,
    beta_max: f64,
    self_adjust: bool,
    chains: usize,
    warmup: usize,
    samples: usize,
    seed: u64,
    stratify: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut ds = dataset_arg(dataset)?;
    if !stratify {
        for r in &mut ds.records {
            r.stratum_id = DEFAULT_STRATUM.to_string();
        }
    }
    let primary = Hyperparameters::primary(ds.rubric.num_true_levels());
    let hyper =
        Hyperparameters::new(omega, beta_max, primary.delta_dir, self_adjust).map_err(err)?;
    let cfg = SamplerConfig {
        chains,
        warmup,
        samples,
        seed,
        ..SamplerConfig::default()
    };
    let (report, _) = py
        .detach(|| fit_dataset(&ds, &hyper, &cfg))
        .map_err(err)?;
    to_py(py, &report)
}

/// Baseline ranking: `average`, `single`, `bootstrap` or `bt`.
#[pyfunction]
#[pyo3(signature = (dataset, method, replicates=1000, seed=0))]
fn baseline<'py>(
    py: Python<'py>,
    dataset: &Bound<'py, PyAny>,
    method: &str,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let ds = dataset_arg(dataset)?;
    match method {
        "average" => to_py(py, &simple_average(&ds).map_err(err)?),
        "single" => to_py(py, &single_judge(&ds).map_err(err)?),
        "bootstrap" => to_py(
            py,
            &py.detach(|| bootstrap_rank_ci(&ds, replicates, seed))
                .map_err(err)?,
        ),
        "bt" => {
            let (fit, report) = py
                .detach(|| bradley_terry_ties(&ds, replicates, seed))
                .map_err(err)?;
            to_py(py, &serde_json::json!({ "fit": fit, "report": report }))
        }
        other => Err(err(format!(
            "unknown baseline {other:?}; expected average, single, bootstrap or bt"
        ))),
    }
}

/// Spearman correlation between two orderings (best first) of the same ids.
#[pyfunction]
fn spearman_orders(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    let a = Ranking::strict(a).map_err(err)?;
    let b = Ranking::strict(b).map_err(err)?;
    spearman(&a, &b).map_err(err)
}

/// Barycentric coordinates of `point` with respect to judge vertices given
/// column-wise (one list per true level).
#[pyfunction]
fn barycentric<'py>(
    py: Python<'py>,
    point: Vec<f64>,
    vertices: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let point = MarginalScoreDistribution::new(point).map_err(err)?;
    let vertices = JudgeVertices::new(vertices).map_err(err)?;
    to_py(py, &barycentric_coords(&point, &vertices).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (vertices, epsilon=0.1))]
fn nonidentifiability_witness<'py>(
    py: Python<'py>,
    vertices: Vec<Vec<f64>>,
    epsilon: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let vertices = JudgeVertices::new(vertices).map_err(err)?;
    to_py(py, &make_nonidentifiability_witness(&vertices, epsilon).map_err(err)?)
}

/// Returns `{"text": ..., "order": [...]}`.
#[pyfunction]
#[pyo3(signature = (task, question, seed=0))]
fn render_prompt<'py>(
    py: Python<'py>,
    task: &str,
    question: &Bound<'py, PyAny>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: TaskKind = task.parse().map_err(err)?;
    let q: JudgeQuestion = from_py(question)?;
    to_py(py, &render(kind, &q, seed).map_err(err)?)
}

/// `(candidate_id, level)` pairs from a judge reply; `order[i]` is the
/// candidate shown as number `i + 1`.
#[pyfunction]
fn parse_evaluations(task: &str, text: &str, order: Vec<String>) -> PyResult<Vec<(String, u32)>> {
    let kind: TaskKind = task.parse().map_err(err)?;
    parse_reply(kind, text, &order).map_err(err)
}

#[pymodule]
fn simplex_rank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_orders, m)?)?;
    m.add_function(wrap_pyfunction!(barycentric, m)?)?;
    m.add_function(wrap_pyfunction!(nonidentifiability_witness, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_evaluations, m)?)?;
    Ok(())
}
