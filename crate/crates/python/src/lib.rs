//! Python bindings: synthetic populations, file-free estimation and the
//! Monte Carlo summary.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use voluntary_el::estimators::{EstimatorKind, PipelineOptions, WRule};
use voluntary_el::population::{generate_population, PopulationFrame, Scenario, ScenarioConfig};
use voluntary_el::sim::{estimate_frame, run_monte_carlo, McConfig};
use voluntary_el::EstimationError;

fn to_py(e: EstimationError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = EstimationError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn parse_estimators(keys: &[String]) -> PyResult<Vec<EstimatorKind>> {
    keys.iter().map(|k| parse(k)).collect()
}

/// Synthetic population as a dict of columns: `x` (rows), `delta`, `y`
/// (`None` where unselected), plus the oracle `y_full` and `true_pi`.
#[pyfunction]
#[pyo3(signature = (scenario, n_units = 5000, seed = 20240101))]
fn generate<'py>(
    py: Python<'py>,
    scenario: &str,
    n_units: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ScenarioConfig {
        n_units,
        ..ScenarioConfig::new(parse::<Scenario>(scenario)?, seed)
    };
    let frame = generate_population(&cfg).map_err(to_py)?;
    let oracle = frame.oracle().expect("generated frames carry oracle data");
    let out = PyDict::new(py);
    let x: Vec<Vec<f64>> = (0..frame.n_units())
        .map(|i| frame.x_row(i).to_vec())
        .collect();
    out.set_item("x", x)?;
    out.set_item("delta", frame.delta().to_vec())?;
    out.set_item(
        "y",
        (0..frame.n_units())
            .map(|i| frame.y_observed(i))
            .collect::<Vec<_>>(),
    )?;
    out.set_item("y_full", oracle.y_full.clone())?;
    out.set_item("true_pi", oracle.true_pi.clone())?;
    Ok(out)
}

/// Runs the chosen estimators on observed data. Returns one dict per
/// estimator with `method`, `theta`, `variance` and `ci` (the last two may be `None`).
#[pyfunction]
#[pyo3(signature = (x, delta, y, estimators = vec!["ps".to_string(), "el1".to_string(), "el2".to_string()], ci_level = 0.95, ht_target = false))]
fn estimate<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    delta: Vec<bool>,
    y: Vec<Option<f64>>,
    estimators: Vec<String>,
    ci_level: f64,
    ht_target: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let width = x.first().map_or(0, Vec::len);
    let names = (1..=width).map(|j| format!("x{j}")).collect();
    let frame = PopulationFrame::new(names, x, delta, y).map_err(to_py)?;
    let kinds = parse_estimators(&estimators)?;
    let opts = PipelineOptions {
        w_rule: if ht_target {
            WRule::HorvitzThompson
        } else {
            WRule::PopulationMean
        },
        ..PipelineOptions::default()
    };
    let est = py
        .detach(|| estimate_frame(&frame, &kinds, &opts, ci_level))
        .map_err(to_py)?;
    est.reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.kind.label())?;
            d.set_item("theta", r.theta)?;
            d.set_item("variance", r.variance)?;
            d.set_item("ci", r.ci)?;
            Ok(d)
        })
        .collect()
}

/// Monte Carlo summary table as CSV text.
#[pyfunction]
#[pyo3(signature = (scenario, n_units = 5000, replications = 1000, seed = 20240101, estimators = None, workers = 0))]
fn simulate(
    py: Python<'_>,
    scenario: &str,
    n_units: usize,
    replications: usize,
    seed: u64,
    estimators: Option<Vec<String>>,
    workers: usize,
) -> PyResult<String> {
    let mut cfg = McConfig {
        scenario: parse(scenario)?,
        n_units,
        replications,
        seed,
        workers,
        ..McConfig::default()
    };
    if let Some(keys) = estimators {
        cfg.estimators = parse_estimators(&keys)?;
    }
    let summary = py.detach(|| run_monte_carlo(&cfg)).map_err(to_py)?;
    Ok(summary.to_csv())
}

#[pymodule]
pub fn voluntary_el_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
