//! Population-mean estimation from voluntary samples whose selection depends
//! on the outcome itself.
//!
//! The selection probability follows a logistic model in `(x, y)`. Its
//! parameters are identified through an instrumented estimating equation, a
//! smoothed propensity `π̂(x)` calibrates a bias-correction target for all
//! units, and empirical-likelihood weights combine that calibration with
//! benchmarking on known auxiliary totals.

pub mod el;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod population;
pub mod ps_fit;
pub mod sim;
pub mod smoothing;
pub mod variance;

pub use el::{el_solve, mele, ConstraintSet, ElOptions, ElSolution};
pub use error::{EstimationError, Result};
pub use estimators::{
    estimate, fit_models, theta_el, theta_el_known_pi, theta_el_mar, theta_full, theta_ps,
    theta_rps_optimal, EstimateReport, EstimatorKind, FittedModels, PipelineOptions, WRule,
};
pub use population::{
    generate_population, generate_population_stream, load_population, read_population, CsvSchema,
    Oracle, PopulationFrame, Scenario, ScenarioConfig,
};
pub use ps_fit::{fit_ps, fit_ps_default, FitDiagnostics, Instrument, PsFitOptions, PsParams};
pub use sim::{
    estimate_file, run_coverage, run_monte_carlo, run_replicate, CoverageReport, CoverageTarget,
    McConfig, McSummary, OutputFormat,
};
pub use smoothing::{fit_alpha, Sigma2Rule, SmoothedPsModel};
pub use variance::{confidence_interval, var_el, var_ps, ElConstraints, InfluenceVector};
