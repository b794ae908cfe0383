//! Monte Carlo harness and single-file estimation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::estimators::{
    estimate, fit_models, fitted_loglik, EstimateReport, EstimatorKind, FittedModels,
    PipelineOptions, WRule,
};
use crate::population::{
    generate_population_stream, load_population, CsvSchema, PopulationFrame, Scenario,
    ScenarioConfig,
};
use crate::smoothing::ObsLogLik;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = EstimationError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(EstimationError::InvalidInput(format!(
                "unknown format `{s}`"
            ))),
        }
    }
}

/// Quantity an interval must contain to count as covering.
///
/// The linearization variance includes the unit-to-unit variation of the
/// fitted values, so it estimates the variance of `θ̂ − E(y)` over repeated
/// populations; intervals are therefore checked against `E(y)` by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageTarget {
    /// The replicate's own finite-population mean `N⁻¹ Σ yᵢ`.
    FinitePopulation,
    /// `E(y)` of the generating model.
    #[default]
    Superpopulation,
}

impl std::str::FromStr for CoverageTarget {
    type Err = EstimationError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "finite-population" | "finite" => Ok(CoverageTarget::FinitePopulation),
            "superpopulation" | "super" => Ok(CoverageTarget::Superpopulation),
            _ => Err(EstimationError::InvalidInput(format!(
                "unknown coverage target `{s}`"
            ))),
        }
    }
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Full,
        EstimatorKind::ElMar,
        EstimatorKind::Ps,
        EstimatorKind::El1,
        EstimatorKind::El2,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub scenario: Scenario,
    pub n_units: usize,
    pub replications: usize,
    pub seed: u64,
    pub phi_true: [f64; 3],
    pub estimators: Vec<EstimatorKind>,
    pub ci_level: f64,
    pub coverage_target: CoverageTarget,
    pub w_rule: WRule,
    /// Worker threads; 0 uses the number of available cores.
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for McConfig {
    fn default() -> Self {
        let base = ScenarioConfig::new(Scenario::M1, 20240101);
        Self {
            scenario: base.scenario,
            n_units: base.n_units,
            replications: 1000,
            seed: base.seed,
            phi_true: base.phi_true,
            estimators: default_estimators(),
            ci_level: 0.95,
            coverage_target: CoverageTarget::default(),
            w_rule: WRule::default(),
            workers: 0,
            out: None,
            format: OutputFormat::default(),
        }
    }
}

impl McConfig {
    /// Reads a TOML file; absent keys take their defaults.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: McConfig = toml::from_str(text)
            .map_err(|e| EstimationError::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            n_units: self.n_units,
            phi_true: self.phi_true,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_config().validate()?;
        if self.replications == 0 {
            return Err(EstimationError::InvalidInput(
                "replications must be at least 1".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(EstimationError::InvalidInput(
                "at least one estimator is required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ci_level) {
            return Err(EstimationError::InvalidInput(format!(
                "ci_level must lie in [0, 1), got {}",
                self.ci_level
            )));
        }
        Ok(())
    }
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub kind: EstimatorKind,
    pub theta: f64,
    pub variance: Option<f64>,
    pub covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: u64,
    /// Finite-population mean of this replicate.
    pub theta_n: f64,
    /// One entry per requested estimator, in request order; `Err` holds the message.
    pub results: Vec<std::result::Result<EstimatorRecord, String>>,
}

/// Generates replicate `index` and runs every requested estimator on it.
pub fn run_replicate(config: &McConfig, index: u64) -> Result<ReplicateRecord> {
    let frame = generate_population_stream(&config.scenario_config(), index)?;
    let theta_n = crate::estimators::theta_full(&frame)?;
    let target = match config.coverage_target {
        CoverageTarget::FinitePopulation => theta_n,
        CoverageTarget::Superpopulation => config.scenario.superpopulation_mean(),
    };
    let opts = PipelineOptions {
        w_rule: config.w_rule,
        ..PipelineOptions::default()
    };
    let fitted: Option<std::result::Result<FittedModels, String>> = config
        .estimators
        .iter()
        .any(|k| k.needs_ps_fit())
        .then(|| fit_models(&frame, &opts).map_err(|e| e.to_string()));

    let results = config
        .estimators
        .iter()
        .map(|&kind| {
            let models = match (&fitted, kind.needs_ps_fit()) {
                (Some(Err(e)), true) => return Err(e.clone()),
                (Some(Ok(m)), true) => Some(m),
                _ => None,
            };
            let report = estimate(&frame, kind, models, config.w_rule, config.ci_level)
                .map_err(|e| e.to_string())?;
            Ok(EstimatorRecord {
                kind,
                theta: report.theta,
                variance: report.variance,
                covered: report.ci.map(|(lo, hi)| lo <= target && target <= hi),
            })
        })
        .collect();
    Ok(ReplicateRecord {
        index,
        theta_n,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub kind: EstimatorKind,
    pub method: String,
    /// Replicates that produced an estimate.
    pub replications: usize,
    pub failures: usize,
    /// Mean of `θ̂ − θ_N`.
    pub bias: f64,
    /// Monte Carlo variance of `θ̂` (divisor `B`).
    pub variance: f64,
    /// `bias² + variance`.
    pub mse: f64,
    pub mean_variance_estimate: Option<f64>,
    pub coverage: Option<f64>,
    /// `mean(V̂) / variance − 1`.
    pub variance_relative_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub scenario: Scenario,
    pub n_units: usize,
    pub replications: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub coverage_target: CoverageTarget,
    pub estimators: Vec<EstimatorSummary>,
}

impl McSummary {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.kind == kind)
    }

    /// Table with header
    /// `scenario,method,bias,var_x1000,mse_x1000,mean_vhat_x1000,coverage,failures`.
    /// Empty cells mark quantities not defined for an estimator.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,method,bias,var_x1000,mse_x1000,mean_vhat_x1000,coverage,failures\n",
        );
        let opt =
            |v: Option<f64>, scale: f64| v.map(|v| format!("{:.6}", v * scale)).unwrap_or_default();
        for s in &self.estimators {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{},{},{}",
                self.scenario.label(),
                s.method,
                s.bias,
                s.variance * 1000.0,
                s.mse * 1000.0,
                opt(s.mean_variance_estimate, 1000.0),
                opt(s.coverage, 1.0),
                s.failures
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json() + "\n",
        }
    }
}

/// Aggregates records in replicate order.
pub fn summarize(config: &McConfig, records: &[ReplicateRecord]) -> Result<McSummary> {
    let b = records.len();
    let mut estimators = Vec::with_capacity(config.estimators.len());
    for (slot, &kind) in config.estimators.iter().enumerate() {
        let ok: Vec<(&EstimatorRecord, f64)> = records
            .iter()
            .filter_map(|r| r.results[slot].as_ref().ok().map(|e| (e, r.theta_n)))
            .collect();
        let failures = b - ok.len();
        if failures * 10 > b {
            return Err(EstimationError::TooManyFailures {
                label: kind.label().into(),
                failures,
                replications: b,
            });
        }
        let m = ok.len() as f64;
        let mean = |f: &dyn Fn(&(&EstimatorRecord, f64)) -> f64| ok.iter().map(f).sum::<f64>() / m;
        let bias = mean(&|(e, t)| e.theta - t);
        let centre = mean(&|(e, _)| e.theta);
        let variance = mean(&|(e, _)| (e.theta - centre).powi(2));
        let with_var = ok.iter().all(|(e, _)| e.variance.is_some()) && !ok.is_empty();
        let mean_v = with_var.then(|| mean(&|(e, _)| e.variance.unwrap_or(0.0)));
        let coverage =
            with_var.then(|| mean(&|(e, _)| f64::from(u8::from(e.covered == Some(true)))));
        estimators.push(EstimatorSummary {
            kind,
            method: kind.label().into(),
            replications: ok.len(),
            failures,
            bias,
            variance,
            mse: bias * bias + variance,
            mean_variance_estimate: mean_v,
            coverage,
            variance_relative_bias: mean_v.map(|v| v / variance - 1.0),
        });
    }
    Ok(McSummary {
        scenario: config.scenario,
        n_units: config.n_units,
        replications: b,
        seed: config.seed,
        ci_level: config.ci_level,
        coverage_target: config.coverage_target,
        estimators,
    })
}

/// Runs all replicates on a pool of `config.workers` threads. Records are
/// collected in index order, so the summary does not depend on scheduling.
pub fn run_replicates(config: &McConfig) -> Result<Vec<ReplicateRecord>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| EstimationError::InvalidInput(format!("worker pool: {e}")))?;
    pool.install(|| {
        (0..config.replications as u64)
            .into_par_iter()
            .map(|i| run_replicate(config, i))
            .collect()
    })
}

pub fn run_monte_carlo(config: &McConfig) -> Result<McSummary> {
    summarize(config, &run_replicates(config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: Scenario,
    pub method: String,
    pub replications: usize,
    pub failures: usize,
    pub ci_level: f64,
    pub coverage_target: CoverageTarget,
    pub coverage: f64,
    pub mc_variance: f64,
    pub mean_variance_estimate: f64,
    /// `mean(V̂) / mc_variance − 1`.
    pub variance_relative_bias: f64,
}

impl CoverageReport {
    pub fn to_csv(&self) -> String {
        format!(
            "scenario,method,ci_level,coverage,mc_var_x1000,mean_vhat_x1000,vhat_relative_bias,failures\n\
             {},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            self.scenario.label(),
            self.method,
            self.ci_level,
            self.coverage,
            self.mc_variance * 1000.0,
            self.mean_variance_estimate * 1000.0,
            self.variance_relative_bias,
            self.failures
        )
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => {
                serde_json::to_string_pretty(self).expect("report serializes") + "\n"
            }
        }
    }
}

/// Coverage of the EL estimator with benchmarking and its variance estimator.
pub fn run_coverage(config: &McConfig) -> Result<CoverageReport> {
    let cfg = McConfig {
        estimators: vec![EstimatorKind::El2],
        ..config.clone()
    };
    let summary = run_monte_carlo(&cfg)?;
    let s = &summary.estimators[0];
    let mean_v = s.mean_variance_estimate.unwrap_or(f64::NAN);
    Ok(CoverageReport {
        scenario: cfg.scenario,
        method: s.method.clone(),
        replications: s.replications,
        failures: s.failures,
        ci_level: cfg.ci_level,
        coverage_target: cfg.coverage_target,
        coverage: s.coverage.unwrap_or(f64::NAN),
        mc_variance: s.variance,
        mean_variance_estimate: mean_v,
        variance_relative_bias: s.variance_relative_bias.unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEstimate {
    pub n_units: usize,
    pub n_sample: usize,
    /// Fitted selection model, when an estimator needed it.
    pub phi: Option<Vec<f64>>,
    pub fit_iterations: Option<usize>,
    pub obs_loglik: Option<ObsLogLik>,
    pub reports: Vec<EstimateReport>,
}

impl FileEstimate {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,theta,variance,ci_lo,ci_hi\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.10}")).unwrap_or_default();
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{},{:.10},{},{},{}",
                r.kind.label(),
                r.theta,
                opt(r.variance),
                opt(r.ci.map(|c| c.0)),
                opt(r.ci.map(|c| c.1))
            );
        }
        out
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => {
                serde_json::to_string_pretty(self).expect("report serializes") + "\n"
            }
        }
    }
}

/// Runs the chosen estimators on an in-memory frame.
pub fn estimate_frame(
    frame: &PopulationFrame,
    estimators: &[EstimatorKind],
    opts: &PipelineOptions,
    ci_level: f64,
) -> Result<FileEstimate> {
    frame.require_estimable()?;
    if let Some(k) = estimators.iter().find(|k| k.needs_oracle()) {
        if frame.oracle().is_none() {
            return Err(EstimationError::OracleRequired(k.label()));
        }
    }
    let fitted = if estimators.iter().any(|k| k.needs_ps_fit()) {
        Some(fit_models(frame, opts)?)
    } else {
        None
    };
    let reports = estimators
        .iter()
        .map(|&k| estimate(frame, k, fitted.as_ref(), opts.w_rule, ci_level))
        .collect::<Result<Vec<_>>>()?;
    Ok(FileEstimate {
        n_units: frame.n_units(),
        n_sample: frame.n_sample(),
        phi: fitted.as_ref().map(|f| f.ps.phi.iter().copied().collect()),
        fit_iterations: fitted.as_ref().map(|f| f.diagnostics.iterations),
        obs_loglik: fitted.as_ref().map(|f| fitted_loglik(frame, f)),
        reports,
    })
}

/// Loads a CSV and runs the chosen estimators on it.
pub fn estimate_file(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    estimators: &[EstimatorKind],
    opts: &PipelineOptions,
    ci_level: f64,
) -> Result<FileEstimate> {
    let frame = load_population(path, schema)?;
    estimate_frame(&frame, estimators, opts, ci_level)
}
