//! Estimation pipelines for the population mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::el::{
    build_benchmarking, build_bias_calibration, el_solve, mele, ElOptions, ElSolution,
};
use crate::error::{EstimationError, Result};
use crate::population::PopulationFrame;
use crate::ps_fit::{
    fit_mar_logistic, fit_ps, h_grad, initial_params, ps_prob, FitDiagnostics, PsFitOptions,
    PsParams,
};
use crate::smoothing::{
    fit_alpha, obs_loglik, smoothed_pi, ObsLogLik, Sigma2Rule, SmoothedPsModel,
};
use crate::variance::{
    confidence_interval, var_el, var_el_known_pi, var_ps, ElConstraints, InfluenceVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Population mean of the full outcome vector (synthetic data only).
    Full,
    /// EL with a misspecified missing-at-random logistic model.
    ElMar,
    /// Inverse-propensity estimator under the fitted nonignorable model.
    Ps,
    /// EL with bias calibration.
    El1,
    /// EL with bias calibration and benchmarking.
    El2,
    /// EL with the true selection probabilities (synthetic data only).
    ElKnownPi,
    /// Optimal regression propensity-score estimator.
    RpsOpt,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::Full,
        EstimatorKind::ElMar,
        EstimatorKind::Ps,
        EstimatorKind::El1,
        EstimatorKind::El2,
        EstimatorKind::ElKnownPi,
        EstimatorKind::RpsOpt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Full => "Full",
            EstimatorKind::ElMar => "EL (MAR)",
            EstimatorKind::Ps => "PS",
            EstimatorKind::El1 => "EL-1",
            EstimatorKind::El2 => "EL-2",
            EstimatorKind::ElKnownPi => "EL (known pi)",
            EstimatorKind::RpsOpt => "RPS-opt",
        }
    }

    /// Name used on the command line.
    pub fn key(self) -> &'static str {
        match self {
            EstimatorKind::Full => "full",
            EstimatorKind::ElMar => "el-mar",
            EstimatorKind::Ps => "ps",
            EstimatorKind::El1 => "el1",
            EstimatorKind::El2 => "el2",
            EstimatorKind::ElKnownPi => "el-known-pi",
            EstimatorKind::RpsOpt => "rps-opt",
        }
    }

    pub fn needs_oracle(self) -> bool {
        matches!(self, EstimatorKind::Full | EstimatorKind::ElKnownPi)
    }

    /// Whether the estimator uses the fitted nonignorable selection model.
    pub fn needs_ps_fit(self) -> bool {
        matches!(
            self,
            EstimatorKind::Ps | EstimatorKind::El1 | EstimatorKind::El2 | EstimatorKind::RpsOpt
        )
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = EstimationError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.key() == key)
            .ok_or_else(|| EstimationError::InvalidInput(format!("unknown estimator `{s}`")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// How the bias-calibration target `W` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WRule {
    /// Population mean of the (smoothed or true) propensity.
    #[default]
    PopulationMean,
    /// `n / N`.
    HorvitzThompson,
}

/// Population mean of the full outcome; refused unless the frame carries oracle data.
pub fn theta_full(frame: &PopulationFrame) -> Result<f64> {
    let oracle = frame
        .oracle()
        .ok_or(EstimationError::OracleRequired("Full"))?;
    Ok(oracle.y_full.iter().sum::<f64>() / frame.n_units() as f64)
}

/// `θ̂_PS = N⁻¹ Σ_S yᵢ / π(xᵢ, yᵢ; φ̂)`.
pub fn theta_ps(frame: &PopulationFrame, ps: &PsParams) -> f64 {
    frame
        .respondents()
        .map(|(_, x, y)| y / ps_prob(x, y, ps))
        .sum::<f64>()
        / frame.n_units() as f64
}

fn w_target(frame: &PopulationFrame, rule: WRule, population_mean: impl Fn() -> f64) -> f64 {
    match rule {
        WRule::PopulationMean => population_mean(),
        WRule::HorvitzThompson => frame.n_sample() as f64 / frame.n_units() as f64,
    }
}

/// Smoothed bias-calibration target `Ŵ = N⁻¹ Σᵢ π̂(xᵢ; φ̂)`, or `n/N`.
pub fn smoothed_w_target(frame: &PopulationFrame, smoothed: &SmoothedPsModel, rule: WRule) -> f64 {
    w_target(frame, rule, || {
        (0..frame.n_units())
            .map(|i| smoothed_pi(frame.x_row(i), smoothed))
            .sum::<f64>()
            / frame.n_units() as f64
    })
}

fn el_with(
    frame: &PopulationFrame,
    pi_sample: &[f64],
    w: f64,
    constraints: ElConstraints,
) -> Result<(f64, ElSolution)> {
    let mut set = build_bias_calibration(pi_sample, w)?;
    if constraints == ElConstraints::WithBenchmarking {
        set = set.join(build_benchmarking(frame)?)?;
    }
    let sol = el_solve(&set, &ElOptions::default())?;
    let theta = mele(&sol, &frame.respondent_y())?;
    Ok((theta, sol))
}

/// Two-step EL estimator: `π̂ᵢ = π(xᵢ, yᵢ; φ̂)` on respondents, bias
/// calibration to `Ŵ`, optionally benchmarking to `X̄_N`.
pub fn theta_el(
    frame: &PopulationFrame,
    ps: &PsParams,
    smoothed: &SmoothedPsModel,
    constraints: ElConstraints,
    rule: WRule,
) -> Result<(f64, ElSolution)> {
    let pi_sample: Vec<f64> = frame
        .respondents()
        .map(|(_, x, y)| ps_prob(x, y, ps))
        .collect();
    let w = smoothed_w_target(frame, smoothed, rule);
    el_with(frame, &pi_sample, w, constraints)
}

/// `W` for known propensities: `N⁻¹ Σ πᵢ` or `n/N`.
pub fn known_pi_w_target(frame: &PopulationFrame, true_pi: &[f64], rule: WRule) -> f64 {
    w_target(frame, rule, || {
        true_pi.iter().sum::<f64>() / true_pi.len() as f64
    })
}

/// EL estimator with known selection probabilities (one per unit), bias
/// calibration and benchmarking.
pub fn theta_el_known_pi(
    frame: &PopulationFrame,
    true_pi: &[f64],
    rule: WRule,
) -> Result<(f64, ElSolution)> {
    if true_pi.len() != frame.n_units() {
        return Err(EstimationError::InvalidInput(
            "need one known propensity per unit".into(),
        ));
    }
    let pi_sample: Vec<f64> = frame.respondents().map(|(i, _, _)| true_pi[i]).collect();
    let w = known_pi_w_target(frame, true_pi, rule);
    el_with(frame, &pi_sample, w, ElConstraints::WithBenchmarking)
}

/// EL estimator under a missing-at-random logistic model on every auxiliary
/// column, with bias calibration and benchmarking. Returns the fitted model too.
pub fn theta_el_mar(frame: &PopulationFrame) -> Result<(f64, ElSolution, PsParams)> {
    let all: Vec<usize> = (0..frame.n_covariates()).collect();
    let mar = fit_mar_logistic(frame, &all)?;
    let pi_all: Vec<f64> = (0..frame.n_units())
        .map(|i| crate::linalg::expit(mar.covariate_predictor(frame.x_row(i))))
        .collect();
    let pi_sample: Vec<f64> = frame.respondents().map(|(i, _, _)| pi_all[i]).collect();
    let w = pi_all.iter().sum::<f64>() / frame.n_units() as f64;
    let (theta, sol) = el_with(frame, &pi_sample, w, ElConstraints::WithBenchmarking)?;
    Ok((theta, sol, mar))
}

/// Optimal regression propensity-score estimator.
///
/// Solves `Σ_S wᵢ (yᵢ − xᵢ'β − bᵢ'γ) xᵢ = 0` and `Σ_S wᵢ (yᵢ − xᵢ'β − bᵢ'γ) hᵢ = 0`
/// with `wᵢ = π̂ᵢ⁻¹(1 − π̂ᵢ)`, then returns
/// `N⁻¹ Σᵢ {xᵢ'β̂ + δᵢ π̂ᵢ⁻¹ (yᵢ − xᵢ'β̂)}`.
///
/// When `x` lies in the span of `b` the split between `β` and `γ` is not
/// unique; the minimum-norm solution is used, which is valid because the
/// estimator does not depend on `β` along those directions. A rank-deficient
/// system for which the estimate would depend on the choice is an error.
pub fn theta_rps_optimal(frame: &PopulationFrame, ps: &PsParams) -> Result<f64> {
    let p = frame.n_covariates();
    let qb = ps.instrument.dim();
    let q = ps.dim();
    let (rows, cols) = (p + q, p + qb);
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut rhs = DVector::<f64>::zeros(rows);
    let mut reg = DVector::<f64>::zeros(cols);
    let mut ins = DVector::<f64>::zeros(rows);
    for (_, x, y) in frame.respondents() {
        let w = (-ps.linear_predictor(x, y)).exp();
        reg.rows_mut(0, p).copy_from_slice(x);
        reg.rows_mut(p, qb).copy_from(&ps.instrument.eval(x));
        ins.rows_mut(0, p).copy_from_slice(x);
        ins.rows_mut(p, q).copy_from(&h_grad(x, y, ps));
        a += &ins * reg.transpose() * w;
        rhs += &ins * (w * y);
    }

    // d'β is the β-dependent part of the estimate.
    let n = frame.n_units() as f64;
    let mut d = DVector::<f64>::from_vec(frame.x_means());
    for (_, x, y) in frame.respondents() {
        let inv = 1.0 / ps_prob(x, y, ps);
        for j in 0..p {
            d[j] -= inv * x[j] / n;
        }
    }

    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let rank_tol = 1e-10 * smax;
    let advice = "remove collinear auxiliary columns or instrument components";
    if smax == 0.0 || !smax.is_finite() {
        return Err(EstimationError::singular(
            "optimal regression estimator",
            advice,
        ));
    }
    let v_t = svd.v_t.as_ref().expect("requested V");
    let scale = 1.0 + d.norm() + frame.x_means().iter().map(|v| v.abs()).sum::<f64>();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= rank_tol {
            let null_beta = v_t.row(k).columns(0, p).transpose();
            if d.dot(&null_beta).abs() > 1e-6 * scale {
                return Err(EstimationError::singular(
                    "optimal regression estimator",
                    advice,
                ));
            }
        }
    }
    // Null directions beyond the number of singular values (wide systems).
    if cols > rows {
        let full = a_null_check(&svd, rows, cols, p, &d, scale);
        if !full {
            return Err(EstimationError::singular(
                "optimal regression estimator",
                advice,
            ));
        }
    }
    let coef = svd
        .solve(&rhs, rank_tol)
        .map_err(|_| EstimationError::singular("optimal regression estimator", advice))?;
    let beta = coef.rows(0, p);

    let mut total = 0.0;
    for i in 0..frame.n_units() {
        let x = frame.x_row(i);
        let fit: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
        total += fit;
        if let Some(y) = frame.y_observed(i) {
            total += (y - fit) / ps_prob(x, y, ps);
        }
    }
    Ok(total / n)
}

fn a_null_check(
    svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    _rows: usize,
    cols: usize,
    p: usize,
    d: &DVector<f64>,
    scale: f64,
) -> bool {
    // Projector onto the complement of the row space of `a`.
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut proj = DMatrix::<f64>::identity(cols, cols);
    let smax = svd.singular_values.max();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-10 * smax {
            let v = v_t.row(k).transpose();
            proj -= &v * v.transpose();
        }
    }
    let mut ext = DVector::<f64>::zeros(cols);
    ext.rows_mut(0, p).copy_from(d);
    (proj * ext).norm() <= 1e-6 * scale
}

/// Fitted nonignorable selection model and its smoothed companion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModels {
    pub ps: PsParams,
    pub diagnostics: FitDiagnostics,
    pub smoothed: SmoothedPsModel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub fit: PsFitOptions,
    pub sigma2: Sigma2Rule,
    pub w_rule: WRule,
    /// Starting value for φ; `None` uses the missing-at-random start.
    pub init: Option<PsParams>,
}

/// Fits `φ̂` and the smoothed propensity model.
pub fn fit_models(frame: &PopulationFrame, opts: &PipelineOptions) -> Result<FittedModels> {
    let init = match &opts.init {
        Some(p) => p.clone(),
        None => initial_params(frame, &PsParams::nonignorable_default(frame.n_covariates())),
    };
    let (ps, diagnostics) = fit_ps(frame, &init, &opts.fit)?;
    let smoothed = fit_alpha(frame, &ps, opts.sigma2)?;
    Ok(FittedModels {
        ps,
        diagnostics,
        smoothed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub kind: EstimatorKind,
    pub theta: f64,
    /// Linearization variance, where implemented for this estimator.
    pub variance: Option<f64>,
    pub ci: Option<(f64, f64)>,
    #[serde(skip)]
    pub influence: Option<InfluenceVector>,
    /// Constraint residuals of the EL solution, if any.
    pub constraint_residual: Vec<f64>,
}

/// Runs one estimator. `fitted` must be provided for estimators that use the
/// nonignorable model.
pub fn estimate(
    frame: &PopulationFrame,
    kind: EstimatorKind,
    fitted: Option<&FittedModels>,
    w_rule: WRule,
    ci_level: f64,
) -> Result<EstimateReport> {
    let need = || {
        fitted.ok_or_else(|| EstimationError::InvalidInput(format!("{kind} needs a fitted model")))
    };
    let oracle_pi = || {
        frame
            .oracle()
            .map(|o| o.true_pi.as_slice())
            .ok_or(EstimationError::OracleRequired("EL with known pi"))
    };
    let (theta, var, residual) = match kind {
        EstimatorKind::Full => (theta_full(frame)?, None, Vec::new()),
        EstimatorKind::ElMar => {
            let (t, sol, _) = theta_el_mar(frame)?;
            (t, None, sol.constraint_residual)
        }
        EstimatorKind::Ps => {
            let f = need()?;
            (
                theta_ps(frame, &f.ps),
                Some(var_ps(frame, &f.ps)?),
                Vec::new(),
            )
        }
        EstimatorKind::El1 | EstimatorKind::El2 => {
            let f = need()?;
            let c = if kind == EstimatorKind::El1 {
                ElConstraints::BiasCalibration
            } else {
                ElConstraints::WithBenchmarking
            };
            let (t, sol) = theta_el(frame, &f.ps, &f.smoothed, c, w_rule)?;
            let w = smoothed_w_target(frame, &f.smoothed, w_rule);
            let v = var_el(frame, &f.ps, &f.smoothed, c, w)?;
            (t, Some(v), sol.constraint_residual)
        }
        EstimatorKind::ElKnownPi => {
            let pi = oracle_pi()?;
            let (t, sol) = theta_el_known_pi(frame, pi, w_rule)?;
            let w = known_pi_w_target(frame, pi, w_rule);
            (
                t,
                Some(var_el_known_pi(frame, pi, w)?),
                sol.constraint_residual,
            )
        }
        EstimatorKind::RpsOpt => (theta_rps_optimal(frame, &need()?.ps)?, None, Vec::new()),
    };
    let (variance, influence) = match var {
        Some((v, iv)) => (Some(v), Some(iv)),
        None => (None, None),
    };
    let ci = variance
        .map(|v| confidence_interval(theta, v, ci_level))
        .transpose()?;
    Ok(EstimateReport {
        kind,
        theta,
        variance,
        ci,
        influence,
        constraint_residual: residual,
    })
}

/// Observed log-likelihood of the fitted models on `frame`.
pub fn fitted_loglik(frame: &PopulationFrame, fitted: &FittedModels) -> ObsLogLik {
    obs_loglik(frame, &fitted.smoothed)
}
