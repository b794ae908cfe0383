//! Smoothed propensity score under a Gaussian working model for the
//! respondents' outcome, `y | x, δ=1 ~ N(x̃'α, σ²)` with `x̃ = (1, x')'`.
//!
//! With the logistic selection model, `ω(x, y) = 1 + exp(−c(x) − φ_y y)` and the
//! Gaussian moment-generating function gives the smoothed weight in closed form:
//!
//! ```text
//! ω̂(x) = ∫ ω(x, y) f̂₁(y | x) dy = 1 + exp(−c(x) − φ_y x̃'α + ½ φ_y² σ²)
//! π̂(x) = 1 / ω̂(x)
//! ```
//!
//! `α` is chosen so the smoothed weights reproduce the instrument totals,
//! `Σ δᵢ ω̂(xᵢ) bᵢ = Σ bᵢ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::linalg::{
    expit, gauss_newton, softplus, weighted_least_squares, GaussNewtonFailure, GaussNewtonOptions,
    ResidualSystem,
};
use crate::population::PopulationFrame;
use crate::ps_fit::{ps_prob, Instrument, PsParams};

/// `|φ_y|` at or below which the calibration system no longer depends on `α`.
pub const DEGENERATE_OUTCOME_COEF: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sigma2Rule {
    Fixed(f64),
    /// Residual variance of the respondents' least-squares fit.
    ResidualVariance,
}

impl Default for Sigma2Rule {
    fn default() -> Self {
        Sigma2Rule::Fixed(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPsModel {
    pub ps: PsParams,
    /// Outcome regressors `x̃`.
    pub design: Instrument,
    pub alpha: DVector<f64>,
    pub sigma2: f64,
    /// `‖Σ δᵢ ω̂(xᵢ) bᵢ − Σ bᵢ‖∞` on the frame used for fitting.
    pub calibration_residual: f64,
    /// `α` was not identified by calibration and holds the least-squares fit.
    pub degenerate: bool,
    pub iterations: usize,
}

impl SmoothedPsModel {
    /// Same working model evaluated at a different `φ` (α and σ² held fixed).
    pub fn with_phi(&self, phi: DVector<f64>) -> Self {
        Self {
            ps: self.ps.with_phi(phi),
            ..self.clone()
        }
    }

    /// `x̃'α`, the working-model mean of `y` at `x`.
    pub fn outcome_mean(&self, x_row: &[f64]) -> f64 {
        self.design.eval(x_row).dot(&self.alpha)
    }

    /// Linear predictor of `π̂(x)`: `c(x) + φ_y x̃'α − ½φ_y²σ²`.
    pub fn smoothed_predictor(&self, x_row: &[f64]) -> f64 {
        let c = self.ps.covariate_predictor(x_row);
        match self.ps.outcome_coef() {
            Some(g) => c + g * self.outcome_mean(x_row) - 0.5 * g * g * self.sigma2,
            None => c,
        }
    }
}

/// `π̂(x; φ)`.
pub fn smoothed_pi(x_row: &[f64], model: &SmoothedPsModel) -> f64 {
    expit(model.smoothed_predictor(x_row))
}

/// `ω̂(x; φ) = 1/π̂(x; φ) ≥ 1`.
pub fn smoothed_weight(x_row: &[f64], model: &SmoothedPsModel) -> f64 {
    1.0 + (-model.smoothed_predictor(x_row)).exp()
}

/// `∂π̂(x; φ)/∂φ` with `(α, σ²)` held fixed:
/// `π̂(1 − π̂) · (1, x_sel', x̃'α − φ_y σ²)'`.
pub fn g_hat(x_row: &[f64], model: &SmoothedPsModel) -> DVector<f64> {
    let pi = smoothed_pi(x_row, model);
    let scale = pi * (1.0 - pi);
    let ps = &model.ps;
    let mut g = DVector::zeros(ps.dim());
    g[0] = scale;
    for (k, &c) in ps.covariates.iter().enumerate() {
        g[1 + k] = scale * x_row[c];
    }
    if let Some(coef) = ps.outcome_coef() {
        g[ps.dim() - 1] = scale * (model.outcome_mean(x_row) - coef * model.sigma2);
    }
    g
}

fn ols_fit(frame: &PopulationFrame, design: &Instrument) -> Result<(DVector<f64>, f64)> {
    let rows: Vec<DVector<f64>> = frame
        .respondents()
        .map(|(_, x, _)| design.eval(x))
        .collect();
    let y = frame.respondent_y();
    let k = design.dim();
    if rows.len() <= k {
        return Err(EstimationError::Degenerate(format!(
            "{} respondents cannot identify {} outcome coefficients",
            rows.len(),
            k
        )));
    }
    let z = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    let w = vec![1.0; rows.len()];
    let alpha = weighted_least_squares(
        &z,
        &w,
        &y,
        "respondent outcome regression",
        "auxiliary columns are collinear among respondents",
    )?;
    let ssr: f64 = rows
        .iter()
        .zip(&y)
        .map(|(r, yi)| (yi - r.dot(&alpha)).powi(2))
        .sum();
    Ok((alpha, ssr / (rows.len() - k) as f64))
}

struct CalibrationSystem<'a> {
    frame: &'a PopulationFrame,
    ps: &'a PsParams,
    design: &'a Instrument,
    sigma2: f64,
    /// `Σ (1 − δᵢ) bᵢ`
    target: DVector<f64>,
}

impl CalibrationSystem<'_> {
    fn odds(&self, x: &[f64], alpha: &DVector<f64>) -> f64 {
        let g = self.ps.outcome_coef().unwrap_or(0.0);
        let eta = self.ps.covariate_predictor(x) + g * self.design.eval(x).dot(alpha)
            - 0.5 * g * g * self.sigma2;
        (-eta).exp()
    }
}

impl ResidualSystem for CalibrationSystem<'_> {
    fn residual(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let mut r = -&self.target;
        for (_, x, _) in self.frame.respondents() {
            r += self.ps.instrument.eval(x) * self.odds(x, alpha);
        }
        r / self.frame.n_units() as f64
    }

    fn jacobian(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
        let g = self.ps.outcome_coef().unwrap_or(0.0);
        let mut j = DMatrix::zeros(self.ps.instrument.dim(), self.design.dim());
        for (_, x, _) in self.frame.respondents() {
            let w = -g * self.odds(x, alpha);
            j += self.ps.instrument.eval(x) * self.design.eval(x).transpose() * w;
        }
        j / self.frame.n_units() as f64
    }
}

/// `Σ δᵢ ω̂(xᵢ) bᵢ − Σ bᵢ` under `model`.
pub fn calibration_gap(frame: &PopulationFrame, model: &SmoothedPsModel) -> DVector<f64> {
    let inst = &model.ps.instrument;
    let mut gap = DVector::zeros(inst.dim());
    for i in 0..frame.n_units() {
        let x = frame.x_row(i);
        let w = if frame.selected(i) {
            smoothed_weight(x, model) - 1.0
        } else {
            -1.0
        };
        gap += inst.eval(x) * w;
    }
    gap
}

/// Fits the Gaussian working model so that the smoothed weights satisfy the
/// instrument calibration equation, solving
/// `Σ δᵢ exp(−c(xᵢ) − φ_y x̃ᵢ'α + ½φ_y²σ²) bᵢ = Σ (1 − δᵢ) bᵢ`
/// by Newton from the respondents' least-squares fit.
pub fn fit_alpha(
    frame: &PopulationFrame,
    ps: &PsParams,
    sigma2: Sigma2Rule,
) -> Result<SmoothedPsModel> {
    ps.validate()?;
    frame.require_estimable()?;
    let design = Instrument::intercept_and_all(frame.n_covariates());
    let (alpha_ols, resid_var) = ols_fit(frame, &design)?;
    let sigma2 = match sigma2 {
        Sigma2Rule::Fixed(v) if v > 0.0 && v.is_finite() => v,
        Sigma2Rule::Fixed(v) => {
            return Err(EstimationError::InvalidInput(format!(
                "sigma2 must be positive, got {v}"
            )))
        }
        Sigma2Rule::ResidualVariance => resid_var,
    };

    let mut model = SmoothedPsModel {
        ps: ps.clone(),
        design: design.clone(),
        alpha: alpha_ols.clone(),
        sigma2,
        calibration_residual: 0.0,
        degenerate: true,
        iterations: 0,
    };
    let identified = ps
        .outcome_coef()
        .is_some_and(|g| g.abs() > DEGENERATE_OUTCOME_COEF);
    if identified {
        let mut target = DVector::zeros(ps.instrument.dim());
        for i in (0..frame.n_units()).filter(|&i| !frame.selected(i)) {
            target += ps.instrument.eval(frame.x_row(i));
        }
        let system = CalibrationSystem {
            frame,
            ps,
            design: &design,
            sigma2,
            target,
        };
        let opts = GaussNewtonOptions {
            max_iter: 200,
            residual_tol: 1e-9,
            step_tol: 1e-14,
            max_halvings: 30,
        };
        match gauss_newton(&system, alpha_ols, &opts) {
            Ok(out) => {
                model.alpha = out.x;
                model.iterations = out.iterations;
                model.degenerate = false;
            }
            Err(GaussNewtonFailure::Singular) => {
                return Err(EstimationError::singular(
                    "smoothed propensity calibration",
                    "the calibration system is singular for this instrument",
                ))
            }
            Err(GaussNewtonFailure::Stalled(out)) => {
                return Err(EstimationError::NonConvergence {
                    what: "smoothed propensity calibration",
                    iterations: out.iterations,
                    residual: out.residual_norm,
                })
            }
        }
    }
    model.calibration_residual = calibration_gap(frame, &model).amax();
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsLogLik {
    pub value: f64,
    /// Some term underflowed and was clamped at `ln(f64::MIN_POSITIVE)`.
    pub clamped: bool,
}

/// Observed log-likelihood
/// `Σ δᵢ log π(xᵢ, yᵢ; φ) + (1 − δᵢ) log(1 − π̂(xᵢ; φ))`, for diagnostics.
pub fn obs_loglik(frame: &PopulationFrame, model: &SmoothedPsModel) -> ObsLogLik {
    let floor = f64::MIN_POSITIVE.ln();
    let mut clamped = false;
    let mut value = 0.0;
    for i in 0..frame.n_units() {
        let x = frame.x_row(i);
        let term = match frame.y_observed(i) {
            Some(y) => -softplus(-model.ps.linear_predictor(x, y)),
            None => -softplus(model.smoothed_predictor(x)),
        };
        value += if term < floor {
            clamped = true;
            floor
        } else {
            term
        };
    }
    ObsLogLik { value, clamped }
}

/// Unsmoothed `π(xᵢ, yᵢ; φ)` for every respondent, in frame order.
pub fn respondent_pi(frame: &PopulationFrame, ps: &PsParams) -> Vec<f64> {
    frame
        .respondents()
        .map(|(_, x, y)| ps_prob(x, y, ps))
        .collect()
}
