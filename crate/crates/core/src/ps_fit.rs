//! Parametric logistic selection model `π(x, y; φ)` and its calibration-type
//! parameter estimation.
//!
//! The selection probability is `expit(φ₀ + φ_x'x_sel + φ_y y)`, where `x_sel`
//! are the configured covariate columns and the outcome term is optional (it is
//! absent for missing-at-random models). `φ` is estimated from
//!
//! ```text
//! U_b(φ) = N⁻¹ Σᵢ {δᵢ / π(xᵢ, yᵢ; φ) − 1} b(xᵢ) = 0
//! ```
//!
//! by Gauss–Newton on `Q(φ) = U_b'U_b`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::linalg::{
    expit, gauss_newton, rcond, solve_square, GaussNewtonFailure, GaussNewtonOptions,
    ResidualSystem, RCOND_TOL,
};
use crate::population::PopulationFrame;

/// Instrument map `b(x)`: optional intercept followed by selected auxiliary columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instrument {
    pub intercept: bool,
    pub columns: Vec<usize>,
}

impl Instrument {
    /// `b(x) = (1, x')'` over every auxiliary column.
    pub fn intercept_and_all(n_covariates: usize) -> Self {
        Self {
            intercept: true,
            columns: (0..n_covariates).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.intercept as usize + self.columns.len()
    }

    pub fn eval(&self, x_row: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(self.dim());
        self.fill(x_row, b.as_mut_slice());
        b
    }

    fn fill(&self, x_row: &[f64], out: &mut [f64]) {
        let mut k = 0;
        if self.intercept {
            out[0] = 1.0;
            k = 1;
        }
        for (slot, &c) in out[k..].iter_mut().zip(&self.columns) {
            *slot = x_row[c];
        }
    }
}

/// Parameters of the logistic selection model together with its structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsParams {
    /// `(intercept, covariate coefficients..., [outcome coefficient])`.
    pub phi: DVector<f64>,
    /// Auxiliary columns entering the linear predictor.
    pub covariates: Vec<usize>,
    /// Whether the outcome `y` enters the linear predictor (nonignorable model).
    pub include_outcome: bool,
    pub instrument: Instrument,
}

impl PsParams {
    pub fn new(
        phi: DVector<f64>,
        covariates: Vec<usize>,
        include_outcome: bool,
        instrument: Instrument,
    ) -> Result<Self> {
        let params = Self {
            phi,
            covariates,
            include_outcome,
            instrument,
        };
        params.validate()?;
        Ok(params)
    }

    /// Nonignorable default: `logit π = φ₀ + φ₁x₁ + φ₂y`, `b = (1, x')'`.
    pub fn nonignorable_default(n_covariates: usize) -> Self {
        Self {
            phi: DVector::zeros(3),
            covariates: vec![0],
            include_outcome: true,
            instrument: Instrument::intercept_and_all(n_covariates),
        }
    }

    pub fn with_phi(&self, phi: DVector<f64>) -> Self {
        Self {
            phi,
            ..self.clone()
        }
    }

    /// Number of model parameters `q`.
    pub fn dim(&self) -> usize {
        1 + self.covariates.len() + self.include_outcome as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.len() != self.dim() {
            return Err(EstimationError::InvalidInput(format!(
                "phi has {} entries but the model needs {}",
                self.phi.len(),
                self.dim()
            )));
        }
        if self.phi.iter().any(|v| !v.is_finite()) {
            return Err(EstimationError::InvalidInput("phi must be finite".into()));
        }
        Ok(())
    }

    fn check_identified(&self) -> Result<()> {
        if self.instrument.dim() < self.dim() {
            return Err(EstimationError::InvalidInput(format!(
                "instrument has {} components but the model has {} parameters",
                self.instrument.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Outcome coefficient `φ_y`, if the model has one.
    pub fn outcome_coef(&self) -> Option<f64> {
        self.include_outcome.then(|| self.phi[self.dim() - 1])
    }

    /// Part of the linear predictor that does not involve `y`.
    pub fn covariate_predictor(&self, x_row: &[f64]) -> f64 {
        let mut eta = self.phi[0];
        for (k, &c) in self.covariates.iter().enumerate() {
            eta += self.phi[1 + k] * x_row[c];
        }
        eta
    }

    pub fn linear_predictor(&self, x_row: &[f64], y: f64) -> f64 {
        self.covariate_predictor(x_row) + self.outcome_coef().map_or(0.0, |g| g * y)
    }

    fn fill_h(&self, x_row: &[f64], y: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for (k, &c) in self.covariates.iter().enumerate() {
            out[1 + k] = x_row[c];
        }
        if self.include_outcome {
            out[self.dim() - 1] = y;
        }
    }
}

/// `π(x, y; φ)`.
pub fn ps_prob(x_row: &[f64], y: f64, params: &PsParams) -> f64 {
    expit(params.linear_predictor(x_row, y))
}

/// `∂ logit π / ∂φ`, which is `(1, x_sel', y)'` for the logistic model.
pub fn h_grad(x_row: &[f64], y: f64, params: &PsParams) -> DVector<f64> {
    let mut h = DVector::zeros(params.dim());
    params.fill_h(x_row, y, h.as_mut_slice());
    h
}

/// `U_b(φ) = N⁻¹ Σᵢ {δᵢ/πᵢ − 1} bᵢ`. Outcomes are read for selected units only;
/// `1/π − 1` is evaluated as `exp(−η)`.
pub fn estimating_eq(frame: &PopulationFrame, params: &PsParams) -> DVector<f64> {
    let qb = params.instrument.dim();
    let mut u = DVector::zeros(qb);
    let mut b = vec![0.0; qb];
    for i in 0..frame.n_units() {
        params.instrument.fill(frame.x_row(i), &mut b);
        let coef = match frame.y_observed(i) {
            Some(y) => (-params.linear_predictor(frame.x_row(i), y)).exp(),
            None => -1.0,
        };
        for (acc, bk) in u.iter_mut().zip(&b) {
            *acc += coef * bk;
        }
    }
    u / frame.n_units() as f64
}

/// `∂U_b/∂φ' = −N⁻¹ Σᵢ δᵢ Oᵢ bᵢ hᵢ'` with `Oᵢ = (1 − πᵢ)/πᵢ`.
pub fn estimating_eq_jacobian(frame: &PopulationFrame, params: &PsParams) -> DMatrix<f64> {
    let (qb, q) = (params.instrument.dim(), params.dim());
    let mut jac = DMatrix::zeros(qb, q);
    let mut b = vec![0.0; qb];
    let mut h = vec![0.0; q];
    for (_, x, y) in frame.respondents() {
        let odds = (-params.linear_predictor(x, y)).exp();
        params.instrument.fill(x, &mut b);
        params.fill_h(x, y, &mut h);
        for r in 0..qb {
            let w = odds * b[r];
            for c in 0..q {
                jac[(r, c)] -= w * h[c];
            }
        }
    }
    jac / frame.n_units() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMethod {
    /// Gauss–Newton on `Q(φ) = U_b'U_b` (default).
    GaussNewton,
    /// Plain Newton `φ ← φ − U̇⁻¹U` on the square system, with the same step halving.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsFitOptions {
    pub method: FitMethod,
    pub max_iter: usize,
    /// Convergence on `‖U_b‖∞`.
    pub residual_tol: f64,
    /// Convergence on `‖Δ‖₂`.
    pub step_tol: f64,
    pub max_halvings: usize,
}

impl Default for PsFitOptions {
    fn default() -> Self {
        Self {
            method: FitMethod::GaussNewton,
            max_iter: 200,
            residual_tol: 1e-9,
            step_tol: 1e-12,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    /// `‖U_b(φ̂)‖∞`.
    pub final_residual_norm: f64,
    pub converged: bool,
    /// `Q(φ)` at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

struct EstimatingSystem<'a> {
    frame: &'a PopulationFrame,
    template: &'a PsParams,
    newton: bool,
}

impl ResidualSystem for EstimatingSystem<'_> {
    fn residual(&self, phi: &DVector<f64>) -> DVector<f64> {
        estimating_eq(self.frame, &self.template.with_phi(phi.clone()))
    }

    fn jacobian(&self, phi: &DVector<f64>) -> DMatrix<f64> {
        estimating_eq_jacobian(self.frame, &self.template.with_phi(phi.clone()))
    }
}

const INSTRUMENT_ADVICE: &str =
    "the estimating equations are not identified; choose a different instrument b(x)";

/// Solves `U_b(φ) = 0` (least squares when `dim b > dim φ`) starting from `init.phi`.
pub fn fit_ps(
    frame: &PopulationFrame,
    init: &PsParams,
    options: &PsFitOptions,
) -> Result<(PsParams, FitDiagnostics)> {
    init.validate()?;
    init.check_identified()?;
    frame.require_estimable()?;
    let square = init.instrument.dim() == init.dim();
    if options.method == FitMethod::Newton && !square {
        return Err(EstimationError::InvalidInput(
            "plain Newton requires dim(b) = dim(phi)".into(),
        ));
    }
    let system = EstimatingSystem {
        frame,
        template: init,
        newton: options.method == FitMethod::Newton,
    };
    let gn = GaussNewtonOptions {
        max_iter: options.max_iter,
        residual_tol: options.residual_tol,
        step_tol: options.step_tol,
        max_halvings: options.max_halvings,
    };
    let result = if system.newton {
        newton_solve(&system, init.phi.clone(), &gn)
    } else {
        gauss_newton(&system, init.phi.clone(), &gn)
    };
    match result {
        Ok(out) => {
            let diag = FitDiagnostics {
                iterations: out.iterations,
                final_residual_norm: out.residual_norm,
                converged: out.converged,
                objective_trace: out.objective_trace,
            };
            Ok((init.with_phi(out.x), diag))
        }
        Err(GaussNewtonFailure::Singular) => Err(EstimationError::singular(
            "propensity fit",
            INSTRUMENT_ADVICE,
        )),
        Err(GaussNewtonFailure::Stalled(out)) => Err(EstimationError::NonConvergence {
            what: "propensity fit",
            iterations: out.iterations,
            residual: out.residual_norm,
        }),
    }
}

/// The asymmetric Newton iteration, kept for comparison with Gauss–Newton.
fn newton_solve(
    system: &EstimatingSystem<'_>,
    x0: DVector<f64>,
    opts: &GaussNewtonOptions,
) -> std::result::Result<crate::linalg::GaussNewtonOutcome, GaussNewtonFailure> {
    let mut phi = x0;
    let mut r = system.residual(&phi);
    let mut q = r.norm_squared();
    let mut trace = vec![q];
    let mut iterations = 0;
    loop {
        let done = |phi, r: &DVector<f64>, iterations, converged, trace| {
            crate::linalg::GaussNewtonOutcome {
                x: phi,
                iterations,
                residual_norm: r.amax(),
                converged,
                objective_trace: trace,
            }
        };
        if r.amax() <= opts.residual_tol {
            return Ok(done(phi, &r, iterations, true, trace));
        }
        if iterations >= opts.max_iter {
            return Err(GaussNewtonFailure::Stalled(done(
                phi, &r, iterations, false, trace,
            )));
        }
        let jac = system.jacobian(&phi);
        if rcond(&jac) < RCOND_TOL {
            return Err(GaussNewtonFailure::Singular);
        }
        let step = jac.lu().solve(&(-&r)).ok_or(GaussNewtonFailure::Singular)?;
        if step.norm() <= opts.step_tol {
            return Ok(done(phi, &r, iterations, true, trace));
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = &phi + &step * t;
            let rn = system.residual(&cand);
            let qn = rn.norm_squared();
            if qn.is_finite() && qn < q {
                phi = cand;
                r = rn;
                q = qn;
                trace.push(q);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(GaussNewtonFailure::Stalled(done(
                phi, &r, iterations, false, trace,
            )));
        }
    }
}

/// Starting value for [`fit_ps`]: intercept and covariate coefficients from a
/// missing-at-random logistic fit on every auxiliary column, outcome coefficient 0.
/// Falls back to `logit(n/N)` for the intercept if that fit fails.
pub fn initial_params(frame: &PopulationFrame, structure: &PsParams) -> PsParams {
    let mut phi = DVector::zeros(structure.dim());
    let all: Vec<usize> = (0..frame.n_covariates()).collect();
    match fit_mar_logistic(frame, &all) {
        Ok(mar) => {
            phi[0] = mar.phi[0];
            for (k, &c) in structure.covariates.iter().enumerate() {
                phi[1 + k] = mar.phi[1 + c];
            }
        }
        Err(_) => {
            let w = frame.n_sample() as f64 / frame.n_units() as f64;
            phi[0] = (w / (1.0 - w)).ln();
        }
    }
    structure.with_phi(phi)
}

/// Fits the default nonignorable model from the missing-at-random start.
pub fn fit_ps_default(frame: &PopulationFrame) -> Result<(PsParams, FitDiagnostics)> {
    let structure = PsParams::nonignorable_default(frame.n_covariates());
    fit_ps(
        frame,
        &initial_params(frame, &structure),
        &PsFitOptions::default(),
    )
}

/// Logistic-regression MLE of `δ` on `(1, x_cov)` over all units by
/// Newton–Raphson, stopping when the mean score has ∞-norm ≤ 1e-9.
pub fn fit_mar_logistic(frame: &PopulationFrame, covariates: &[usize]) -> Result<PsParams> {
    frame.require_estimable()?;
    if let Some(&c) = covariates.iter().find(|&&c| c >= frame.n_covariates()) {
        return Err(EstimationError::InvalidInput(format!(
            "covariate column {c} out of range"
        )));
    }
    let structure = PsParams {
        phi: DVector::zeros(1 + covariates.len()),
        covariates: covariates.to_vec(),
        include_outcome: false,
        instrument: Instrument::intercept_and_all(frame.n_covariates()),
    };
    let q = structure.dim();
    let n = frame.n_units() as f64;
    let design = |i: usize, out: &mut [f64]| structure.fill_h(frame.x_row(i), 0.0, out);

    let loglik = |phi: &DVector<f64>| -> f64 {
        let p = structure.with_phi(phi.clone());
        (0..frame.n_units())
            .map(|i| {
                let eta = p.covariate_predictor(frame.x_row(i));
                if frame.selected(i) {
                    -crate::linalg::softplus(-eta)
                } else {
                    -crate::linalg::softplus(eta)
                }
            })
            .sum()
    };

    let w0 = frame.n_sample() as f64 / n;
    let mut phi = DVector::zeros(q);
    phi[0] = (w0 / (1.0 - w0)).ln();
    let mut ll = loglik(&phi);
    let mut z = vec![0.0; q];
    for _ in 0..100 {
        let p = structure.with_phi(phi.clone());
        let mut score = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        for i in 0..frame.n_units() {
            design(i, &mut z);
            let pi = expit(p.covariate_predictor(frame.x_row(i)));
            let resid = frame.selected(i) as u8 as f64 - pi;
            let w = pi * (1.0 - pi);
            for a in 0..q {
                score[a] += resid * z[a];
                for b in 0..q {
                    info[(a, b)] += w * z[a] * z[b];
                }
            }
        }
        score /= n;
        info /= n;
        if score.amax() <= 1e-9 {
            return Ok(p);
        }
        let step = solve_square(
            &info,
            &score,
            "missing-at-random logistic fit",
            "collinear covariates",
        )?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &phi + &step * t;
            let llc = loglik(&cand);
            if llc.is_finite() && llc >= ll {
                phi = cand;
                ll = llc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if phi.norm() > 50.0 {
            return Err(EstimationError::Degenerate(
                "logistic coefficients diverge (separation)".into(),
            ));
        }
        if !accepted {
            break;
        }
    }
    Err(EstimationError::NonConvergence {
        what: "missing-at-random logistic fit",
        iterations: 100,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(phi: [f64; 3]) -> PsParams {
        PsParams::nonignorable_default(2).with_phi(DVector::from_row_slice(&phi))
    }

    fn frame(rows: &[(f64, f64, bool, f64)]) -> PopulationFrame {
        PopulationFrame::new(
            vec!["x1".into(), "x2".into()],
            rows.iter().map(|r| vec![r.0, r.1]).collect(),
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.2.then_some(r.3)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ps_prob_closed_forms() {
        assert_eq!(ps_prob(&[3.0, 1.0], -7.0, &params([0.0, 0.0, 0.0])), 0.5);
        assert_eq!(ps_prob(&[2.0, 9.0], 0.0, &params([-2.0, 1.0, 0.5])), 0.5);
        let p = ps_prob(&[0.0, 0.0], 0.0, &params([-2.0, 1.0, 0.5]));
        assert!((p - 0.119_202_922_022_117_6).abs() < 1e-15);
        let extreme = ps_prob(&[0.0, 0.0], 1e4, &params([0.0, 0.0, 1.0]));
        assert!(extreme.is_finite() && extreme <= 1.0);
    }

    #[test]
    fn h_grad_is_regressor_vector() {
        let p = params([0.3, -0.2, 0.1]);
        assert_eq!(h_grad(&[2.0, 5.0], 3.0, &p).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(h_grad(&[0.0, 5.0], 0.0, &p).as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn estimating_eq_two_term_cancellation() {
        let f = frame(&[(0.0, 0.0, true, 0.0), (1.0, 1.0, false, 0.0)]);
        let p = PsParams::new(
            DVector::zeros(3),
            vec![0],
            true,
            Instrument {
                intercept: true,
                columns: vec![],
            },
        )
        .unwrap();
        let u = estimating_eq(&f, &p);
        assert_eq!(u.len(), 1);
        assert!(u[0].abs() < 1e-15);
    }

    #[test]
    fn estimating_eq_positive_when_everyone_selected() {
        let f = frame(&[(0.1, 0.0, true, 1.0), (0.5, 2.0, true, -1.0)]);
        let u = estimating_eq(&f, &params([0.2, 0.3, -0.1]));
        assert!(u[0] > 0.0);
    }

    #[test]
    fn jacobian_vanishes_without_respondents() {
        let f = frame(&[(0.1, 0.0, false, 1.0), (0.5, 2.0, false, -1.0)]);
        let j = estimating_eq_jacobian(&f, &params([0.2, 0.3, -0.1]));
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_single_respondent_at_half() {
        let f = frame(&[
            (0.0, 0.0, true, 0.0),
            (0.0, 0.0, false, 0.0),
            (1.0, 0.0, false, 0.0),
        ]);
        let p = PsParams::new(
            DVector::zeros(1),
            vec![],
            false,
            Instrument {
                intercept: true,
                columns: vec![],
            },
        )
        .unwrap();
        let j = estimating_eq_jacobian(&f, &p);
        assert!((j[(0, 0)] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fit_at_fixed_point_takes_zero_iterations() {
        let f = frame(&[(0.0, 0.0, true, 0.0), (1.0, 1.0, false, 0.0)]);
        let p = PsParams::new(
            DVector::zeros(1),
            vec![],
            false,
            Instrument {
                intercept: true,
                columns: vec![],
            },
        )
        .unwrap();
        let (fit, diag) = fit_ps(&f, &p, &PsFitOptions::default()).unwrap();
        assert_eq!(diag.iterations, 0);
        assert!(diag.converged);
        assert_eq!(fit.phi, p.phi);
    }

    #[test]
    fn underidentified_instrument_is_rejected() {
        let f = frame(&[(0.0, 0.0, true, 0.0), (1.0, 1.0, false, 0.0)]);
        let mut p = params([0.0, 0.0, 0.0]);
        p.instrument.columns = vec![0];
        assert!(matches!(
            fit_ps(&f, &p, &PsFitOptions::default()),
            Err(EstimationError::InvalidInput(_))
        ));
    }

    #[test]
    fn collinear_instrument_is_singular() {
        let rows: Vec<_> = (0..12)
            .map(|i| {
                let x = i as f64 / 4.0;
                (x, 2.0 * x, i % 3 != 0, x - 1.0)
            })
            .collect();
        let f = frame(&rows);
        let p = params([0.0, 0.1, 0.1]);
        assert!(matches!(
            fit_ps(&f, &p, &PsFitOptions::default()),
            Err(EstimationError::Singular { .. })
        ));
    }

    #[test]
    fn constant_selection_is_degenerate_for_mar_fit() {
        let f = frame(&[(0.0, 0.0, true, 0.0), (1.0, 1.0, true, 0.0)]);
        assert!(matches!(
            fit_mar_logistic(&f, &[0, 1]),
            Err(EstimationError::Degenerate(_))
        ));
    }

    #[test]
    fn separated_selection_is_rejected() {
        let rows: Vec<_> = (0..20).map(|i| (i as f64, 0.0, i >= 10, 0.0)).collect();
        let f = frame(&rows);
        assert!(fit_mar_logistic(&f, &[0]).is_err());
    }
}
