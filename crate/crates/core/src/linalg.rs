//! Small dense numerical helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{EstimationError, Result};

/// Reciprocal condition number below which a matrix is treated as singular.
pub(crate) const RCOND_TOL: f64 = 1e-12;

/// Logistic function, evaluated without overflow for large |t|.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t) without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub(crate) fn rcond(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    if max == 0.0 || !max.is_finite() {
        return 0.0;
    }
    sv.min() / max
}

/// Solves the square system `a x = b`, refusing numerically singular `a`.
pub(crate) fn solve_square(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    what: &'static str,
    advice: &str,
) -> Result<DVector<f64>> {
    debug_assert!(a.is_square());
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if rcond(a) < RCOND_TOL {
        return Err(EstimationError::singular(what, advice));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| EstimationError::singular(what, advice))
}

/// Weighted least squares `argmin Σ wᵢ (yᵢ - zᵢ'β)²` via the normal equations.
pub(crate) fn weighted_least_squares(
    z: &DMatrix<f64>,
    w: &[f64],
    y: &[f64],
    what: &'static str,
    advice: &str,
) -> Result<DVector<f64>> {
    let k = z.ncols();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for i in 0..z.nrows() {
        let row = z.row(i);
        for a in 0..k {
            let wa = w[i] * row[a];
            xty[a] += wa * y[i];
            for b in 0..k {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    solve_square(&xtx, &xty, what, advice)
}

/// A residual map `r(x)` together with its Jacobian, solved in the least-squares sense.
pub(crate) trait ResidualSystem {
    fn residual(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GaussNewtonOptions {
    pub max_iter: usize,
    pub residual_tol: f64,
    pub step_tol: f64,
    pub max_halvings: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct GaussNewtonOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

pub(crate) enum GaussNewtonFailure {
    Singular,
    /// Line search could not decrease the objective, or the iteration cap was hit.
    Stalled(GaussNewtonOutcome),
}

/// Damped Gauss–Newton: `Δ = -(J'J)⁻¹ J' r`, halving the step until `r'r` decreases.
pub(crate) fn gauss_newton<S: ResidualSystem>(
    system: &S,
    x0: DVector<f64>,
    opts: &GaussNewtonOptions,
) -> std::result::Result<GaussNewtonOutcome, GaussNewtonFailure> {
    let mut x = x0;
    let mut r = system.residual(&x);
    let mut q = r.norm_squared();
    let mut trace = vec![q];
    let mut iterations = 0;

    let outcome = |x: DVector<f64>, r: &DVector<f64>, iterations, converged, trace: Vec<f64>| {
        GaussNewtonOutcome {
            x,
            iterations,
            residual_norm: r.amax(),
            converged,
            objective_trace: trace,
        }
    };

    loop {
        if r.iter().all(|v| v.is_finite()) && r.amax() <= opts.residual_tol {
            return Ok(outcome(x, &r, iterations, true, trace));
        }
        if iterations >= opts.max_iter {
            return Err(GaussNewtonFailure::Stalled(outcome(
                x, &r, iterations, false, trace,
            )));
        }
        let jac = system.jacobian(&x);
        if rcond(&jac) < RCOND_TOL {
            return Err(GaussNewtonFailure::Singular);
        }
        let step = match jac.clone().svd(true, true).solve(&(-&r), 0.0) {
            Ok(s) => s,
            Err(_) => return Err(GaussNewtonFailure::Singular),
        };
        let step_norm = step.norm();
        if step_norm <= opts.step_tol {
            return Ok(outcome(x, &r, iterations, true, trace));
        }

        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..=opts.max_halvings {
            let candidate = &x + &step * t;
            let r_new = system.residual(&candidate);
            let q_new = r_new.norm_squared();
            if q_new.is_finite() && q_new < q {
                accepted = Some((candidate, r_new, q_new));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((xn, rn, qn)) => {
                x = xn;
                r = rn;
                q = qn;
                trace.push(q);
            }
            None => {
                // At the floating-point floor of an over-identified system the
                // objective cannot decrease any further.
                let converged = step_norm <= 1e-8 * (1.0 + x.norm());
                let out = outcome(x, &r, iterations, converged, trace);
                return if converged {
                    Ok(out)
                } else {
                    Err(GaussNewtonFailure::Stalled(out))
                };
            }
        }
    }
}
