//! Empirical-likelihood weights.
//!
//! Maximizes `Σ log pᵢ` over the sample subject to `Σ pᵢ = 1` and
//! `Σ pᵢ uᵢ = 0`, where `uᵢ = gᵢ − target` are centered constraint values.
//! The solution is `pᵢ = n⁻¹ / (1 + λ'uᵢ)` with `λ` minimizing the convex dual
//! `D(λ) = −Σ log(1 + λ'uᵢ)`. Newton steps on `D` are halved until every
//! `1 + λ'uᵢ ≥ 1/n` (so no weight exceeds one) and `D` does not increase.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::population::PopulationFrame;

/// Columns whose residual after projection on earlier columns is below this
/// (relative to the column's scale) are dropped before solving.
pub const COLUMN_DROP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    /// `n × m`, row `i` is `uᵢ = gᵢ − target`.
    u: DMatrix<f64>,
    targets: Vec<f64>,
    labels: Vec<String>,
}

impl ConstraintSet {
    /// No constraints beyond normalization.
    pub fn empty(n: usize) -> Self {
        Self {
            u: DMatrix::zeros(n, 0),
            targets: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Builds the set from raw values `g` (`n × m`) and their targets.
    pub fn from_values(g: &DMatrix<f64>, targets: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if g.ncols() != targets.len() || labels.len() != targets.len() {
            return Err(EstimationError::InvalidInput(
                "constraint columns, targets and labels must have equal length".into(),
            ));
        }
        if g.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(EstimationError::InvalidInput(
                "constraint values must be finite".into(),
            ));
        }
        let mut u = g.clone();
        for (j, t) in targets.iter().enumerate() {
            u.column_mut(j).add_scalar_mut(-t);
        }
        Ok(Self { u, targets, labels })
    }

    /// Concatenates the columns of two sets over the same sample.
    pub fn join(mut self, other: ConstraintSet) -> Result<Self> {
        if self.n() != other.n() {
            return Err(EstimationError::InvalidInput(
                "constraint sets cover different samples".into(),
            ));
        }
        let (n, m1, m2) = (self.n(), self.m(), other.m());
        let u = DMatrix::from_fn(n, m1 + m2, |i, j| {
            if j < m1 {
                self.u[(i, j)]
            } else {
                other.u[(i, j - m1)]
            }
        });
        self.u = u;
        self.targets.extend(other.targets);
        self.labels.extend(other.labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.ncols()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Drops zero and collinear columns (greedy Gram–Schmidt in column order),
    /// returning the reduced set and the labels that were dropped.
    pub fn reduce(&self) -> (ConstraintSet, Vec<String>) {
        let n = self.n();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..self.m() {
            let col = self.u.column(j).into_owned();
            let scale = self
                .u
                .column(j)
                .iter()
                .map(|v| (v + self.targets[j]).abs())
                .fold(1.0, f64::max);
            let mut r = col.clone();
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&r);
                    r.axpy(-c, q, 1.0);
                }
            }
            let rms = r.norm() / (n.max(1) as f64).sqrt();
            if rms <= COLUMN_DROP_TOL * scale {
                dropped.push(self.labels[j].clone());
            } else {
                basis.push(r.normalize());
                keep.push(j);
            }
        }
        let reduced = ConstraintSet {
            u: self.u.select_columns(&keep),
            targets: keep.iter().map(|&j| self.targets[j]).collect(),
            labels: keep.iter().map(|&j| self.labels[j].clone()).collect(),
        };
        (reduced, dropped)
    }
}

/// Bias-calibration column: `Σ pᵢ πᵢ = W`.
pub fn build_bias_calibration(pi_sample: &[f64], w_target: f64) -> Result<ConstraintSet> {
    if pi_sample.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(EstimationError::InvalidInput(
            "propensity values must lie in (0, 1)".into(),
        ));
    }
    if !(w_target > 0.0 && w_target < 1.0) {
        return Err(EstimationError::InvalidInput(format!(
            "bias-calibration target must lie in (0, 1), got {w_target}"
        )));
    }
    let g = DMatrix::from_column_slice(pi_sample.len(), 1, pi_sample);
    ConstraintSet::from_values(&g, vec![w_target], vec!["pi".into()])
}

/// Benchmarking columns: `Σ pᵢ xᵢ = X̄_N` for every auxiliary column, with
/// one row per respondent.
pub fn build_benchmarking(frame: &PopulationFrame) -> Result<ConstraintSet> {
    let rows: Vec<&[f64]> = frame.respondents().map(|(_, x, _)| x).collect();
    let p = frame.n_covariates();
    let g = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    ConstraintSet::from_values(&g, frame.x_means(), frame.columns().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElOptions {
    pub max_iter: usize,
    /// Convergence on `‖n⁻¹ Σ uᵢ/(1 + λ'uᵢ)‖∞`.
    pub grad_tol: f64,
    pub max_halvings: usize,
}

impl Default for ElOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-10,
            max_halvings: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElSolution {
    /// Normalized weights, `Σ pᵢ = 1`.
    pub p: Vec<f64>,
    /// Dual multipliers for the retained constraints.
    pub lambda: Vec<f64>,
    /// Labels of the retained constraints, aligned with `lambda`.
    pub labels: Vec<String>,
    /// Constraints removed as degenerate or collinear.
    pub dropped: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ pᵢ uᵢ` for the retained constraints.
    pub constraint_residual: Vec<f64>,
    /// Dual objective `D(λ)` at the start and after every accepted step.
    pub dual_trace: Vec<f64>,
}

impl ElSolution {
    /// Weights on the population scale, `N pᵢ`.
    pub fn population_weights(&self, n_units: usize) -> Vec<f64> {
        self.p.iter().map(|p| p * n_units as f64).collect()
    }
}

fn dual_objective(u: &DMatrix<f64>, lambda: &DVector<f64>) -> (f64, f64) {
    let t = u * lambda;
    let min = t.iter().fold(f64::INFINITY, |a, &v| a.min(1.0 + v));
    (-t.iter().map(|v| v.ln_1p()).sum::<f64>(), min)
}

pub fn el_solve(constraints: &ConstraintSet, options: &ElOptions) -> Result<ElSolution> {
    let n = constraints.n();
    if n == 0 {
        return Err(EstimationError::Degenerate("empty sample".into()));
    }
    let (set, dropped) = constraints.reduce();
    let m = set.m();
    let u = set.u();
    let nf = n as f64;

    for j in 0..m {
        let col = u.column(j);
        if col.iter().all(|&v| v >= 0.0) || col.iter().all(|&v| v <= 0.0) {
            return Err(EstimationError::Infeasible {
                label: set.labels()[j].clone(),
            });
        }
    }

    let mut lambda = DVector::<f64>::zeros(m);
    let (mut dual, _) = dual_objective(u, &lambda);
    let mut trace = vec![dual];
    let mut iterations = 0;
    let floor = 1.0 / nf;

    let converged = loop {
        let t = u * &lambda;
        let mut grad = DVector::<f64>::zeros(m);
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            let inv = 1.0 / (1.0 + t[i]);
            let row = u.row(i);
            for a in 0..m {
                grad[a] += row[a] * inv;
                let ra = row[a] * inv * inv;
                for b in 0..=a {
                    hess[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        if (&grad / nf).amax() <= options.grad_tol {
            break true;
        }
        if iterations >= options.max_iter {
            break false;
        }
        let step = hess.cholesky().map(|c| c.solve(&grad)).ok_or_else(|| {
            EstimationError::singular("empirical likelihood", "constraint columns are collinear")
        })?;

        let mut accepted = false;
        let mut s = 1.0;
        for _ in 0..=options.max_halvings {
            let cand = &lambda + &step * s;
            let (d, min) = dual_objective(u, &cand);
            // Near the optimum the decrease falls below the rounding error of D.
            let slack = 1e-12 * (1.0 + dual.abs());
            if min >= floor && d.is_finite() && d <= dual + slack {
                lambda = cand;
                dual = d;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        iterations += 1;
        if !accepted || lambda.amax() > 1e12 {
            let worst = grad.iamax();
            return Err(EstimationError::Infeasible {
                label: set.labels()[worst].clone(),
            });
        }
        trace.push(dual);
    };
    if !converged {
        return Err(EstimationError::NonConvergence {
            what: "empirical likelihood",
            iterations,
            residual: f64::NAN,
        });
    }

    let t = u * &lambda;
    let mut p: Vec<f64> = t.iter().map(|v| 1.0 / (nf * (1.0 + v))).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    let residual: Vec<f64> = (0..m)
        .map(|j| p.iter().zip(u.column(j).iter()).map(|(a, b)| a * b).sum())
        .collect();
    // A vanishing scaled gradient with unbounded λ means the weights escaped
    // to the boundary of the simplex without meeting the constraints.
    let scale = u.amax().max(1.0);
    if let Some((j, _)) = residual
        .iter()
        .enumerate()
        .filter(|(_, r)| r.abs() > 1e-8 * scale)
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
    {
        return Err(EstimationError::Infeasible {
            label: set.labels()[j].clone(),
        });
    }
    Ok(ElSolution {
        p,
        lambda: lambda.iter().copied().collect(),
        labels: set.labels().to_vec(),
        dropped,
        iterations,
        converged,
        constraint_residual: residual,
        dual_trace: trace,
    })
}

/// `θ̂ = Σ pᵢ yᵢ`.
pub fn mele(solution: &ElSolution, y_sample: &[f64]) -> Result<f64> {
    if !solution.converged {
        return Err(EstimationError::InvalidInput(
            "empirical-likelihood solution did not converge".into(),
        ));
    }
    if y_sample.len() != solution.p.len() {
        return Err(EstimationError::InvalidInput(format!(
            "{} outcomes for {} weights",
            y_sample.len(),
            solution.p.len()
        )));
    }
    Ok(solution.p.iter().zip(y_sample).map(|(p, y)| p * y).sum())
}
