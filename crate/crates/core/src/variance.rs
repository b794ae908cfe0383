//! Linearization variance estimators and Wald intervals.
//!
//! Every estimator is linearized as `θ̂ ≈ N⁻¹ Σᵢ ηᵢ` over the whole population,
//! and `V̂ = {N(N−1)}⁻¹ Σ (η̂ᵢ − η̄)²`, treating selection indicators as
//! independent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::linalg::{solve_square, weighted_least_squares};
use crate::population::PopulationFrame;
use crate::ps_fit::{h_grad, ps_prob, PsParams};
use crate::smoothing::{g_hat, smoothed_pi, smoothed_weight, SmoothedPsModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceVector {
    pub label: String,
    /// One value per population unit.
    pub eta: Vec<f64>,
    pub beta1: Option<f64>,
    pub beta2: Vec<f64>,
    /// Constant `c₀` of the fitted values.
    pub offset: f64,
    pub gamma: Vec<f64>,
    pub kappa1: Vec<f64>,
    pub kappa2: Vec<f64>,
    pub nu: Vec<f64>,
}

impl InfluenceVector {
    fn new(label: &str, eta: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            eta,
            beta1: None,
            beta2: Vec::new(),
            offset: 0.0,
            gamma: Vec::new(),
            kappa1: Vec::new(),
            kappa2: Vec::new(),
            nu: Vec::new(),
        }
    }

    /// CSV with columns `unit,eta`, units numbered from 0 in frame order.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| EstimationError::Io(e.to_string());
        w.write_record(["unit", "eta"]).map_err(io)?;
        for (i, e) in self.eta.iter().enumerate() {
            w.write_record([i.to_string(), format!("{e:?}")])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `V̂ = {N(N−1)}⁻¹ Σ (ηᵢ − η̄)²`.
pub fn var_from_influence(eta: &[f64]) -> Result<f64> {
    let n = eta.len();
    if n < 2 {
        return Err(EstimationError::InvalidInput(
            "variance needs at least two influence values".into(),
        ));
    }
    let nf = n as f64;
    let mean = eta.iter().sum::<f64>() / nf;
    let ss: f64 = eta.iter().map(|e| (e - mean).powi(2)).sum();
    Ok(ss / (nf * (nf - 1.0)))
}

/// Coefficients of the regression form of a calibrated EL estimator.
///
/// The fitted value is `ŷᵢ = β₁πᵢ + xᵢ'β₂ + c₀`. `(β₁, β₂)` start from the
/// weighted regression of `y` on `(πᵢ − W, xᵢ − X̄_N)` with weights `πᵢ⁻²`;
/// the π coefficient then absorbs `r = n⁻¹ Σ_S eᵢ/πᵢ`, the mean weighted
/// residual, and `c₀ = −β₁W − β₂'X̄_N` restores the centering, so that
/// `θ̂ = N⁻¹ Σ {ŷᵢ + δᵢπᵢ⁻¹(yᵢ − ŷᵢ)}` to first order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    /// Coefficient of `π` before absorbing the residual mean.
    pub beta1_centered: f64,
    /// Coefficient of `π` in the fitted value, `β₁ + r`.
    pub beta1: f64,
    pub beta2: DVector<f64>,
    pub offset: f64,
}

impl CalibrationFit {
    fn fitted(&self, pi: f64, x: &[f64]) -> f64 {
        self.beta1 * pi + linear_term(x, &self.beta2) + self.offset
    }
}

fn calibration_regression(
    frame: &PopulationFrame,
    pi_sample: &[f64],
    w: f64,
    benchmark: bool,
) -> Result<CalibrationFit> {
    let xbar = frame.x_means();
    let p = if benchmark { frame.n_covariates() } else { 0 };
    let rows: Vec<&[f64]> = frame.respondents().map(|(_, x, _)| x).collect();
    let z = DMatrix::from_fn(rows.len(), 1 + p, |i, j| {
        if j == 0 {
            pi_sample[i] - w
        } else {
            rows[i][j - 1] - xbar[j - 1]
        }
    });
    let weights: Vec<f64> = pi_sample.iter().map(|p| p.powi(-2)).collect();
    let y = frame.respondent_y();
    let beta = weighted_least_squares(
        &z,
        &weights,
        &y,
        "calibration regression",
        "a calibration regressor is constant or collinear among respondents",
    )?;
    let r = (0..rows.len())
        .map(|i| (y[i] - z.row(i).transpose().dot(&beta)) / pi_sample[i])
        .sum::<f64>()
        / rows.len() as f64;
    let beta2 = beta.rows(1, p).into_owned();
    let offset = -beta[0] * w - linear_term(&xbar, &beta2);
    Ok(CalibrationFit {
        beta1_centered: beta[0],
        beta1: beta[0] + r,
        beta2,
        offset,
    })
}

/// Regression coefficients for known selection probabilities `true_pi` (one
/// per unit) with bias calibration to `w` and benchmarking.
pub fn beta_known_pi(frame: &PopulationFrame, true_pi: &[f64], w: f64) -> Result<CalibrationFit> {
    check_len(frame, true_pi)?;
    let pi_sample: Vec<f64> = frame.respondents().map(|(i, _, _)| true_pi[i]).collect();
    calibration_regression(frame, &pi_sample, w, true)
}

fn check_len(frame: &PopulationFrame, v: &[f64]) -> Result<()> {
    if v.len() != frame.n_units() {
        return Err(EstimationError::InvalidInput(format!(
            "expected {} propensity values, found {}",
            frame.n_units(),
            v.len()
        )));
    }
    Ok(())
}

/// `Σ_S (π̂ᵢ⁻¹ − 1) bᵢ hᵢ'`, the bracket shared by γ̂, κ̂₁ and κ̂₂.
fn bracket(frame: &PopulationFrame, ps: &PsParams) -> Result<DMatrix<f64>> {
    if ps.instrument.dim() != ps.dim() {
        return Err(EstimationError::InvalidInput(
            "linearization requires dim(b) = dim(phi)".into(),
        ));
    }
    let q = ps.dim();
    let mut a = DMatrix::zeros(q, q);
    for (_, x, y) in frame.respondents() {
        let odds = (-ps.linear_predictor(x, y)).exp();
        a += ps.instrument.eval(x) * h_grad(x, y, ps).transpose() * odds;
    }
    Ok(a)
}

/// Solves `v' = c' A⁻¹`, i.e. `A' v = c`.
fn right_divide(a: &DMatrix<f64>, c: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    solve_square(
        &a.transpose(),
        c,
        what,
        "Σ(1/π̂ − 1) b h' is singular; the propensity weights are degenerate or b is collinear",
    )
}

/// `γ̂' = {Σ_S (π̂⁻¹ − 1) yᵢ hᵢ'} {Σ_S (π̂⁻¹ − 1) bᵢ hᵢ'}⁻¹`.
pub fn gamma_hat(frame: &PopulationFrame, ps: &PsParams) -> Result<DVector<f64>> {
    let a = bracket(frame, ps)?;
    let mut c = DVector::zeros(ps.dim());
    for (_, x, y) in frame.respondents() {
        let odds = (-ps.linear_predictor(x, y)).exp();
        c += h_grad(x, y, ps) * (odds * y);
    }
    right_divide(&a, &c, "gamma")
}

/// Linearization variance of the propensity-score estimator,
/// `η̂ᵢ = bᵢ'γ̂ + δᵢ π̂ᵢ⁻¹ (yᵢ − bᵢ'γ̂)`.
pub fn var_ps(frame: &PopulationFrame, ps: &PsParams) -> Result<(f64, InfluenceVector)> {
    let gamma = gamma_hat(frame, ps)?;
    let eta: Vec<f64> = (0..frame.n_units())
        .map(|i| {
            let x = frame.x_row(i);
            let fitted = ps.instrument.eval(x).dot(&gamma);
            match frame.y_observed(i) {
                Some(y) => fitted + (y - fitted) / ps_prob(x, y, ps),
                None => fitted,
            }
        })
        .collect();
    let v = var_from_influence(&eta)?;
    let mut iv = InfluenceVector::new("PS", eta);
    iv.gamma = gamma.iter().copied().collect();
    Ok((v, iv))
}

/// `κ̂₁' = −Σᵢ ĝ(xᵢ)' {Σ_S (π̂⁻¹ − 1) bᵢ hᵢ'}⁻¹`, with the sum over all units.
pub fn kappa1_hat(
    frame: &PopulationFrame,
    ps: &PsParams,
    smoothed: &SmoothedPsModel,
) -> Result<DVector<f64>> {
    let a = bracket(frame, ps)?;
    let mut gsum = DVector::zeros(ps.dim());
    for i in 0..frame.n_units() {
        gsum += g_hat(frame.x_row(i), smoothed);
    }
    Ok(-right_divide(&a, &gsum, "kappa1")?)
}

/// `κ̂₂' = {Σ_S (π̂⁻¹ − 1)(yᵢ − xᵢ'β̂₂) hᵢ'} {Σ_S (π̂⁻¹ − 1) bᵢ hᵢ'}⁻¹`.
/// An empty `beta2` means no benchmarking term.
pub fn kappa2_hat(
    frame: &PopulationFrame,
    ps: &PsParams,
    beta2: &DVector<f64>,
) -> Result<DVector<f64>> {
    kappa2_hat_with_offset(frame, ps, beta2, 0.0)
}

/// [`kappa2_hat`] with residuals `yᵢ − xᵢ'β̂₂ − c₀`.
pub fn kappa2_hat_with_offset(
    frame: &PopulationFrame,
    ps: &PsParams,
    beta2: &DVector<f64>,
    offset: f64,
) -> Result<DVector<f64>> {
    let a = bracket(frame, ps)?;
    let mut c = DVector::zeros(ps.dim());
    for (_, x, y) in frame.respondents() {
        let odds = (-ps.linear_predictor(x, y)).exp();
        let resid = y - linear_term(x, beta2) - offset;
        c += h_grad(x, y, ps) * (odds * resid);
    }
    right_divide(&a, &c, "kappa2")
}

fn linear_term(x: &[f64], beta2: &DVector<f64>) -> f64 {
    beta2.iter().zip(x).map(|(b, v)| b * v).sum()
}

/// Multiplier `ν̂` of the smoothing calibration `Σ (δᵢ/π̂(xᵢ) − 1) bᵢ = 0`.
///
/// The calibration term is zero at the fitted `α̂`; adding `ν'` times it to the
/// expansion with `ν̂` solving
/// `{Σ_S π̂(xᵢ)⁻² dᵢ bᵢ'} ν = β₁ Σᵢ dᵢ`, `dᵢ = ∂π̂(xᵢ)/∂α`,
/// removes the dependence on `α̂`. Zero when `φ_y` is degenerate, since `π̂`
/// then does not depend on `α`.
pub fn nu_hat(
    frame: &PopulationFrame,
    ps: &PsParams,
    smoothed: &SmoothedPsModel,
    beta1: f64,
) -> Result<DVector<f64>> {
    let q = ps.instrument.dim();
    if smoothed.degenerate || ps.outcome_coef().is_none() {
        return Ok(DVector::zeros(q));
    }
    // `∂π̂/∂α = φ_y π̂(1 − π̂) x̃`; the common factor φ_y cancels.
    let d = |x: &[f64]| {
        let pi = smoothed_pi(x, smoothed);
        smoothed.design.eval(x) * (pi * (1.0 - pi))
    };
    let k = smoothed.design.dim();
    let mut m = DMatrix::zeros(k, q);
    for (_, x, _) in frame.respondents() {
        let w = smoothed_weight(x, smoothed);
        m += d(x) * ps.instrument.eval(x).transpose() * (w * w);
    }
    let mut rhs = DVector::zeros(k);
    for i in 0..frame.n_units() {
        rhs += d(frame.x_row(i)) * beta1;
    }
    if k != q {
        return Err(EstimationError::InvalidInput(
            "linearization requires dim(b) = dim(x~)".into(),
        ));
    }
    solve_square(
        &m,
        &rhs,
        "smoothing calibration",
        "the smoothing calibration is singular in alpha",
    )
}

/// Which constraints accompany the bias calibration in the EL estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElConstraints {
    /// Bias calibration only.
    BiasCalibration,
    /// Bias calibration plus benchmarking on every auxiliary column.
    WithBenchmarking,
}

/// Linearization variance of the two-step EL estimator, accounting for the
/// estimation of `φ` and of the smoothing coefficients `α`:
///
/// ```text
/// ŷ⁽⁰⁾ᵢ = β̂₁π̂(xᵢ) + xᵢ'β̂₂ + c₀ + bᵢ'(κ̂₂ − m̂)
/// ŷ⁽¹⁾ᵢ = β̂₁π̂ᵢ + xᵢ'β̂₂ + c₀ + bᵢ'(κ̂₂ − m̂)
/// η̂ᵢ   = ŷ⁽⁰⁾ᵢ + δᵢ π̂ᵢ⁻¹ (yᵢ − ŷ⁽¹⁾ᵢ) + (δᵢ/π̂(xᵢ) − 1) bᵢ'ν̂
/// m̂    = A⁻ᵀ Σᵢ {β̂₁ − δᵢ π̂(xᵢ)⁻² bᵢ'ν̂} ĝ(xᵢ),   A = Σ_S (π̂ᵢ⁻¹ − 1) bᵢ hᵢ'
/// ```
///
/// with `(β̂₁, β̂₂, c₀)` from [`CalibrationFit`], `κ̂₂` computed on the
/// residuals `yᵢ − xᵢ'β̂₂ − c₀` and `ν̂` from [`nu_hat`]. With `ν̂ = 0`,
/// `m̂ = −β̂₁κ̂₁`. `w` is the bias-calibration target used by the estimator.
pub fn var_el(
    frame: &PopulationFrame,
    ps: &PsParams,
    smoothed: &SmoothedPsModel,
    constraints: ElConstraints,
    w: f64,
) -> Result<(f64, InfluenceVector)> {
    let pi_sample: Vec<f64> = frame
        .respondents()
        .map(|(_, x, y)| ps_prob(x, y, ps))
        .collect();
    let benchmark = constraints == ElConstraints::WithBenchmarking;
    let fit = calibration_regression(frame, &pi_sample, w, benchmark)?;
    let kappa1 = kappa1_hat(frame, ps, smoothed)?;
    let kappa2 = kappa2_hat_with_offset(frame, ps, &fit.beta2, fit.offset)?;
    let nu = nu_hat(frame, ps, smoothed, fit.beta1)?;
    let mut adjust = DVector::zeros(ps.dim());
    for (_, x, _) in frame.respondents() {
        let wx = smoothed_weight(x, smoothed);
        adjust += g_hat(x, smoothed) * (ps.instrument.eval(x).dot(&nu) * wx * wx);
    }
    let m = -&kappa1 * fit.beta1 - right_divide(&bracket(frame, ps)?, &adjust, "kappa1")?;

    let eta: Vec<f64> = (0..frame.n_units())
        .map(|i| {
            let x = frame.x_row(i);
            let b = ps.instrument.eval(x);
            let shared = b.dot(&kappa2) - b.dot(&m);
            let y0 = fit.fitted(smoothed_pi(x, smoothed), x) + shared;
            let calib = b.dot(&nu);
            match frame.y_observed(i) {
                Some(y) => {
                    let pi = ps_prob(x, y, ps);
                    let y1 = fit.fitted(pi, x) + shared;
                    y0 + (y - y1) / pi + (smoothed_weight(x, smoothed) - 1.0) * calib
                }
                None => y0 - calib,
            }
        })
        .collect();
    let v = var_from_influence(&eta)?;
    let label = if benchmark { "EL-2" } else { "EL-1" };
    let mut iv = InfluenceVector::new(label, eta);
    iv.beta1 = Some(fit.beta1);
    iv.beta2 = fit.beta2.iter().copied().collect();
    iv.offset = fit.offset;
    iv.kappa1 = kappa1.iter().copied().collect();
    iv.kappa2 = kappa2.iter().copied().collect();
    iv.nu = nu.iter().copied().collect();
    Ok((v, iv))
}

/// Linearization variance of the EL estimator with known selection
/// probabilities: `η̂ᵢ = ŷᵢ + δᵢ πᵢ⁻¹ (yᵢ − ŷᵢ)`, `ŷᵢ = πᵢβ̂₁ + xᵢ'β̂₂ + c₀`.
pub fn var_el_known_pi(
    frame: &PopulationFrame,
    true_pi: &[f64],
    w: f64,
) -> Result<(f64, InfluenceVector)> {
    let fit = beta_known_pi(frame, true_pi, w)?;
    let eta: Vec<f64> = (0..frame.n_units())
        .map(|i| {
            let fitted = fit.fitted(true_pi[i], frame.x_row(i));
            match frame.y_observed(i) {
                Some(y) => fitted + (y - fitted) / true_pi[i],
                None => fitted,
            }
        })
        .collect();
    let v = var_from_influence(&eta)?;
    let mut iv = InfluenceVector::new("EL-known-pi", eta);
    iv.beta1 = Some(fit.beta1);
    iv.beta2 = fit.beta2.iter().copied().collect();
    iv.offset = fit.offset;
    Ok((v, iv))
}

/// Standard normal quantile by Wichura's AS 241 rational approximation
/// (PPND16), accurate to about 1e-16 relative.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2_509.080_928_730_122_7 * r + 33_430.575_583_588_13) * r
            + 67_265.770_927_008_7)
            * r
            + 45_921.953_931_549_87)
            * r
            + 13_731.693_765_509_46)
            * r
            + 1_971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5_226.495_278_852_546 * r + 28_729.085_735_721_94) * r
            + 39_307.895_800_092_71)
            * r
            + 21_213.794_301_586_597)
            * r
            + 5_394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_888)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Normal-theory interval `θ̂ ± z_{(1+level)/2} √v`.
pub fn confidence_interval(theta: f64, v: f64, level: f64) -> Result<(f64, f64)> {
    if v.is_nan() || v < 0.0 {
        return Err(EstimationError::InvalidInput(format!(
            "variance must be non-negative, got {v}"
        )));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(EstimationError::InvalidInput(format!(
            "confidence level must lie in [0, 1), got {level}"
        )));
    }
    let half = normal_quantile(0.5 * (1.0 + level)) * v.sqrt();
    Ok((theta - half, theta + half))
}
