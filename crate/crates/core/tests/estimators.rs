mod common;

use nalgebra::DVector;
use rand::Rng;
use voluntary_el::el::mele;
use voluntary_el::estimators::{
    estimate, fit_models, theta_el, theta_el_known_pi, theta_full, theta_ps, theta_rps_optimal,
    EstimatorKind, PipelineOptions, WRule,
};
use voluntary_el::population::{Oracle, PopulationFrame, Scenario};
use voluntary_el::ps_fit::{fit_ps_default, ps_prob, Instrument, PsParams};
use voluntary_el::smoothing::SmoothedPsModel;
use voluntary_el::variance::{var_el_known_pi, ElConstraints};
use voluntary_el::EstimationError;

use common::{frame_from, gauss_solve, normal, rng, scenario_frame};

fn constant_model(phi0: f64) -> (PsParams, SmoothedPsModel) {
    let ps = PsParams::nonignorable_default(2).with_phi(DVector::from_vec(vec![phi0, 0.0, 0.0]));
    let smoothed = SmoothedPsModel {
        ps: ps.clone(),
        design: Instrument::intercept_and_all(2),
        alpha: DVector::zeros(3),
        sigma2: 1.0,
        calibration_residual: 0.0,
        degenerate: true,
        iterations: 0,
    };
    (ps, smoothed)
}

#[test]
fn full_mean_needs_oracle_data() {
    let frame = frame_from(&[[1.0, 1.0], [2.0, 2.0]], &[true, false], &[3.0, 0.0]);
    assert!(matches!(
        theta_full(&frame),
        Err(EstimationError::OracleRequired(_))
    ));
    let with = frame
        .with_oracle(Oracle {
            y_full: vec![4.0, 4.0],
            true_pi: vec![0.5, 0.5],
            superpopulation_mean: 0.0,
        })
        .unwrap();
    assert_eq!(theta_full(&with).unwrap(), 4.0);
}

#[test]
fn full_mean_of_a_large_m1_population_is_near_zero() {
    let frame = scenario_frame(Scenario::M1, 1_000_000, 1);
    assert!(theta_full(&frame).unwrap().abs() <= 0.005);
}

#[test]
fn ps_with_constant_propensity_is_the_expanded_sample_mean() {
    let frame = scenario_frame(Scenario::M1, 400, 2);
    let rate = frame.n_sample() as f64 / frame.n_units() as f64;
    let (ps, _) = constant_model((rate / (1.0 - rate)).ln());
    let y = frame.respondent_y();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((theta_ps(&frame, &ps) - mean).abs() < 1e-12);
}

#[test]
fn ps_with_a_single_certain_respondent_returns_its_outcome() {
    let frame = PopulationFrame::new(
        vec!["x1".into(), "x2".into()],
        vec![vec![1.0, 2.0]],
        vec![true],
        vec![Some(7.5)],
    )
    .unwrap();
    let (ps, _) = constant_model(40.0);
    assert_eq!(theta_ps(&frame, &ps), 7.5);
}

#[test]
fn el_with_centred_constraints_returns_the_respondent_mean() {
    // Respondent and non-respondent x-means coincide and π is constant.
    let frame = frame_from(
        &[
            [1.0, 2.0],
            [3.0, 4.0],
            [2.0, 3.0],
            [2.0, 3.0],
            [1.0, 4.0],
            [3.0, 2.0],
        ],
        &[true, true, true, false, false, false],
        &[1.0, 5.0, 0.0, 0.0, 0.0, 0.0],
    );
    let (ps, smoothed) = constant_model(0.0);
    for c in [
        ElConstraints::BiasCalibration,
        ElConstraints::WithBenchmarking,
    ] {
        let (theta, sol) = theta_el(&frame, &ps, &smoothed, c, WRule::PopulationMean).unwrap();
        assert!((theta - 2.0).abs() < 1e-14);
        assert!(sol.p.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-14));
    }
}

#[test]
fn el2_weights_reproduce_the_benchmarks() {
    let frame = scenario_frame(Scenario::M2, 5000, 3);
    let fitted = fit_models(&frame, &PipelineOptions::default()).unwrap();
    let (theta, sol) = theta_el(
        &frame,
        &fitted.ps,
        &fitted.smoothed,
        ElConstraints::WithBenchmarking,
        WRule::PopulationMean,
    )
    .unwrap();
    let xbar = frame.x_means();
    for j in 0..2 {
        let est: f64 = frame
            .respondents()
            .zip(&sol.p)
            .map(|((_, x, _), p)| p * x[j])
            .sum();
        assert!((est - xbar[j]).abs() <= 1e-9);
    }
    // Shifting y at fixed weights shifts the estimate by exactly the constant.
    let shifted: Vec<f64> = frame.respondent_y().iter().map(|y| y + 3.25).collect();
    assert!((mele(&sol, &shifted).unwrap() - theta - 3.25).abs() < 1e-12);
}

#[test]
fn ps_weights_at_the_fit_shift_by_the_constant() {
    let frame = scenario_frame(Scenario::M1, 5000, 4);
    let (ps, _) = fit_ps_default(&frame).unwrap();
    let n = frame.n_units() as f64;
    let w: Vec<f64> = frame
        .respondents()
        .map(|(_, x, y)| 1.0 / ps_prob(x, y, &ps))
        .collect();
    let base: f64 = frame
        .respondent_y()
        .iter()
        .zip(&w)
        .map(|(y, w)| y * w)
        .sum::<f64>()
        / n;
    let moved: f64 = frame
        .respondent_y()
        .iter()
        .zip(&w)
        .map(|(y, w)| (y + 2.0) * w)
        .sum::<f64>()
        / n;
    assert!((base - theta_ps(&frame, &ps)).abs() < 1e-12);
    assert!((moved - base - 2.0).abs() < 1e-8);
}

#[test]
fn regression_ps_is_exact_for_noise_free_outcomes() {
    let mut r = rng(5);
    let rows: Vec<[f64; 2]> = (0..40)
        .map(|_| [2.0 + normal(&mut r), 2.0 + normal(&mut r)])
        .collect();
    let delta: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
    let y: Vec<f64> = rows.iter().map(|x| 1.5 * x[0] - 0.5 * x[1]).collect();
    let frame = frame_from(&rows, &delta, &y);
    let (ps, _) = fit_ps_default(&frame).unwrap();
    let expected = y.iter().sum::<f64>() / 40.0;
    assert!((theta_rps_optimal(&frame, &ps).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn regression_ps_equals_ps_when_x_lies_in_the_instrument_span() {
    // Calibration on b ⊇ x makes the regression term vanish at φ̂.
    let frame = scenario_frame(Scenario::M1, 5000, 6);
    let (ps, _) = fit_ps_default(&frame).unwrap();
    let rps = theta_rps_optimal(&frame, &ps).unwrap();
    assert!((rps - theta_ps(&frame, &ps)).abs() < 1e-8);
}

#[test]
fn regression_ps_refuses_unidentified_coefficients() {
    // Constant propensity without calibration: β is not identified and matters.
    let frame = scenario_frame(Scenario::M1, 300, 7);
    let (ps, _) = constant_model(0.0);
    let err = theta_rps_optimal(&frame, &ps).unwrap_err();
    assert!(matches!(err, EstimationError::Singular { .. }), "{err:?}");
}

/// Intercept-only instrument with constant π: the system is an ordinary
/// overdetermined least-squares problem, solved here by explicit normal equations.
#[test]
fn regression_ps_matches_naive_least_squares() {
    let mut r = rng(8);
    let rows: Vec<[f64; 2]> = (0..20)
        .map(|_| [2.0 + normal(&mut r), 2.0 + normal(&mut r)])
        .collect();
    let delta: Vec<bool> = (0..20).map(|_| r.random::<f64>() < 0.6).collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|x| -4.0 + x[0] + x[1] + normal(&mut r))
        .collect();
    let frame = frame_from(&rows, &delta, &y);
    let pi = 0.4_f64;
    let ps = PsParams {
        phi: DVector::from_vec(vec![(pi / (1.0 - pi)).ln(), 0.0, 0.0]),
        covariates: vec![0],
        include_outcome: true,
        instrument: Instrument {
            intercept: true,
            columns: vec![],
        },
    };
    // Unknowns (β₁, β₂, γ); instruments (x₁, x₂, 1, x₁, y).
    let w = (1.0 - pi) / pi;
    let mut a = vec![vec![0.0; 3]; 5];
    let mut rhs = vec![0.0; 5];
    for i in (0..20).filter(|&i| delta[i]) {
        let reg = [rows[i][0], rows[i][1], 1.0];
        let ins = [rows[i][0], rows[i][1], 1.0, rows[i][0], y[i]];
        for e in 0..5 {
            for k in 0..3 {
                a[e][k] += w * ins[e] * reg[k];
            }
            rhs[e] += w * ins[e] * y[i];
        }
    }
    let ata: Vec<Vec<f64>> = (0..3)
        .map(|j| {
            (0..3)
                .map(|k| (0..5).map(|e| a[e][j] * a[e][k]).sum())
                .collect()
        })
        .collect();
    let atb: Vec<f64> = (0..3)
        .map(|j| (0..5).map(|e| a[e][j] * rhs[e]).sum())
        .collect();
    let coef = gauss_solve(ata, atb);
    let mut total = 0.0;
    for i in 0..20 {
        let fit = coef[0] * rows[i][0] + coef[1] * rows[i][1];
        total += fit + if delta[i] { (y[i] - fit) / pi } else { 0.0 };
    }
    let expected = total / 20.0;
    assert!((theta_rps_optimal(&frame, &ps).unwrap() - expected).abs() < 1e-8);
}

#[test]
fn known_pi_el_with_constant_pi_ignores_the_calibration() {
    let frame = scenario_frame(Scenario::M1, 500, 9);
    let pi = vec![0.5; frame.n_units()];
    let (_, sol) = theta_el_known_pi(&frame, &pi, WRule::PopulationMean).unwrap();
    assert!(
        sol.dropped.iter().any(|l| l.contains("pi")),
        "{:?}",
        sol.dropped
    );
}

/// The gap between the known-π EL estimate and its linearization shrinks
/// faster than n^{-1/2}: √n·|gap| does not grow with n.
#[test]
fn known_pi_linearization_gap_is_of_smaller_order() {
    let mut scaled = Vec::new();
    for n_units in [1000usize, 4000, 16000] {
        let mut acc = 0.0;
        let reps = 20;
        for k in 0..reps {
            let frame = scenario_frame(Scenario::M1, n_units, 5000 + k);
            let pi = frame.oracle().unwrap().true_pi.clone();
            let w = pi.iter().sum::<f64>() / n_units as f64;
            let (theta, _) = theta_el_known_pi(&frame, &pi, WRule::PopulationMean).unwrap();
            let (_, iv) = var_el_known_pi(&frame, &pi, w).unwrap();
            let linear = iv.eta.iter().sum::<f64>() / n_units as f64;
            acc += (theta - linear).abs() * (frame.n_sample() as f64).sqrt();
        }
        scaled.push(acc / reps as f64);
    }
    assert!(
        scaled[1] <= 1.5 * scaled[0] && scaled[2] <= 1.5 * scaled[0],
        "{scaled:?}"
    );
    assert!(scaled[2] < scaled[0], "{scaled:?}");
}

#[test]
fn estimate_requires_fitted_models_and_oracle_data() {
    let frame = scenario_frame(Scenario::M1, 500, 10);
    assert!(estimate(
        &frame,
        EstimatorKind::El2,
        None,
        WRule::PopulationMean,
        0.95
    )
    .is_err());
    let mut text = Vec::new();
    frame.write_csv(&mut text).unwrap();
    let plain =
        voluntary_el::population::read_population(text.as_slice(), &Default::default()).unwrap();
    let err = estimate(
        &plain,
        EstimatorKind::ElKnownPi,
        None,
        WRule::PopulationMean,
        0.95,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let fitted = fit_models(&plain, &PipelineOptions::default()).unwrap();
    let rep = estimate(
        &plain,
        EstimatorKind::El2,
        Some(&fitted),
        WRule::PopulationMean,
        0.95,
    )
    .unwrap();
    let (lo, hi) = rep.ci.unwrap();
    assert!(lo < rep.theta && rep.theta < hi);
    assert_eq!(rep.influence.unwrap().eta.len(), plain.n_units());
}

#[test]
fn estimator_keys_round_trip() {
    for k in EstimatorKind::ALL {
        assert_eq!(k.key().parse::<EstimatorKind>().unwrap(), k);
    }
    assert!("el3".parse::<EstimatorKind>().is_err());
}
