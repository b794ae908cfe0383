#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use voluntary_el::population::{generate_population, PopulationFrame, Scenario, ScenarioConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Frame with two auxiliary columns drawn from N(2, 1), y = −4 + x1 + x2 + e,
/// and independent selection with probability `rate`. Always has at least one
/// respondent and one non-respondent.
pub fn random_frame(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> PopulationFrame {
    assert!(n >= 2);
    let mut rows = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let x1 = 2.0 + normal(rng);
        let x2 = 2.0 + normal(rng);
        let d = match i {
            0 => true,
            1 => false,
            _ => rng.random::<f64>() < rate,
        };
        rows.push(vec![x1, x2]);
        delta.push(d);
        y.push(d.then(|| -4.0 + x1 + x2 + normal(rng)));
    }
    PopulationFrame::new(vec!["x1".into(), "x2".into()], rows, delta, y).unwrap()
}

pub fn scenario_frame(scenario: Scenario, n_units: usize, seed: u64) -> PopulationFrame {
    let cfg = ScenarioConfig {
        n_units,
        ..ScenarioConfig::new(scenario, seed)
    };
    generate_population(&cfg).unwrap()
}

/// Frame built from explicit rows; `y` is ignored where `delta` is false.
pub fn frame_from(rows: &[[f64; 2]], delta: &[bool], y: &[f64]) -> PopulationFrame {
    PopulationFrame::new(
        vec!["x1".into(), "x2".into()],
        rows.iter().map(|r| r.to_vec()).collect(),
        delta.to_vec(),
        delta.iter().zip(y).map(|(&d, &v)| d.then_some(v)).collect(),
    )
    .unwrap()
}

pub fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Root of a decreasing function on `(lo, hi)` by bisection.
pub fn bisect(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol {
            return mid;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves a small dense linear system by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
