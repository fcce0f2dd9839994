//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's own numerics.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance
/// `tol`. Starts from 64 panels so narrow peaks are not stepped over.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|k| {
            let lo = a + k as f64 * h;
            let hi = if k + 1 == PANELS { b } else { lo + h };
            integrate_panel(f, lo, hi, tol / PANELS as f64)
        })
        .sum()
}

fn integrate_panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

pub fn gauss_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Mean and variance of `max(a, 0)` for `a ~ N(mean, var)` by quadrature.
pub fn rectifier_by_quadrature(mean: f64, var: f64) -> (f64, f64) {
    let s = var.sqrt();
    let hi = mean + 14.0 * s;
    if hi <= 0.0 {
        return (0.0, 0.0);
    }
    let lo = (mean - 14.0 * s).max(0.0);
    let tol = 1e-11;
    let first = integrate(&|a| a * gauss_density(a, mean, var), lo, hi, tol);
    // Central second moment around the quadrature mean keeps the
    // subtraction well conditioned.
    let p0 = integrate(&|a| gauss_density(a, mean, var), lo, hi, tol);
    let around = integrate(&|a| (a - first).powi(2) * gauss_density(a, mean, var), lo, hi, tol);
    // Mass at zero contributes (0 − first)² · P(a ≤ 0).
    (first, around + (1.0 - p0) * first * first)
}

/// `KL(N(m1, s1²) ‖ N(m2, s2²))` by integrating `q log(q/p)`.
pub fn kl_by_quadrature(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let (v1, v2) = (s1 * s1, s2 * s2);
    let log_ratio = |x: f64| {
        // log q − log p written out so the tails do not underflow.
        -(x - m1).powi(2) / (2.0 * v1) + (x - m2).powi(2) / (2.0 * v2) + (s2 / s1).ln()
    };
    let f = |x: f64| gauss_density(x, m1, v1) * log_ratio(x);
    integrate(&f, m1 - 16.0 * s1, m1 + 16.0 * s1, 1e-13)
}

/// Dense `C⁻¹` and `log det C` by Cholesky.
pub fn dense_precision_logdet(diag: &[f64], terms: &[(Vec<f64>, Vec<f64>)]) -> (DMatrix<f64>, f64) {
    let m = diag.len();
    let mut c = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
    for (u, v) in terms {
        c += DVector::from_column_slice(u) * DVector::from_column_slice(v).transpose();
    }
    let chol = c.clone().cholesky().expect("oracle matrix is positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = chol.inverse();
    assert_eq!(inv.nrows(), m);
    (inv, logdet)
}

/// Diagonal and rank-one `(u, v)` pairs.
pub type LowRank = (Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>);

/// A random diagonal-plus-symmetric-rank-one instance of the shape the
/// covariant output layer produces: terms `(σ²_k μ_k, μ_k)` with weights
/// `μ_k` and positive scalars `σ²_k`.
pub fn random_low_rank<R: Rng>(rng: &mut R, m: usize, n: usize) -> LowRank {
    let diag = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    let terms = (0..n)
        .map(|_| {
            let mu: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s2 = rng.random_range(0.0..0.5);
            (mu.iter().map(|v| v * s2).collect(), mu)
        })
        .collect();
    (diag, terms)
}

pub fn relative_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
