//! Moment propagation primitives.
//!
//! Every quantity flowing through a network is summarised by a per-unit mean
//! and variance. Components are treated as independent, so linear maps,
//! the rectifier and elementwise noise each have closed-form rules for the
//! first two moments of their output.
//!
//! The `*_batch` kernels operate on `B×n` matrices (one row per sample) and
//! are shared by the plain forward pass and the recording tape.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FawnError, Result};
use crate::tensor::Matrix;

/// |r| beyond which the rectifier is treated as fully saturated.
pub const RECTIFIER_CLAMP: f64 = 37.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mean and variance of each unit of an activation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl MomentVector {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(dim_err("MomentVector", mean.len(), variance.len()));
        }
        if let Some(v) = variance.iter().find(|v| !(**v >= 0.0)) {
            return Err(FawnError::InvalidInput(format!("negative or NaN variance {v}")));
        }
        Ok(Self { mean, variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub(crate) fn from_row_matrices(mean: &Matrix, var: &Matrix, row: usize) -> Self {
        Self {
            mean: mean.row(row).to_vec(),
            variance: var.row(row).to_vec(),
        }
    }

    pub(crate) fn to_row_matrices(&self) -> (Matrix, Matrix) {
        (Matrix::row_vector(&self.mean), Matrix::row_vector(&self.variance))
    }
}

/// Treat a deterministic input as a degenerate distribution.
pub fn lift_point(x: &[f64]) -> Result<MomentVector> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(FawnError::InvalidInput(format!("non-finite input value {v}")));
    }
    Ok(MomentVector {
        mean: x.to_vec(),
        variance: vec![0.0; x.len()],
    })
}

fn check_nonneg(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v >= 0.0)) {
        Some(v) => Err(FawnError::InvalidInput(format!("{what} must be nonnegative, got {v}"))),
        None => Ok(()),
    }
}

/// Moments of `a = wᵀx + b` with independent `w`, `x` and `b`.
///
/// `w_mean` and `w_variance` are `n×m` (input by output); the biases have
/// length `m`.
pub fn linear_moments(
    x: &MomentVector,
    w_mean: &Matrix,
    w_variance: &Matrix,
    b_mean: &[f64],
    b_variance: &[f64],
) -> Result<MomentVector> {
    let n = x.len();
    if w_mean.rows() != n {
        return Err(dim_err("linear_moments weight rows", n, w_mean.rows()));
    }
    if w_variance.shape() != w_mean.shape() {
        return Err(dim_err(
            "linear_moments weight variance",
            format!("{:?}", w_mean.shape()),
            format!("{:?}", w_variance.shape()),
        ));
    }
    let m = w_mean.cols();
    if b_mean.len() != m || b_variance.len() != m {
        return Err(dim_err(
            "linear_moments bias",
            m,
            format!("{}/{}", b_mean.len(), b_variance.len()),
        ));
    }
    check_nonneg("weight variance", w_variance.as_slice())?;
    check_nonneg("bias variance", b_variance)?;

    let (xm, xv) = x.to_row_matrices();
    let bm = Matrix::row_vector(b_mean);
    let bv = Matrix::row_vector(b_variance);
    let mean = linear_mean_batch(&xm, w_mean, &bm);
    let var = linear_var_batch(&xm, &xv, w_mean, w_variance, &bv);
    Ok(MomentVector::from_row_matrices(&mean, &var, 0))
}

/// Moments of `max(a, 0)` for Gaussian `a`, applied per component.
pub fn rectifier_moments(a: &MomentVector) -> Result<MomentVector> {
    check_nonneg("pre-activation variance", &a.variance)?;
    let (mean, variance) = a
        .mean
        .iter()
        .zip(&a.variance)
        .map(|(&m, &v)| rectifier_point(m, v))
        .unzip();
    Ok(MomentVector { mean, variance })
}

/// Moments of a single rectified Gaussian `max(a, 0)`, `a ~ N(mean, var)`.
pub fn rectifier_point(mean: f64, var: f64) -> (f64, f64) {
    if var == 0.0 {
        return (mean.max(0.0), 0.0);
    }
    let s = var.sqrt();
    let r = mean / s;
    if r <= -RECTIFIER_CLAMP {
        return (0.0, 0.0);
    }
    if r >= RECTIFIER_CLAMP {
        return (mean, var);
    }
    let cdf = normal_cdf(r);
    let pdf = normal_pdf(r);
    let first = cdf * mean + pdf * s;
    let second = (mean * mean + var) * cdf + mean * s * pdf;
    (first, (second - first * first).max(0.0))
}

/// Partial derivatives `[∂E/∂m, ∂E/∂v, ∂V/∂m, ∂V/∂v]` of the rectifier output
/// moments with respect to the input mean and variance.
pub(crate) fn rectifier_partials(mean: f64, var: f64) -> [f64; 4] {
    if var == 0.0 {
        let on = if mean > 0.0 { 1.0 } else { 0.0 };
        return [on, 0.0, 0.0, on];
    }
    let s = var.sqrt();
    let r = mean / s;
    if r <= -RECTIFIER_CLAMP {
        return [0.0; 4];
    }
    if r >= RECTIFIER_CLAMP {
        return [1.0, 0.0, 0.0, 1.0];
    }
    let cdf = normal_cdf(r);
    let pdf = normal_pdf(r);
    let first = cdf * mean + pdf * s;
    let de_dm = cdf;
    let de_dv = pdf / (2.0 * s);
    // E[y²] has ∂/∂m = 2E[y] and ∂/∂v = Φ(r).
    let dvar_dm = 2.0 * first * (1.0 - cdf);
    let dvar_dv = cdf - first * pdf / s;
    [de_dm, de_dv, dvar_dm, dvar_dv]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Additive,
    Multiplicative,
}

/// Independent elementwise noise `ε` applied as `x + ε` or `x · ε`.
///
/// `eps_mean` / `eps_variance` hold either one value (broadcast) or one value
/// per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eps_mean: Vec<f64>,
    pub eps_variance: Vec<f64>,
}

impl NoiseSpec {
    pub fn additive(eps_mean: f64, eps_variance: f64) -> Self {
        Self {
            kind: NoiseKind::Additive,
            eps_mean: vec![eps_mean],
            eps_variance: vec![eps_variance],
        }
    }

    pub fn multiplicative(eps_mean: f64, eps_variance: f64) -> Self {
        Self {
            kind: NoiseKind::Multiplicative,
            eps_mean: vec![eps_mean],
            eps_variance: vec![eps_variance],
        }
    }

    /// Dropout keeping each unit with probability `keep` (mask `m ~ B(keep)`).
    pub fn dropout(keep: f64) -> Self {
        Self::multiplicative(keep, keep * (1.0 - keep))
    }

    pub(crate) fn validate(&self, width: usize) -> Result<()> {
        for (what, v) in [("eps_mean", &self.eps_mean), ("eps_variance", &self.eps_variance)] {
            if v.len() != 1 && v.len() != width {
                return Err(dim_err("noise spec", format!("1 or {width}"), format!("{what} of {}", v.len())));
            }
        }
        check_nonneg("noise variance", &self.eps_variance)
    }

    #[inline]
    fn at(values: &[f64], j: usize) -> f64 {
        if values.len() == 1 {
            values[0]
        } else {
            values[j]
        }
    }

    #[inline]
    pub(crate) fn mean_at(&self, j: usize) -> f64 {
        Self::at(&self.eps_mean, j)
    }

    #[inline]
    pub(crate) fn var_at(&self, j: usize) -> f64 {
        Self::at(&self.eps_variance, j)
    }
}

/// Moments after corrupting `x` with the noise process `noise`.
pub fn apply_noise(x: &MomentVector, noise: &NoiseSpec) -> Result<MomentVector> {
    noise.validate(x.len())?;
    let (m, v) = x.to_row_matrices();
    let (mean, var) = noise_batch(&m, &v, noise);
    Ok(MomentVector::from_row_matrices(&mean, &var, 0))
}

pub(crate) fn noise_batch(mean: &Matrix, var: &Matrix, noise: &NoiseSpec) -> (Matrix, Matrix) {
    let mut out_m = mean.clone();
    let mut out_v = var.clone();
    for i in 0..mean.rows() {
        for j in 0..mean.cols() {
            let (m, v) = (mean.get(i, j), var.get(i, j));
            let (em, ev) = (noise.mean_at(j), noise.var_at(j));
            let (nm, nv) = match noise.kind {
                NoiseKind::Additive => (m + em, v + ev),
                NoiseKind::Multiplicative => (m * em, m * m * ev + v * em * em + v * ev),
            };
            out_m.set(i, j, nm);
            out_v.set(i, j, nv);
        }
    }
    (out_m, out_v)
}

/// `x_mean · w_mean + b_mean` row by row.
pub(crate) fn linear_mean_batch(x_mean: &Matrix, w_mean: &Matrix, b_mean: &Matrix) -> Matrix {
    let mut out = x_mean.matmul(w_mean);
    add_row_broadcast(&mut out, b_mean);
    out
}

/// `b_var + (x_mean²)·w_var + x_var·(w_mean²) + x_var·w_var`.
pub(crate) fn linear_var_batch(
    x_mean: &Matrix,
    x_var: &Matrix,
    w_mean: &Matrix,
    w_var: &Matrix,
    b_var: &Matrix,
) -> Matrix {
    let w_second = w_mean.zip_map(w_var, |m, v| m * m + v);
    let mut out = x_mean.map(|m| m * m).matmul(w_var);
    out.add_assign(&x_var.matmul(&w_second));
    add_row_broadcast(&mut out, b_var);
    out
}

/// The output variance without the `x_var·(w_mean²)` contribution:
/// `b_var + (x_mean² + x_var)·w_var`. This is the diagonal part of the
/// full output covariance.
pub(crate) fn cov_diag_batch(x_mean: &Matrix, x_var: &Matrix, w_var: &Matrix, b_var: &Matrix) -> Matrix {
    let second = x_mean.zip_map(x_var, |m, v| m * m + v);
    let mut out = second.matmul(w_var);
    add_row_broadcast(&mut out, b_var);
    out
}

pub(crate) fn rectifier_batch(mean: &Matrix, var: &Matrix) -> (Matrix, Matrix) {
    let mut out_m = Matrix::zeros(mean.rows(), mean.cols());
    let mut out_v = Matrix::zeros(mean.rows(), mean.cols());
    for ((om, ov), (&m, &v)) in out_m
        .as_mut_slice()
        .iter_mut()
        .zip(out_v.as_mut_slice().iter_mut())
        .zip(mean.as_slice().iter().zip(var.as_slice()))
    {
        let (a, b) = rectifier_point(m, v);
        *om = a;
        *ov = b;
    }
    (out_m, out_v)
}

pub(crate) fn add_row_broadcast(out: &mut Matrix, row: &Matrix) {
    debug_assert_eq!(row.rows(), 1);
    debug_assert_eq!(row.cols(), out.cols());
    let r = row.as_slice();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(r) {
            *o += b;
        }
    }
}
