//! Full-covariance output layer.
//!
//! For the last layer `y = xᵀW + b` with independent Gaussian weights, two
//! outputs `o`, `p` share the input `x`, which makes them correlated:
//! `Cov(o, p) = V[x]ᵀ(μ_{·,o} ∘ μ_{·,p})`. The covariance factors as
//!
//! ```text
//! C = diag(v) + Σ_i u_i v_iᵀ,   u_i = V[x_i]·μ_{i,·},  v_i = μ_{i,·}
//! ```
//!
//! where `v` collects everything that is not shared between outputs. The
//! precision and log-determinant are built by starting from the diagonal and
//! applying one Sherman–Morrison / determinant-lemma update per hidden unit.

use crate::error::{dim_err, FawnError, Result};
use crate::layers::{GaussianWeightLayer, WeightLayer};
use crate::moments::{cov_diag_batch, linear_mean_batch, MomentVector};
use crate::tensor::Matrix;

/// Pivots `1 + vᵀA⁻¹u` below this abort the recursion.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Output mean plus covariance stored as diagonal + rank-one terms.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariantOutput {
    pub mean: Vec<f64>,
    pub diag_v: Vec<f64>,
    pub rank_one_terms: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CovariantOutput {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Materialises `C`.
    pub fn dense(&self) -> Matrix {
        let m = self.dim();
        let mut c = Matrix::zeros(m, m);
        for (o, d) in self.diag_v.iter().enumerate() {
            c.set(o, o, *d);
        }
        for (u, v) in &self.rank_one_terms {
            for o in 0..m {
                for p in 0..m {
                    c.add_at(o, p, u[o] * v[p]);
                }
            }
        }
        c
    }

    /// Same output with `extra` added to the diagonal part.
    pub fn with_extra_diagonal(&self, extra: &[f64]) -> Result<Self> {
        if extra.len() != self.dim() {
            return Err(dim_err("extra diagonal", self.dim(), extra.len()));
        }
        let mut out = self.clone();
        for (d, e) in out.diag_v.iter_mut().zip(extra) {
            *d += e;
        }
        Ok(out)
    }
}

/// Assembles the covariant output of `last_layer` applied to `x`.
pub fn output_covariance(x: &MomentVector, last_layer: &GaussianWeightLayer) -> Result<CovariantOutput> {
    if x.len() != last_layer.inputs() {
        return Err(dim_err("output_covariance input", last_layer.inputs(), x.len()));
    }
    let (xm, xv) = (Matrix::row_vector(x.mean()), Matrix::row_vector(x.variance()));
    let mean = linear_mean_batch(&xm, &last_layer.mu, &last_layer.bias_mu);
    let diag = cov_diag_batch(&xm, &xv, &last_layer.weight_variance(), &last_layer.bias_variance());
    Ok(CovariantOutput {
        mean: mean.into_vec(),
        diag_v: diag.into_vec(),
        rank_one_terms: rank_one_terms(x.variance(), &last_layer.mu),
    })
}

pub(crate) fn rank_one_terms(x_var: &[f64], w_mean: &Matrix) -> Vec<(Vec<f64>, Vec<f64>)> {
    x_var
        .iter()
        .enumerate()
        .map(|(i, &xv)| {
            let row = w_mean.row(i);
            (row.iter().map(|w| xv * w).collect(), row.to_vec())
        })
        .collect()
}

/// Full-covariance predictive output of a network for one input.
pub fn forward_covariant(
    spec: &crate::layers::NetworkSpec,
    layers: &[WeightLayer],
    x: &[f64],
) -> Result<CovariantOutput> {
    let lifted = crate::moments::lift_point(x)?;
    let (xm, _) = lifted.to_row_matrices();
    let pen = crate::layers::penultimate_batch(spec, layers, &xm)?;
    let WeightLayer::Gaussian(_) = layers.last().expect("checked") else {
        return Err(FawnError::Unsupported("covariant output needs a Gaussian last layer".into()));
    };
    let mean = linear_mean_batch(&pen.input.mean, &pen.last.w_mean, &pen.last.b_mean);
    let diag = crate::layers::output_diag_v(&pen);
    Ok(CovariantOutput {
        mean: mean.into_vec(),
        diag_v: diag.into_vec(),
        rank_one_terms: rank_one_terms(pen.input.var.row(0), &pen.last.w_mean),
    })
}

/// `C⁻¹` and `log det C` by rank-one updates starting from `diag(diag_v)`.
pub fn recursive_precision_logdet(diag_v: &[f64], terms: &[(Vec<f64>, Vec<f64>)]) -> Result<(Matrix, f64)> {
    let m = diag_v.len();
    if let Some(d) = diag_v.iter().find(|d| !(**d > 0.0)) {
        return Err(FawnError::InvalidInput(format!("diagonal entries must be positive, got {d}")));
    }
    let mut precision = Matrix::zeros(m, m);
    let mut logdet = 0.0;
    for (o, d) in diag_v.iter().enumerate() {
        precision.set(o, o, 1.0 / d);
        logdet += d.ln();
    }
    let mut a_u = vec![0.0; m];
    let mut v_a = vec![0.0; m];
    for (k, (u, v)) in terms.iter().enumerate() {
        if u.len() != m || v.len() != m {
            return Err(dim_err("rank-one term", m, format!("{}/{}", u.len(), v.len())));
        }
        for o in 0..m {
            a_u[o] = precision.row(o).iter().zip(u).map(|(a, b)| a * b).sum();
        }
        v_a.iter_mut().for_each(|x| *x = 0.0);
        for (p, &vp) in v.iter().enumerate() {
            if vp == 0.0 {
                continue;
            }
            for (acc, a) in v_a.iter_mut().zip(precision.row(p)) {
                *acc += vp * a;
            }
        }
        let pivot = 1.0 + v.iter().zip(&a_u).map(|(a, b)| a * b).sum::<f64>();
        if !(pivot >= PIVOT_TOLERANCE) {
            return Err(FawnError::Degenerate(format!("pivot {pivot:e} at rank-one term {k}")));
        }
        for o in 0..m {
            let scale = a_u[o] / pivot;
            if scale == 0.0 {
                continue;
            }
            for (p, x) in precision.row_mut(o).iter_mut().enumerate() {
                *x -= scale * v_a[p];
            }
        }
        logdet += pivot.ln();
    }
    Ok((precision, logdet))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k).powi(2);
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Inverse and log-determinant through a dense Cholesky factorisation.
pub(crate) fn dense_precision_logdet(c: &Matrix) -> Result<(Matrix, f64)> {
    let n = c.rows();
    let l = cholesky(c).ok_or_else(|| FawnError::Degenerate("covariance not positive definite".into()))?;
    let logdet = 2.0 * (0..n).map(|i| l.get(i, i).ln()).sum::<f64>();
    // Solve L Lᵀ X = I column by column.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l.get(k, i) * inv.get(k, col);
            }
            inv.set(i, col, s / l.get(i, i));
        }
    }
    Ok((inv, logdet))
}

/// Recursion first; dense Cholesky when a pivot degenerates.
pub fn precision_logdet(out: &CovariantOutput) -> Result<(Matrix, f64)> {
    match recursive_precision_logdet(&out.diag_v, &out.rank_one_terms) {
        Err(FawnError::Degenerate(_)) => dense_precision_logdet(&out.dense()),
        other => other,
    }
}

/// `−log N(z | mean, C + diag(obs_var))`.
pub fn mvn_nll(z: &[f64], out: &CovariantOutput, obs_var: &[f64]) -> Result<f64> {
    if z.len() != out.dim() {
        return Err(dim_err("mvn_nll target", out.dim(), z.len()));
    }
    if obs_var.iter().any(|v| !(*v >= 0.0)) {
        return Err(FawnError::InvalidInput("observation variance must be nonnegative".into()));
    }
    let noisy = out.with_extra_diagonal(obs_var)?;
    let (precision, logdet) = precision_logdet(&noisy)?;
    Ok(mvn_nll_from_parts(z, &out.mean, &precision, logdet).0)
}

/// NLL and `α = P·(z − mean)` given a precision and log-determinant.
pub(crate) fn mvn_nll_from_parts(z: &[f64], mean: &[f64], precision: &Matrix, logdet: f64) -> (f64, Vec<f64>) {
    let r: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let alpha: Vec<f64> = (0..r.len())
        .map(|o| precision.row(o).iter().zip(&r).map(|(p, x)| p * x).sum())
        .collect();
    let quad: f64 = r.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    (0.5 * (logdet + quad + r.len() as f64 * LN_2PI), alpha)
}
