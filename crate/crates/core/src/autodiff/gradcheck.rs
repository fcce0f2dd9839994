//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{dim_err, FawnError, Result};
use crate::losses::{self, Objective};
use crate::model::ModelState;
use crate::tensor::Matrix;

use super::graph::record_loss;
use super::tape::PlantedFault;

/// Minimum number of coordinates probed (all of them if there are fewer).
pub const MIN_COORDINATES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Every probed coordinate as `(index, analytic, numeric)`.
    #[serde(skip)]
    pub probes: Vec<(usize, f64, f64)>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `theta`
/// on `coordinates` randomly chosen indices.
pub fn gradcheck<F>(f: F, theta: &[f64], analytic: &[f64], eps: f64, coordinates: usize, seed: u64) -> Result<GradcheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(FawnError::InvalidInput(format!("gradcheck eps {eps} outside [1e-7, 1e-3]")));
    }
    if theta.len() != analytic.len() {
        return Err(dim_err("gradcheck gradient", theta.len(), analytic.len()));
    }
    let count = coordinates.min(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, theta.len(), count).into_vec();
    indices.sort_unstable();

    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: count,
        probes: Vec::with_capacity(count),
    };
    let mut probe = theta.to_vec();
    for i in indices {
        probe[i] = theta[i] + eps;
        let up = f(&probe)?;
        probe[i] = theta[i] - eps;
        let down = f(&probe)?;
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.probes.push((i, analytic[i], numeric));
    }
    Ok(report)
}

/// All model tensors flattened in [`ModelState::tensors`] order.
pub fn flatten(model: &ModelState) -> Vec<f64> {
    model.tensors().iter().flat_map(|t| t.as_slice().iter().copied()).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(model: &mut ModelState, flat: &[f64]) -> Result<()> {
    if flat.len() != model.num_parameters() {
        return Err(dim_err("flat parameters", model.num_parameters(), flat.len()));
    }
    let mut offset = 0;
    for t in model.tensors_mut() {
        let n = t.len();
        t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Gradient check of a model objective.
///
/// The analytic side is the tape; the numeric side differences the plain
/// forward implementation in [`crate::losses`], so the two share no code
/// beyond the moment primitives.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_model(
    model: &ModelState,
    objective: Objective,
    x: &Matrix,
    z: &Matrix,
    n_total: usize,
    eps: f64,
    seed: u64,
    fault: Option<PlantedFault>,
) -> Result<GradcheckReport> {
    let recorded = record_loss(model, objective, x, z, n_total, fault)?;
    let analytic = recorded.backward()?.flat();
    let theta = flatten(model);
    let f = |flat: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        unflatten(&mut m, flat)?;
        losses::loss(&m, objective, x, z, n_total)
    };
    gradcheck(f, &theta, &analytic, eps, MIN_COORDINATES.max(theta.len() / 4), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let analytic: Vec<f64> = theta.iter().map(|t| t + 2.0).collect();
        let f = |x: &[f64]| -> Result<f64> { Ok(x.iter().map(|t| 0.5 * t * t + 2.0 * t).sum()) };
        let report = gradcheck(f, &theta, &analytic, 1e-3, 250, 3).unwrap();
        assert_eq!(report.coordinates, 250);
        assert!(report.max_relative_error < 1e-10, "{report:?}");
    }

    #[test]
    fn eps_range_enforced() {
        let f = |_: &[f64]| -> Result<f64> { Ok(0.0) };
        assert!(gradcheck(f, &[0.0], &[0.0], 1e-2, 1, 0).is_err());
    }

    #[test]
    fn wrong_gradient_detected() {
        let f = |x: &[f64]| -> Result<f64> { Ok(x[0] * x[0]) };
        let report = gradcheck(f, &[1.0], &[1.0], 1e-5, 1, 0).unwrap();
        assert!(report.max_relative_error > 0.4);
    }
}
