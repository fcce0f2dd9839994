//! Training objectives and the evaluation metric.
//!
//! Two data terms are available for a Gaussian likelihood `z = y + ε`,
//! `ε ~ N(0, σ̂²)`:
//!
//! * the expected log-likelihood under the weight posterior, which has the
//!   closed form `−V[y]/2σ̂² − (z − E[y])²/2σ̂² − log(√(2π)σ̂)`;
//! * the log of the approximate predictive density
//!   `N(z | E[y], V[y] + σ̂²)`.
//!
//! Both are paired with a KL divergence from the factorised Gaussian
//! posterior to a single shared Gaussian prior whose mean and scale are
//! learned too. On a minibatch of `B` out of `N` points the KL is weighted
//! by `B/N`, so one epoch applies it once.
//!
//! The functions here evaluate the objectives directly from forward moments.
//! Gradients come from the recorded version in [`crate::autodiff::graph`].

use serde::{Deserialize, Serialize};

use crate::covariance::{mvn_nll, rank_one_terms, CovariantOutput};
use crate::data::StandardizationStats;
use crate::error::{dim_err, FawnError, Result};
use crate::layers::{self, OutputMode, WeightFamily, WeightLayer};
use crate::model::ModelState;
use crate::moments::{linear_mean_batch, MomentVector};
use crate::tensor::Matrix;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Shared prior `N(μ̃, σ̃²)` over every Gaussian parameter, `σ̃ = exp(ρ̃)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub tilde_mu: Matrix,
    pub tilde_rho: Matrix,
}

impl PriorParams {
    pub fn new(mean: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(FawnError::InvalidInput(format!("prior sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            tilde_mu: Matrix::scalar(mean),
            tilde_rho: Matrix::scalar(sigma.ln()),
        })
    }

    pub fn mean(&self) -> f64 {
        self.tilde_mu.item()
    }

    pub fn sigma(&self) -> f64 {
        self.tilde_rho.item().exp()
    }
}

/// Per-output observation noise `σ̂_o = exp(ρ̂_o)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParams {
    pub hat_rho: Matrix,
}

impl LikelihoodParams {
    pub fn new(sigmas: &[f64]) -> Result<Self> {
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(FawnError::InvalidInput("observation sigma must be positive".into()));
        }
        Ok(Self {
            hat_rho: Matrix::row_vector(&sigmas.iter().map(|s| s.ln()).collect::<Vec<_>>()),
        })
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.hat_rho.as_slice().iter().map(|r| r.exp()).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.hat_rho.as_slice().iter().map(|r| (2.0 * r).exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Expected log-likelihood plus KL.
    Vi,
    /// Log predictive density plus KL.
    Ropd,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Vi => "vi",
            Objective::Ropd => "ropd",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = FawnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(Objective::Vi),
            "ropd" => Ok(Objective::Ropd),
            other => Err(FawnError::InvalidInput(format!("unknown objective `{other}` (vi|ropd)"))),
        }
    }
}

/// Checks the objective against the model configuration.
pub fn check_objective(objective: Objective, family: WeightFamily, mode: OutputMode) -> Result<()> {
    if objective == Objective::Vi && family != WeightFamily::Gaussian {
        return Err(FawnError::Unsupported(
            "objective `vi` requires Gaussian weights (the KL term needs a Gaussian posterior)".into(),
        ));
    }
    if objective == Objective::Vi && mode == OutputMode::FullCovariance {
        return Err(FawnError::Unsupported("objective `vi` is defined for diagonal outputs only".into()));
    }
    if mode == OutputMode::FullCovariance && family != WeightFamily::Gaussian {
        return Err(FawnError::Unsupported("full-covariance outputs require Gaussian weights".into()));
    }
    Ok(())
}

/// `E_y[log N(z | y, σ̂²)]` for `y` with the given mean and variance.
pub fn expected_gaussian_loglik(z: f64, mean: f64, var: f64, sigma_hat: f64) -> Result<f64> {
    if !(sigma_hat > 0.0) {
        return Err(FawnError::InvalidInput(format!("sigma_hat must be positive, got {sigma_hat}")));
    }
    if !(var >= 0.0) {
        return Err(FawnError::InvalidInput(format!("variance must be nonnegative, got {var}")));
    }
    let s2 = sigma_hat * sigma_hat;
    Ok(-var / (2.0 * s2) - (z - mean).powi(2) / (2.0 * s2) - sigma_hat.ln() - HALF_LN_2PI)
}

/// Sum of [`expected_gaussian_loglik`] over output dimensions.
pub fn expected_gaussian_loglik_vec(z: &[f64], y: &MomentVector, sigma_hat: &[f64]) -> Result<f64> {
    if z.len() != y.len() || sigma_hat.len() != y.len() {
        return Err(dim_err("expected_gaussian_loglik", y.len(), format!("{}/{}", z.len(), sigma_hat.len())));
    }
    let mut total = 0.0;
    for o in 0..z.len() {
        total += expected_gaussian_loglik(z[o], y.mean()[o], y.variance()[o], sigma_hat[o])?;
    }
    Ok(total)
}

/// `−log N(z | mean, var)`.
pub fn gaussian_nll(z: f64, mean: f64, var: f64) -> f64 {
    0.5 * var.ln() + HALF_LN_2PI + (z - mean).powi(2) / (2.0 * var)
}

/// `KL(N(mu, sigma²) ‖ N(prior_mu, prior_sigma²))`.
pub fn kl_gaussian(mu: f64, sigma: f64, prior_mu: f64, prior_sigma: f64) -> f64 {
    let ps2 = prior_sigma * prior_sigma;
    (prior_sigma / sigma).ln() + (sigma * sigma + (mu - prior_mu).powi(2)) / (2.0 * ps2) - 0.5
}

/// KL from the posterior over every Gaussian weight and bias to the shared
/// prior.
pub fn kl_to_shared_prior(layers: &[WeightLayer], prior: &PriorParams) -> f64 {
    let (pm, ps) = (prior.mean(), prior.sigma());
    let pair_sum = |mu: &Matrix, rho: &Matrix| -> f64 {
        mu.as_slice()
            .iter()
            .zip(rho.as_slice())
            .map(|(&m, &r)| kl_gaussian(m, r.exp(), pm, ps))
            .sum()
    };
    layers
        .iter()
        .map(|layer| match layer {
            WeightLayer::Gaussian(l) => pair_sum(&l.mu, &l.rho) + pair_sum(&l.bias_mu, &l.bias_rho),
            WeightLayer::Bernoulli(l) => pair_sum(&l.bias_mu, &l.bias_rho),
        })
        .sum()
}

/// The KL term as it enters an objective: zero for Bernoulli networks.
pub(crate) fn objective_kl(model: &ModelState) -> f64 {
    match model.spec.weight_family {
        WeightFamily::Gaussian => kl_to_shared_prior(&model.layers, &model.prior),
        WeightFamily::Bernoulli => 0.0,
    }
}

fn check_batch(model: &ModelState, x: &Matrix, z: &Matrix, n_total: usize) -> Result<()> {
    if x.rows() != z.rows() {
        return Err(dim_err("batch rows", x.rows(), z.rows()));
    }
    if z.cols() != model.spec.output_width() {
        return Err(dim_err("target width", model.spec.output_width(), z.cols()));
    }
    if n_total < x.rows() || x.rows() == 0 {
        return Err(FawnError::InvalidInput(format!(
            "batch of {} rows from a training set of {n_total}",
            x.rows()
        )));
    }
    Ok(())
}

/// FAWN-VI loss on a minibatch: `−Σ E[log p(z|y)] + (B/N)·KL`.
pub fn loss_fawn_vi(model: &ModelState, x: &Matrix, z: &Matrix, n_total: usize) -> Result<f64> {
    check_objective(Objective::Vi, model.spec.weight_family, model.spec.output_mode)?;
    check_batch(model, x, z, n_total)?;
    let out = layers::forward_batch(&model.spec, &model.layers, x)?;
    let sigma = model.likelihood.sigma();
    let mut data = 0.0;
    for b in 0..x.rows() {
        data -= expected_gaussian_loglik_vec(z.row(b), &out.row(b), &sigma)?;
    }
    Ok(data + x.rows() as f64 / n_total as f64 * objective_kl(model))
}

/// Per-row `−log p(z)` under the model's predictive distribution on the
/// standardised scale.
pub(crate) fn predictive_terms(model: &ModelState, x: &Matrix, z: &Matrix) -> Result<Vec<f64>> {
    let obs = model.likelihood.variance();
    match model.spec.output_mode {
        OutputMode::Diagonal => {
            let out = layers::forward_batch(&model.spec, &model.layers, x)?;
            Ok((0..x.rows())
                .map(|b| {
                    (0..z.cols())
                        .map(|o| gaussian_nll(z.get(b, o), out.mean.get(b, o), out.var.get(b, o) + obs[o]))
                        .sum()
                })
                .collect())
        }
        OutputMode::FullCovariance => {
            let pen = layers::penultimate_batch(&model.spec, &model.layers, x)?;
            let mean = linear_mean_batch(&pen.input.mean, &pen.last.w_mean, &pen.last.b_mean);
            let diag = layers::output_diag_v(&pen);
            (0..x.rows())
                .map(|b| {
                    let out = CovariantOutput {
                        mean: mean.row(b).to_vec(),
                        diag_v: diag.row(b).to_vec(),
                        rank_one_terms: rank_one_terms(pen.input.var.row(b), &pen.last.w_mean),
                    };
                    mvn_nll(z.row(b), &out, &obs)
                })
                .collect()
        }
    }
}

/// FAWN-ROPD loss on a minibatch: `−Σ log N(z | E[y], V[y] + σ̂²) + (B/N)·KL`
/// (multivariate with full covariance when the model is configured so).
pub fn loss_fawn_ropd(model: &ModelState, x: &Matrix, z: &Matrix, n_total: usize) -> Result<f64> {
    check_batch(model, x, z, n_total)?;
    let data: f64 = predictive_terms(model, x, z)?.iter().sum();
    Ok(data + x.rows() as f64 / n_total as f64 * objective_kl(model))
}

pub fn loss(model: &ModelState, objective: Objective, x: &Matrix, z: &Matrix, n_total: usize) -> Result<f64> {
    match objective {
        Objective::Vi => loss_fawn_vi(model, x, z, n_total),
        Objective::Ropd => loss_fawn_ropd(model, x, z, n_total),
    }
}

/// Mean test NLL in original target units.
///
/// `x` holds standardised features, `z_orig` raw targets; the targets are
/// standardised with `stats` and the log-Jacobian `Σ_o log std_o` is added
/// back.
pub fn predictive_nll(model: &ModelState, x: &Matrix, z_orig: &Matrix, stats: &StandardizationStats) -> Result<f64> {
    if x.rows() == 0 {
        return Err(FawnError::InvalidInput("empty test set".into()));
    }
    if z_orig.cols() != stats.target_std.len() {
        return Err(dim_err("target stats", stats.target_std.len(), z_orig.cols()));
    }
    let z = stats.standardize_targets(z_orig);
    let terms = predictive_terms(model, x, &z)?;
    let log_jacobian: f64 = stats.target_std.iter().map(|s| s.ln()).sum();
    Ok(terms.iter().sum::<f64>() / terms.len() as f64 + log_jacobian)
}
