#![allow(clippy::needless_range_loop)]

mod common;

use fawn::layers::{deterministic_forward, forward_batch, NetworkSpec, WeightLayer};
use fawn::losses::{
    expected_gaussian_loglik, gaussian_nll, kl_gaussian, kl_to_shared_prior, loss_fawn_ropd, loss_fawn_vi,
};
use fawn::model::ModelState;
use fawn::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::kl_by_quadrature;

fn small_batch(seed: u64, inputs: usize, outputs: usize, rows: usize) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(rows, inputs, |_, _| rng.random_range(-1.5..1.5));
    let z = Matrix::from_fn(rows, outputs, |_, _| rng.random_range(-1.0..1.0));
    (x, z)
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let (m1, m2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (s1, s2) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
        let closed = kl_gaussian(m1, s1, m2, s2);
        let numeric = kl_by_quadrature(m1, s1, m2, s2);
        assert!((closed - numeric).abs() < 1e-8, "{closed} vs {numeric}");
    }
}

#[test]
fn kl_frozen_value() {
    // KL(N(1, 1) ‖ N(0, 1)) = ½.
    assert!((kl_gaussian(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
    // KL(N(0, 1) ‖ N(0, 2²)) = ln 2 + 1/8 − 1/2.
    assert!((kl_gaussian(0.0, 1.0, 0.0, 2.0) - (2f64.ln() - 0.375)).abs() < 1e-15);
}

#[test]
fn shared_prior_kl_is_sum_over_weights() {
    let model = ModelState::init(NetworkSpec::regression(3, &[4], 2), 1).unwrap();
    let (pm, ps) = (model.prior.mean(), model.prior.sigma());
    let mut direct = 0.0;
    for layer in &model.layers {
        let WeightLayer::Gaussian(g) = layer else { unreachable!() };
        for (mu, rho) in [(&g.mu, &g.rho), (&g.bias_mu, &g.bias_rho)] {
            for (m, r) in mu.as_slice().iter().zip(rho.as_slice()) {
                direct += kl_by_quadrature(*m, r.exp(), pm, ps);
            }
        }
    }
    let ours = kl_to_shared_prior(&model.layers, &model.prior);
    assert!((ours - direct).abs() < 1e-8 * direct.max(1.0), "{ours} vs {direct}");
}

#[test]
fn expected_loglik_matches_sampling() {
    let (z, mean, var, sigma) = (0.4, -0.2, 0.8, 0.6);
    let closed = expected_gaussian_loglik(z, mean, var, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dist = Normal::new(mean, var.sqrt()).unwrap();
    let n = 400_000;
    let samples: Vec<f64> = (0..n).map(|_| -gaussian_nll(z, dist.sample(&mut rng), sigma * sigma)).collect();
    let avg = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|s| (s - avg).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((avg - closed).abs() < 5.0 * sd / (n as f64).sqrt(), "{avg} vs {closed}");
}

/// Posterior variances pushed to ~e⁻⁸⁰ so the model is effectively a plain
/// network at the weight means.
fn collapsed(model: &ModelState) -> ModelState {
    let mut m = model.clone();
    for layer in &mut m.layers {
        let WeightLayer::Gaussian(g) = layer else { unreachable!() };
        g.rho = g.rho.map(|_| -40.0);
        g.bias_rho = g.bias_rho.map(|_| -40.0);
    }
    m
}

#[test]
fn data_terms_reduce_to_plain_network_nll() {
    let spec = NetworkSpec::regression(3, &[6], 2);
    let model = collapsed(&ModelState::init(spec.clone(), 5).unwrap());
    let (x, z) = small_batch(6, 3, 2, 7);
    let n_total = 7;
    let weights: Vec<(Matrix, Matrix)> = model
        .layers
        .iter()
        .map(|l| match l {
            WeightLayer::Gaussian(g) => (g.mu.clone(), g.bias_mu.clone()),
            WeightLayer::Bernoulli(_) => unreachable!(),
        })
        .collect();
    let y = deterministic_forward(&spec, &weights, &x);
    let obs = model.likelihood.variance();
    let mut plain = 0.0;
    for b in 0..x.rows() {
        for o in 0..2 {
            let r = z.get(b, o) - y.get(b, o);
            plain += 0.5 * (2.0 * std::f64::consts::PI * obs[o]).ln() + r * r / (2.0 * obs[o]);
        }
    }
    let kl = kl_to_shared_prior(&model.layers, &model.prior);
    for loss in [loss_fawn_vi(&model, &x, &z, n_total).unwrap(), loss_fawn_ropd(&model, &x, &z, n_total).unwrap()] {
        assert!((loss - kl - plain).abs() < 1e-8, "{} vs {plain}", loss - kl);
    }
}

#[test]
fn ropd_and_vi_differ_by_closed_form_gap() {
    let spec = NetworkSpec::regression(4, &[5], 2);
    let model = ModelState::init(spec.clone(), 9).unwrap();
    let (x, z) = small_batch(10, 4, 2, 6);
    let out = forward_batch(&spec, &model.layers, &x).unwrap();
    let s2 = model.likelihood.variance();
    let mut gap = 0.0;
    for b in 0..x.rows() {
        for o in 0..2 {
            let (v, r2) = (out.var.get(b, o), (z.get(b, o) - out.mean.get(b, o)).powi(2));
            // VI term minus ROPD term, each written out directly.
            let vi = v / (2.0 * s2[o]) + r2 / (2.0 * s2[o]) + 0.5 * (2.0 * std::f64::consts::PI * s2[o]).ln();
            let ropd = 0.5 * (2.0 * std::f64::consts::PI * (v + s2[o])).ln() + r2 / (2.0 * (v + s2[o]));
            gap += vi - ropd;
        }
    }
    let vi = loss_fawn_vi(&model, &x, &z, 6).unwrap();
    let ropd = loss_fawn_ropd(&model, &x, &z, 6).unwrap();
    assert!(gap > 0.0);
    assert!((vi - ropd - gap).abs() < 1e-10, "{} vs {gap}", vi - ropd);
}

proptest! {
    #[test]
    fn kl_nonnegative(m1 in -5.0f64..5.0, s1 in 1e-3f64..5.0, m2 in -5.0f64..5.0, s2 in 1e-3f64..5.0) {
        prop_assert!(kl_gaussian(m1, s1, m2, s2) >= 0.0);
    }

    #[test]
    fn kl_zero_only_at_equality(m in -5.0f64..5.0, s in 1e-2f64..5.0, dm in 1e-3f64..1.0, ds in 1.001f64..2.0) {
        prop_assert!(kl_gaussian(m, s, m, s).abs() < 1e-12);
        prop_assert!(kl_gaussian(m + dm, s, m, s) > 0.0);
        prop_assert!(kl_gaussian(m, s * ds, m, s) > 0.0);
    }

    #[test]
    fn expected_loglik_below_plugin(z in -3.0f64..3.0, mean in -3.0f64..3.0, var in 0.0f64..4.0, sigma in 0.05f64..3.0) {
        // Jensen: averaging over y can only lower the log-likelihood.
        let expected = expected_gaussian_loglik(z, mean, var, sigma).unwrap();
        prop_assert!(expected <= -gaussian_nll(z, mean, sigma * sigma) + 1e-12);
    }

    #[test]
    fn losses_finite(seed in 0u64..1000, sigma in 0.01f64..10.0) {
        let mut model = ModelState::init(NetworkSpec::regression(3, &[4], 1), seed).unwrap();
        model.likelihood.hat_rho = Matrix::scalar(sigma.ln());
        let (x, z) = small_batch(seed, 3, 1, 5);
        prop_assert!(loss_fawn_vi(&model, &x, &z, 50).unwrap().is_finite());
        prop_assert!(loss_fawn_ropd(&model, &x, &z, 50).unwrap().is_finite());
    }
}
