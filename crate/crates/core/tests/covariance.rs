mod common;

use fawn::covariance::{mvn_nll, recursive_precision_logdet, CovariantOutput};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{dense_precision_logdet, random_low_rank, relative_diff};

/// Largest entrywise relative gap between the two precisions, scaled by the
/// largest entry so near-zero off-diagonals do not dominate.
fn precision_gap(ours: &fawn::Matrix, oracle: &nalgebra::DMatrix<f64>) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut worst = 0.0f64;
    for i in 0..oracle.nrows() {
        for j in 0..oracle.ncols() {
            worst = worst.max((ours.get(i, j) - oracle[(i, j)]).abs() / scale);
        }
    }
    worst
}

#[test]
fn recursion_matches_cholesky_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, n) in [(1, 1), (2, 5), (3, 40), (8, 8), (16, 3)] {
        let (diag, terms) = random_low_rank(&mut rng, m, n);
        let (p, logdet) = recursive_precision_logdet(&diag, &terms).unwrap();
        let (p_ref, logdet_ref) = dense_precision_logdet(&diag, &terms);
        assert!(relative_diff(logdet, logdet_ref) < 1e-10 || (logdet - logdet_ref).abs() < 1e-12);
        assert!(precision_gap(&p, &p_ref) < 1e-10, "m={m} n={n}");
    }
}

#[test]
fn mvn_nll_matches_dense_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (diag, terms) = random_low_rank(&mut rng, 4, 10);
    let out = CovariantOutput {
        mean: vec![0.1, -0.4, 1.0, 0.0],
        diag_v: diag.clone(),
        rank_one_terms: terms.clone(),
    };
    let z = [0.3, 0.2, 0.5, -1.0];
    let obs = [0.2, 0.1, 0.3, 0.05];
    let with_obs: Vec<f64> = diag.iter().zip(&obs).map(|(d, o)| d + o).collect();
    let (p, logdet) = dense_precision_logdet(&with_obs, &terms);
    let r = DVector::from_iterator(4, z.iter().zip(&out.mean).map(|(a, b)| a - b));
    let expected = 0.5 * (logdet + (r.transpose() * &p * &r)[(0, 0)] + 4.0 * (2.0 * std::f64::consts::PI).ln());
    let got = mvn_nll(&z, &out, &obs).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

proptest! {
    #[test]
    fn recursion_matches_cholesky(seed in any::<u64>(), m in 1usize..=16, n in 0usize..=60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (diag, terms) = random_low_rank(&mut rng, m, n);
        let (p, logdet) = recursive_precision_logdet(&diag, &terms).unwrap();
        let (p_ref, logdet_ref) = dense_precision_logdet(&diag, &terms);
        prop_assert!((logdet - logdet_ref).abs() <= 1e-9 * logdet_ref.abs().max(1.0));
        prop_assert!(precision_gap(&p, &p_ref) < 1e-9);
    }

    #[test]
    fn precision_is_symmetric(seed in any::<u64>(), m in 2usize..=8, n in 1usize..=20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (diag, terms) = random_low_rank(&mut rng, m, n);
        let (p, _) = recursive_precision_logdet(&diag, &terms).unwrap();
        for i in 0..m {
            for j in 0..m {
                prop_assert!((p.get(i, j) - p.get(j, i)).abs() <= 1e-12 * p.get(i, i).abs().max(1.0));
            }
        }
    }
}
