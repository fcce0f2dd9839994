use fawn::autodiff::{gradcheck_model, relative_error, loss_and_grad, record_loss, PlantedFault};
use fawn::layers::{NetworkSpec, OutputMode, WeightFamily};
use fawn::losses::{self, Objective};
use fawn::model::ModelState;
use fawn::moments::NoiseSpec;
use fawn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn batch(rows: usize, inputs: usize, outputs: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(rows, inputs, |_, _| rng.random_range(-1.5..1.5));
    let z = Matrix::from_fn(rows, outputs, |_, _| rng.random_range(-1.0..1.0));
    (x, z)
}

/// Moves the model away from its symmetric initialisation so every
/// parameter family carries a non-trivial gradient.
fn perturbed(spec: NetworkSpec, seed: u64) -> ModelState {
    let mut model = ModelState::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in model.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

fn check(spec: NetworkSpec, objective: Objective, tol: f64, seed: u64) {
    let model = perturbed(spec.clone(), seed);
    let (x, z) = batch(4, spec.input_width(), spec.output_width(), seed);
    let report = gradcheck_model(&model, objective, &x, &z, 40, EPS, seed, None).unwrap();
    println!("{objective} {:?} {:?}: {report:?}", spec.weight_family, spec.output_mode);
    assert!(report.coordinates >= 200.min(model.num_parameters()));
    assert!(report.max_relative_error < tol, "{report:?}");
}

#[test]
fn vi_gaussian_4_10_1() {
    for seed in 0..3 {
        check(NetworkSpec::regression(4, &[10], 1), Objective::Vi, 1e-5, seed);
    }
}

#[test]
fn ropd_diagonal_3_5_2() {
    for seed in 0..3 {
        check(NetworkSpec::regression(3, &[5], 2), Objective::Ropd, 1e-5, seed);
    }
}

#[test]
fn ropd_two_hidden_layers() {
    check(NetworkSpec::regression(3, &[6, 4], 2), Objective::Ropd, 1e-5, 4);
}

#[test]
fn ropd_full_covariance_m3() {
    for seed in 0..3 {
        let spec = NetworkSpec::regression(4, &[8], 3).with_output_mode(OutputMode::FullCovariance);
        check(spec, Objective::Ropd, 1e-4, seed);
    }
}

// Bernoulli logits pick up gradients of order 1e-6 where the mean and
// variance paths nearly cancel; central differences cannot resolve those
// below ~1e-10 absolute, so the relative test applies above that floor.
#[test]
fn ropd_bernoulli() {
    for seed in 0..3 {
        let spec = NetworkSpec::regression(3, &[7], 2).with_family(WeightFamily::Bernoulli);
        let model = perturbed(spec, seed);
        let (x, z) = batch(4, 3, 2, seed);
        let report = gradcheck_model(&model, Objective::Ropd, &x, &z, 40, EPS, seed, None).unwrap();
        assert_eq!(report.coordinates, model.num_parameters());
        for &(i, a, n) in &report.probes {
            let ok = relative_error(a, n) < 1e-5 || (a - n).abs() < 1e-9;
            assert!(ok, "coordinate {i}: analytic {a}, numeric {n}");
        }
    }
}

#[test]
fn with_input_noise() {
    let spec = NetworkSpec::regression(3, &[6], 1).with_input_noise(NoiseSpec::dropout(0.8));
    check(spec.clone(), Objective::Ropd, 1e-5, 7);
    let spec = NetworkSpec::regression(3, &[6], 1).with_input_noise(NoiseSpec::additive(0.1, 0.2));
    check(spec, Objective::Vi, 1e-5, 8);
}

#[test]
fn tape_value_matches_plain_loss() {
    for (spec, objective) in [
        (NetworkSpec::regression(3, &[5], 2), Objective::Vi),
        (NetworkSpec::regression(3, &[5], 2), Objective::Ropd),
        (
            NetworkSpec::regression(3, &[5], 2).with_output_mode(OutputMode::FullCovariance),
            Objective::Ropd,
        ),
        (NetworkSpec::regression(3, &[5], 2).with_family(WeightFamily::Bernoulli), Objective::Ropd),
    ] {
        let model = perturbed(spec, 11);
        let (x, z) = batch(9, 3, 2, 11);
        let plain = losses::loss(&model, objective, &x, &z, 90).unwrap();
        let (taped, _) = loss_and_grad(&model, objective, &x, &z, 90).unwrap();
        assert!((plain - taped).abs() <= 1e-12 * plain.abs().max(1.0), "{plain} vs {taped}");
    }
}

#[test]
fn backward_is_deterministic_and_linear() {
    let model = perturbed(NetworkSpec::regression(3, &[5], 2), 2);
    let (x, z) = batch(8, 3, 2, 2);
    let recorded = record_loss(&model, Objective::Ropd, &x, &z, 50, None).unwrap();
    let a = recorded.backward().unwrap();
    let b = recorded.backward().unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
    for (g, t) in a.grads.iter().zip(model.tensors()) {
        assert_eq!(g.shape(), t.shape());
    }

    let mut tape = recorded.tape.clone();
    let scaled = tape.scale(recorded.loss, 3.5).unwrap();
    let c = tape.backward(scaled).unwrap();
    for (gc, ga) in c.grads.iter().zip(&a.grads) {
        assert!(gc.max_abs_diff(&ga.scale(3.5)) <= 1e-12 * ga.as_slice().iter().fold(1.0_f64, |m, v| m.max(v.abs())));
    }
}

#[test]
fn planted_fault_is_caught() {
    let model = perturbed(NetworkSpec::regression(3, &[5], 1), 3);
    let (x, z) = batch(6, 3, 1, 3);
    let report = gradcheck_model(&model, Objective::Ropd, &x, &z, 40, EPS, 0, Some(PlantedFault::RectifierBackwardSign)).unwrap();
    assert!(report.max_relative_error > 1e-2, "{report:?}");
}
