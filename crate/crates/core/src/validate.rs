//! Fixed battery of gradient checks and Monte Carlo moment checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck_model, relative_error, PlantedFault};
use crate::error::Result;
use crate::layers::{NetworkSpec, OutputMode, WeightFamily};
use crate::losses::Objective;
use crate::mc::{self, random_config, SampleReport};
use crate::model::ModelState;
use crate::moments::NoiseSpec;
use crate::tensor::Matrix;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const DIAGONAL_TOLERANCE: f64 = 1e-5;
pub const FULL_COVARIANCE_TOLERANCE: f64 = 1e-4;
/// Below this absolute discrepancy a coordinate is within finite-difference
/// roundoff and is not held to the relative tolerance.
pub const ROUNDOFF_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub samples: usize,
    pub threshold: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<PlantedFault>,
}

impl ValidationOptions {
    pub fn full() -> Self {
        Self {
            samples: 1_000_000,
            threshold: mc::DEFAULT_THRESHOLD,
            seed: 0,
            fault: None,
        }
    }

    pub fn quick() -> Self {
        Self {
            samples: 100_000,
            ..Self::full()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: &'static str,
    pub passed: bool,
    /// Report-only checks never fail the battery.
    pub report_only: bool,
    pub metric: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub samples: usize,
    pub passed: bool,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed && !c.report_only)
    }
}

fn perturbed_model(spec: NetworkSpec, seed: u64) -> Result<ModelState> {
    let mut model = ModelState::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for t in model.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok(model)
}

fn gradient_check(name: &str, spec: NetworkSpec, objective: Objective, tol: f64, opts: &ValidationOptions) -> Result<CheckResult> {
    let model = perturbed_model(spec.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 17);
    let x = Matrix::from_fn(4, spec.input_width(), |_, _| rng.random_range(-1.5..1.5));
    let z = Matrix::from_fn(4, spec.output_width(), |_, _| rng.random_range(-1.0..1.0));
    let report = gradcheck_model(&model, objective, &x, &z, 40, GRADCHECK_EPS, opts.seed, opts.fault)?;
    let violations = report
        .probes
        .iter()
        .filter(|&&(_, a, n)| relative_error(a, n) >= tol && (a - n).abs() >= ROUNDOFF_FLOOR)
        .count();
    Ok(CheckResult {
        name: name.to_string(),
        kind: "gradcheck",
        passed: violations == 0,
        report_only: false,
        metric: report.max_relative_error,
        detail: format!(
            "{} coordinates, max relative error {:.3e} (tolerance {tol:.0e}), {violations} above tolerance",
            report.coordinates, report.max_relative_error
        ),
    })
}

/// Name, input width, hidden widths, output width, family, report-only.
type McCase<'a> = (&'a str, usize, &'a [usize], usize, WeightFamily, bool);

fn mc_check(name: &str, report: &SampleReport, report_only: bool) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        kind: "monte_carlo",
        passed: report.pass,
        report_only,
        metric: report.max_abs_z(),
        detail: format!(
            "{} samples, max |z| {:.2} (threshold {})",
            report.n_samples,
            report.max_abs_z(),
            report.threshold
        ),
    }
}

/// Runs the whole battery.
pub fn run_battery(opts: &ValidationOptions) -> Result<ValidationReport> {
    let mut checks = vec![
        gradient_check("gradcheck vi 4-10-1", NetworkSpec::regression(4, &[10], 1), Objective::Vi, DIAGONAL_TOLERANCE, opts)?,
        gradient_check("gradcheck ropd 3-5-2", NetworkSpec::regression(3, &[5], 2), Objective::Ropd, DIAGONAL_TOLERANCE, opts)?,
        gradient_check(
            "gradcheck ropd 3-6-4-2",
            NetworkSpec::regression(3, &[6, 4], 2),
            Objective::Ropd,
            DIAGONAL_TOLERANCE,
            opts,
        )?,
        gradient_check(
            "gradcheck ropd full covariance m=3",
            NetworkSpec::regression(4, &[8], 3).with_output_mode(OutputMode::FullCovariance),
            Objective::Ropd,
            FULL_COVARIANCE_TOLERANCE,
            opts,
        )?,
        gradient_check(
            "gradcheck ropd bernoulli 3-7-2",
            NetworkSpec::regression(3, &[7], 2).with_family(WeightFamily::Bernoulli),
            Objective::Ropd,
            DIAGONAL_TOLERANCE,
            opts,
        )?,
        gradient_check(
            "gradcheck ropd dropout input",
            NetworkSpec::regression(3, &[6], 1).with_input_noise(NoiseSpec::dropout(0.8)),
            Objective::Ropd,
            DIAGONAL_TOLERANCE,
            opts,
        )?,
    ];

    let (s, t) = (opts.samples, opts.threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 99);
    let battery: [McCase; 5] = [
        ("mc gaussian linear 3-1", 3, &[], 1, WeightFamily::Gaussian, false),
        ("mc gaussian wide 50-20-2", 50, &[20], 2, WeightFamily::Gaussian, false),
        ("mc gaussian 8-25-3", 8, &[25], 3, WeightFamily::Gaussian, false),
        ("mc bernoulli linear 6-2", 6, &[], 2, WeightFamily::Bernoulli, false),
        ("mc bernoulli sparse 1-20-1 (CLT caveat)", 1, &[20], 1, WeightFamily::Bernoulli, true),
    ];
    for (k, (name, inputs, hidden, outputs, family, report_only)) in battery.into_iter().enumerate() {
        let cfg = random_config(inputs, hidden, outputs, family, &mut rng);
        let report = mc::validate(&cfg.spec, &cfg.layers, std::slice::from_ref(&cfg.input), s, t, opts.seed + k as u64)?;
        checks.push(mc_check(name, &report[0], report_only));
    }
    let cfg = random_config(6, &[20], 3, WeightFamily::Gaussian, &mut rng);
    let cov = mc::validate_covariance(&cfg.spec, &cfg.layers, &cfg.input, s, t, opts.seed + 50)?;
    checks.push(mc_check("mc output covariance 6-20-3", &cov, false));

    let passed = checks.iter().all(|c| c.passed || c.report_only);
    Ok(ValidationReport {
        checks,
        samples: s,
        passed,
    })
}
