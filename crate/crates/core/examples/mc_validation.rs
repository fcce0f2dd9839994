//! Random networks checked against the Monte Carlo oracle.
//!
//! cargo run --release --example mc_validation -- [configs] [samples] [--bernoulli] [--identity-hidden]
//!
//! `--identity-hidden` swaps the rectifiers for identities, which makes the
//! analytic moments exact for either family.

use fawn::layers::{Transfer, WeightFamily};
use fawn::mc::{random_config, validate, DEFAULT_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fawn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let numbers: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let configs = numbers.first().copied().unwrap_or(20);
    let samples = numbers.get(1).copied().unwrap_or(100_000);
    let bernoulli_only = args.iter().any(|a| a == "--bernoulli");
    let identity_hidden = args.iter().any(|a| a == "--identity-hidden");

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut passed = 0;
    for k in 0..configs {
        let family = if k % 2 == 0 && !bernoulli_only { WeightFamily::Gaussian } else { WeightFamily::Bernoulli };
        let inputs = rng.random_range(20..=30);
        let hidden = rng.random_range(20..=30);
        let outputs = rng.random_range(1..=3);
        let mut cfg = random_config(inputs, &[hidden], outputs, family, &mut rng);
        if identity_hidden {
            cfg.spec.transfers.iter_mut().for_each(|t| *t = Transfer::Identity);
        }
        let report = &validate(&cfg.spec, &cfg.layers, &[cfg.input.clone()], samples, DEFAULT_THRESHOLD, k as u64)?[0];
        passed += usize::from(report.pass);
        println!(
            "{k:3} {family:?} {inputs}-{hidden}-{outputs}  max|z| {:.2} {}",
            report.max_abs_z(),
            if report.pass { "pass" } else { "FAIL" }
        );
    }
    println!("{passed}/{configs} within {DEFAULT_THRESHOLD} standard errors");
    Ok(())
}
