//! Repeated random-split evaluation of a training configuration.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_90_10, Dataset, StandardizationStats};
use crate::error::Result;
use crate::layers::{NetworkSpec, OutputMode, WeightFamily};
use crate::losses::{check_objective, predictive_nll, Objective};
use crate::optim::{train, StopReason, TrainConfig};

pub const CSV_HEADER: &str = "dataset,objective,family,output_mode,splits,nll_mean,nll_std,seconds_mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub objective: Objective,
    pub family: WeightFamily,
    pub output_mode: OutputMode,
    pub hidden: Vec<usize>,
    pub splits: usize,
    /// Split `s` uses seed `seed + s` for both the split and the model.
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ropd,
            family: WeightFamily::Gaussian,
            output_mode: OutputMode::Diagonal,
            hidden: vec![50],
            splits: 10,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn network(&self, inputs: usize, outputs: usize) -> NetworkSpec {
        NetworkSpec::regression(inputs, &self.hidden, outputs)
            .with_family(self.family)
            .with_output_mode(self.output_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub seed: u64,
    pub nll: Option<f64>,
    pub error: Option<String>,
    pub seconds: f64,
    pub epochs: usize,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub dataset: String,
    pub objective: Objective,
    pub family: WeightFamily,
    pub output_mode: OutputMode,
    pub splits: Vec<SplitResult>,
    pub nll_mean: Option<f64>,
    /// Sample standard deviation over splits; `None` with fewer than two.
    pub nll_std: Option<f64>,
    pub seconds_mean: f64,
    /// False when any split failed.
    pub complete: bool,
}

impl BenchmarkResult {
    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.dataset,
            self.objective,
            serde_plain(&self.family),
            serde_plain(&self.output_mode),
            self.splits.len(),
            fmt(self.nll_mean),
            fmt(self.nll_std),
            self.seconds_mean
        )
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// The CSV table for a set of results, header included.
pub fn results_csv(results: &[BenchmarkResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Trains on one 90/10 split and returns the test NLL in original units.
pub fn run_split(ds: &Dataset, config: &BenchmarkConfig, seed: u64) -> SplitResult {
    let start = Instant::now();
    let outcome = (|| -> Result<(f64, usize, StopReason)> {
        let (train_set, test_set) = split_90_10(ds, seed)?;
        let stats = StandardizationStats::fit(&train_set);
        let train_std = stats.apply(&train_set)?;
        let spec = config.network(ds.num_features(), ds.num_targets());
        let tc = TrainConfig {
            rng_seed: seed,
            ..config.train.clone()
        };
        let trained = train(&train_std, &spec, &tc, config.objective)?;
        let x_test = stats.standardize_features(&test_set.features);
        let nll = predictive_nll(&trained.model, &x_test, &test_set.targets, &stats)?;
        Ok((nll, trained.log.len(), trained.stop))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((nll, epochs, stop)) => SplitResult {
            seed,
            nll: Some(nll),
            error: None,
            seconds,
            epochs,
            stop: Some(stop),
        },
        Err(e) => SplitResult {
            seed,
            nll: None,
            error: Some(e.to_string()),
            seconds,
            epochs: 0,
            stop: None,
        },
    }
}

/// Runs every split (in parallel) and aggregates in seed order.
pub fn run_benchmark(ds: &Dataset, config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    check_objective(config.objective, config.family, config.output_mode)?;
    let mut splits: Vec<SplitResult> = (0..config.splits as u64)
        .into_par_iter()
        .map(|s| run_split(ds, config, config.seed + s))
        .collect();
    splits.sort_by_key(|s| s.seed);
    Ok(aggregate(&ds.source_id, config, splits))
}

fn aggregate(dataset: &str, config: &BenchmarkConfig, splits: Vec<SplitResult>) -> BenchmarkResult {
    let nlls: Vec<f64> = splits.iter().filter_map(|s| s.nll).collect();
    let n = nlls.len() as f64;
    let nll_mean = (!nlls.is_empty()).then(|| nlls.iter().sum::<f64>() / n);
    let nll_std = nll_mean
        .filter(|_| nlls.len() > 1)
        .map(|m| (nlls.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    let seconds_mean = if splits.is_empty() {
        0.0
    } else {
        splits.iter().map(|s| s.seconds).sum::<f64>() / splits.len() as f64
    };
    BenchmarkResult {
        dataset: dataset.to_string(),
        objective: config.objective,
        family: config.family,
        output_mode: config.output_mode,
        complete: nlls.len() == splits.len(),
        splits,
        nll_mean,
        nll_std,
        seconds_mean,
    }
}
