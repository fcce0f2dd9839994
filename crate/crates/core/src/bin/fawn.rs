use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fawn::bench::{results_csv, run_benchmark, BenchmarkResult};
use fawn::config::{Overrides, RunConfig};
use fawn::data::{resolve_dataset, split_90_10, StandardizationStats};
use fawn::layers::{OutputMode, WeightFamily};
use fawn::losses::{predictive_nll, Objective};
use fawn::model::Checkpoint;
use fawn::optim::{train, write_log};
use fawn::validate::{run_battery, ValidationOptions};
use fawn::autodiff::PlantedFault;
use fawn::FawnError;

#[derive(Parser)]
#[command(name = "fawn", version, about = "Moment-propagating Bayesian regression networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the 90% split chosen by --seed and write a checkpoint.
    Train(RunArgs),
    /// Test NLL of a checkpoint in original target units.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on all rows instead of the held-out split of --seed.
        #[arg(long)]
        all_rows: bool,
    },
    /// Repeated random splits; writes results.csv and results.json.
    Benchmark(RunArgs),
    /// Gradient checks and Monte Carlo moment checks.
    Validate {
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        plant_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Bernoulli,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Diagonal,
    Full,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Manifest names or CSV paths, comma separated.
    #[arg(long, value_delimiter = ',')]
    dataset: Option<Vec<String>>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long, value_enum)]
    covariance: Option<CovarianceArg>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps training at 50 epochs.
    #[arg(long)]
    quick: bool,
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<FawnError> for Failure {
    fn from(e: FawnError) -> Self {
        match e {
            FawnError::InvalidInput(_) | FawnError::Unsupported(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let objective = self
            .objective
            .as_deref()
            .map(str::parse::<Objective>)
            .transpose()?;
        let cfg = base.apply(Overrides {
            datasets: self.dataset.clone(),
            objective,
            family: self.family.map(|f| match f {
                FamilyArg::Gaussian => WeightFamily::Gaussian,
                FamilyArg::Bernoulli => WeightFamily::Bernoulli,
            }),
            covariance: self.covariance.map(|c| match c {
                CovarianceArg::Diagonal => OutputMode::Diagonal,
                CovarianceArg::Full => OutputMode::FullCovariance,
            }),
            hidden: self.hidden.clone(),
            splits: self.splits,
            seed: self.seed,
            out: self.out.clone(),
            max_epochs: self.quick.then_some(50),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("fawn-out"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Check(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn single_dataset(cfg: &RunConfig) -> Result<&str, Failure> {
    match cfg.datasets.as_slice() {
        [one] => Ok(one),
        _ => Err(Failure::Usage("this command takes exactly one --dataset".into())),
    }
}

fn cmd_train(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.resolve()?;
    let ds = resolve_dataset(single_dataset(&cfg)?)?;
    let (train_set, test_set) = split_90_10(&ds, cfg.seed)?;
    let stats = StandardizationStats::fit(&train_set);
    let bench = cfg.benchmark();
    let spec = bench.network(ds.num_features(), ds.num_targets());
    let tc = fawn::optim::TrainConfig {
        rng_seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train(&stats.apply(&train_set)?, &spec, &tc, cfg.objective)?;
    let nll = predictive_nll(
        &outcome.model,
        &stats.standardize_features(&test_set.features),
        &test_set.targets,
        &stats,
    )?;

    let dir = out_dir(&cfg)?;
    let mut ck = Checkpoint::new(outcome.model);
    ck.standardization = Some(stats);
    ck.optimizer = Some(outcome.optimizer);
    ck.save(&dir.join("checkpoint.json"))?;
    let log = fs::File::create(dir.join("train_log.ndjson")).map_err(FawnError::from)?;
    write_log(&outcome.log, std::io::BufWriter::new(log))?;
    println!(
        "{}: {} epochs ({:?}), test NLL {nll:.4}; wrote {}",
        ds.source_id,
        outcome.log.len(),
        outcome.stop,
        dir.join("checkpoint.json").display()
    );
    Ok(())
}

fn cmd_eval(args: &RunArgs, checkpoint: &Path, all_rows: bool) -> Result<(), Failure> {
    let cfg = args.resolve()?;
    let ds = resolve_dataset(single_dataset(&cfg)?)?;
    let ck = Checkpoint::load(checkpoint)?;
    let stats = ck
        .standardization
        .clone()
        .unwrap_or_else(|| StandardizationStats::identity(ds.num_features(), ds.num_targets()));
    let rows = if all_rows { ds } else { split_90_10(&ds, cfg.seed)?.1 };
    let nll = predictive_nll(&ck.model, &stats.standardize_features(&rows.features), &rows.targets, &stats)?;
    println!("{}: {} rows, NLL {nll:.6}", rows.source_id, rows.len());
    Ok(())
}

fn cmd_benchmark(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.resolve()?;
    let bench = cfg.benchmark();
    let mut results: Vec<BenchmarkResult> = Vec::new();
    let mut incomplete = Vec::new();
    for name in &cfg.datasets {
        match resolve_dataset(name) {
            Ok(ds) => {
                let r = run_benchmark(&ds, &bench)?;
                for s in r.splits.iter().filter(|s| s.error.is_some()) {
                    eprintln!("{name} split {}: {}", s.seed, s.error.as_deref().unwrap_or(""));
                }
                if !r.complete {
                    incomplete.push(name.clone());
                }
                results.push(r);
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                incomplete.push(name.clone());
            }
        }
    }
    let dir = out_dir(&cfg)?;
    let csv = results_csv(&results);
    fs::write(dir.join("results.csv"), &csv).map_err(FawnError::from)?;
    let json = serde_json::to_string_pretty(&results).map_err(FawnError::from)?;
    fs::write(dir.join("results.json"), json + "\n").map_err(FawnError::from)?;
    print!("{csv}");
    if incomplete.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("incomplete datasets: {}", incomplete.join(", "))))
    }
}

fn cmd_validate(quick: bool, seed: Option<u64>, out: Option<&Path>, plant_fault: bool) -> Result<(), Failure> {
    let mut opts = if quick { ValidationOptions::quick() } else { ValidationOptions::full() };
    opts.seed = seed.unwrap_or(0);
    opts.fault = plant_fault.then_some(PlantedFault::RectifierBackwardSign);
    let report = run_battery(&opts)?;
    for c in &report.checks {
        let status = match (c.passed, c.report_only) {
            (true, _) => "pass",
            (false, true) => "note",
            (false, false) => "FAIL",
        };
        println!("[{status}] {}: {}", c.name, c.detail);
    }
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report).map_err(FawnError::from)?;
        fs::write(path, json + "\n").map_err(FawnError::from)?;
    }
    match report.failures().map(|c| c.name.as_str()).collect::<Vec<_>>() {
        failed if failed.is_empty() => Ok(()),
        failed => Err(Failure::Check(format!("failed: {}", failed.join(", ")))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { run, checkpoint, all_rows } => cmd_eval(run, checkpoint, *all_rows),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Validate {
            quick,
            seed,
            out,
            plant_fault,
        } => cmd_validate(*quick, *seed, out.as_deref(), *plant_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
