//! Repeated 90/10 splits on a manifest dataset.
//!
//! cargo run --release --example benchmark -- boston ropd 10

use fawn::bench::{results_csv, run_benchmark, BenchmarkConfig};
use fawn::data::Manifest;
use fawn::losses::Objective;

fn main() -> fawn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map_or("boston", String::as_str);
    let objective: Objective = args.get(1).map_or("ropd", String::as_str).parse()?;
    let splits = args.get(2).map_or(Ok(3), |s| s.parse()).unwrap_or(3);

    let ds = Manifest::discover()?.load_dataset(name)?;
    println!("{name}: N={} D={} m={}", ds.len(), ds.num_features(), ds.num_targets());
    let config = BenchmarkConfig {
        objective,
        splits,
        ..BenchmarkConfig::default()
    };
    let result = run_benchmark(&ds, &config)?;
    for s in &result.splits {
        println!("split {:2}: nll {:?} epochs {} ({:.1}s)", s.seed, s.nll, s.epochs, s.seconds);
    }
    print!("{}", results_csv(&[result]));
    Ok(())
}
