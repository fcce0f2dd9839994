//! Trains one model on a 90/10 split and reports the held-out NLL.
//!
//! cargo run --release --example train -- wine ropd gaussian

use fawn::data::{split_90_10, Manifest, StandardizationStats};
use fawn::layers::{NetworkSpec, WeightFamily};
use fawn::losses::{predictive_nll, Objective};
use fawn::optim::{train, TrainConfig};

fn main() -> fawn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map_or("boston", String::as_str);
    let objective: Objective = args.get(1).map_or("ropd", String::as_str).parse()?;
    let family = match args.get(2).map(String::as_str) {
        Some("bernoulli") => WeightFamily::Bernoulli,
        _ => WeightFamily::Gaussian,
    };

    let ds = Manifest::discover()?.load_dataset(name)?;
    let (train_set, test_set) = split_90_10(&ds, 0)?;
    let stats = StandardizationStats::fit(&train_set);
    let spec = NetworkSpec::regression(ds.num_features(), &[50], ds.num_targets()).with_family(family);
    let outcome = train(&stats.apply(&train_set)?, &spec, &TrainConfig::default(), objective)?;

    for r in outcome.log.iter().step_by(100) {
        println!("epoch {:5}  loss {:.5}", r.epoch, r.loss);
    }
    let nll = predictive_nll(&outcome.model, &stats.standardize_features(&test_set.features), &test_set.targets, &stats)?;
    println!("stopped after {} epochs ({:?}); test NLL {nll:.4}", outcome.log.len(), outcome.stop);
    Ok(())
}
