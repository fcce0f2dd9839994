//! Full output covariance of a multi-output network and its precision by
//! rank-one updates.
//!
//! cargo run --release --example output_covariance

use fawn::covariance::{forward_covariant, mvn_nll, precision_logdet};
use fawn::layers::{NetworkSpec, OutputMode};
use fawn::model::ModelState;

fn main() -> fawn::Result<()> {
    let spec = NetworkSpec::regression(4, &[12], 3).with_output_mode(OutputMode::FullCovariance);
    let model = ModelState::init(spec.clone(), 2)?;
    let out = forward_covariant(&spec, &model.layers, &[0.3, -0.7, 1.2, 0.0])?;

    println!("mean {:?}", out.mean.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>());
    println!("covariance ({} rank-one terms):", out.rank_one_terms.len());
    let c = out.dense();
    for o in 0..out.dim() {
        println!("  {}", c.row(o).iter().map(|v| format!("{v:+.5}")).collect::<Vec<_>>().join(" "));
    }

    let (precision, logdet) = precision_logdet(&out)?;
    let product = c.matmul(&precision);
    let off_identity = (0..out.dim())
        .flat_map(|i| (0..out.dim()).map(move |j| (i, j)))
        .map(|(i, j)| (product.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    println!("log det C = {logdet:.6}, max |C·P − I| = {off_identity:.1e}");

    let obs = model.likelihood.variance();
    println!("−log N(z | mean, C + σ̂²I) at z = mean: {:.6}", mvn_nll(&out.mean, &out, &obs)?);
    Ok(())
}
