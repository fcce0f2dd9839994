//! Mean and variance of a small network's output, computed in closed form
//! and by sampling concrete weights.
//!
//! cargo run --release --example moment_propagation

use fawn::layers::{forward, NetworkSpec};
use fawn::mc::sample_forward;
use fawn::model::ModelState;
use fawn::moments::rectifier_point;

fn main() -> fawn::Result<()> {
    let (e, v) = rectifier_point(0.0, 1.0);
    println!("max(a, 0), a ~ N(0, 1): mean {e:.6}, variance {v:.6}");

    // Noise-free inputs: hidden units are then independent given x and the
    // closed form is exact up to the rectifier's Gaussian input assumption.
    let spec = NetworkSpec::regression(3, &[16], 2);
    let model = ModelState::init(spec.clone(), 1)?;
    let x = [0.5, -1.0, 2.0];

    let analytic = forward(&spec, &model.layers, &x)?;
    let sampled = sample_forward(&spec, &model.layers, &x, 200_000, 3)?;
    println!("output  analytic mean/var         sampled mean/var");
    for o in 0..spec.output_width() {
        println!(
            "{o:>6}  {:>+.5} / {:.5}    {:>+.5} / {:.5}",
            analytic.mean()[o],
            analytic.variance()[o],
            sampled.mean[o],
            sampled.var[o]
        );
    }
    Ok(())
}
