//! Tape gradients against central differences, with and without a
//! deliberately broken backward rule.
//!
//! cargo run --release --example gradcheck

use fawn::autodiff::{gradcheck_model, PlantedFault};
use fawn::layers::{NetworkSpec, OutputMode};
use fawn::losses::Objective;
use fawn::model::ModelState;
use fawn::Matrix;

fn main() -> fawn::Result<()> {
    let x = Matrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
    let cases = [
        ("vi diagonal", NetworkSpec::regression(3, &[10], 2), Objective::Vi),
        ("ropd diagonal", NetworkSpec::regression(3, &[10], 2), Objective::Ropd),
        (
            "ropd full covariance",
            NetworkSpec::regression(3, &[10], 2).with_output_mode(OutputMode::FullCovariance),
            Objective::Ropd,
        ),
    ];
    for (name, spec, objective) in cases {
        let model = ModelState::init(spec.clone(), 4)?;
        let z = Matrix::from_fn(6, spec.output_width(), |i, o| (i as f64 - o as f64) * 0.2);
        let clean = gradcheck_model(&model, objective, &x, &z, 60, 1e-5, 0, None)?;
        let broken = gradcheck_model(&model, objective, &x, &z, 60, 1e-5, 0, Some(PlantedFault::RectifierBackwardSign))?;
        println!(
            "{name:<22} {} coordinates  max rel. error {:.1e}  (with planted fault {:.1e})",
            clean.coordinates, clean.max_relative_error, broken.max_relative_error
        );
    }
    Ok(())
}
