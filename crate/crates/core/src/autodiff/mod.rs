//! Reverse-mode differentiation of the moment-propagation objectives.

mod gradcheck;
mod graph;
mod tape;

pub use gradcheck::{flatten, gradcheck, gradcheck_model, relative_error, unflatten, GradcheckReport, MIN_COORDINATES};
pub use graph::{loss_and_grad, record_loss, RecordedLoss};
pub use tape::{GradientBundle, PlantedFault, Tape, Var};
