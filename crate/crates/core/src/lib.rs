//! Feed-forward networks with distributions over their weights, trained by
//! propagating activation means and variances in closed form instead of
//! sampling.

// Negated comparisons are how NaN gets rejected; index loops mirror the
// matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod covariance;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod mc;
pub mod model;
pub mod moments;
pub mod optim;
pub mod tensor;
pub mod validate;

pub use error::{FawnError, Result};
pub use tensor::Matrix;
