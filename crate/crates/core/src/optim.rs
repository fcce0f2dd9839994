//! Adam and the minibatch training loop.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_and_grad, GradientBundle};
use crate::data::{minibatches, Dataset};
use crate::error::{dim_err, FawnError, Result};
use crate::layers::NetworkSpec;
use crate::losses::{check_objective, Objective};
use crate::model::ModelState;
use crate::tensor::Matrix;

/// Epoch cap used when a dataset has more than this many rows.
pub const LARGE_DATASET_ROWS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// `None` picks 3000, or 500 above [`LARGE_DATASET_ROWS`] rows.
    pub max_epochs: Option<usize>,
    pub convergence_patience: usize,
    pub convergence_tol: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            max_epochs: None,
            convergence_patience: 25,
            convergence_tol: 1e-4,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FawnError::InvalidInput("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FawnError::InvalidInput("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.alpha > 0.0 && self.adam_eps > 0.0) {
            return Err(FawnError::InvalidInput("alpha and adam_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn epochs_for(&self, rows: usize) -> usize {
        self.max_epochs
            .unwrap_or(if rows > LARGE_DATASET_ROWS { 500 } else { 3000 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &ModelState) -> Self {
        let zeros: Vec<Matrix> = model.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Matrix], grads: &GradientBundle, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err("adam tensors", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(&grads.grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(dim_err("adam tensor shape", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if let Some(k) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(FawnError::InvalidInput(format!(
                "non-finite gradient in tensor {i} at element {k}: {}",
                g.as_slice()[k]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, theta) in p.as_mut_slice().iter_mut().enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= config.alpha * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of minibatch objectives divided by the training-set size.
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
    /// A non-finite loss or gradient; the returned model predates it.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub optimizer: AdamState,
    pub log: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

/// Writes the log as newline-delimited JSON.
pub fn write_log(log: &[EpochRecord], mut out: impl Write) -> Result<()> {
    for record in log {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains a freshly initialised network on an already standardised dataset.
pub fn train(dataset: &Dataset, spec: &NetworkSpec, config: &TrainConfig, objective: Objective) -> Result<TrainOutcome> {
    let model = ModelState::init(spec.clone(), config.rng_seed)?;
    train_from(model, dataset, config, objective)
}

fn is_divergence(err: &FawnError) -> bool {
    matches!(err, FawnError::NonFinite { .. })
}

/// Continues training `model`.
pub fn train_from(mut model: ModelState, dataset: &Dataset, config: &TrainConfig, objective: Objective) -> Result<TrainOutcome> {
    config.validate()?;
    check_objective(objective, model.spec.weight_family, model.spec.output_mode)?;
    if dataset.num_features() != model.spec.input_width() || dataset.num_targets() != model.spec.output_width() {
        return Err(dim_err(
            "dataset vs network",
            format!("{}→{}", model.spec.input_width(), model.spec.output_width()),
            format!("{}→{}", dataset.num_features(), dataset.num_targets()),
        ));
    }
    let n = dataset.len();
    let max_epochs = config.epochs_for(n);
    let mut state = AdamState::new(&model);
    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let start = Instant::now();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 0..max_epochs {
        let epoch_seed = config.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let mut total = 0.0;
        for block in minibatches(n, config.batch_size, epoch_seed) {
            let x = dataset.features.select_rows(&block);
            let z = dataset.targets.select_rows(&block);
            let (loss, grads) = match loss_and_grad(&model, objective, &x, &z, n) {
                Ok(pair) => pair,
                Err(e) if is_divergence(&e) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                stop = StopReason::Diverged;
                break 'epochs;
            }
            let previous = (model.clone(), state.clone());
            adam_step(&mut model.tensors_mut(), &grads, &mut state, config)?;
            if !model.tensors().iter().all(|t| t.is_finite()) {
                (model, state) = previous;
                stop = StopReason::Diverged;
                break 'epochs;
            }
            total += loss;
        }
        let loss = total / n as f64;
        log.push(EpochRecord {
            epoch,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if best.is_infinite() || loss < best - config.convergence_tol * best.abs() {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.convergence_patience {
                stop = StopReason::Converged;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: state,
        log,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_setup(g: f64) -> (Matrix, GradientBundle, AdamState) {
        let p = Matrix::scalar(0.5);
        let grads = GradientBundle {
            grads: vec![Matrix::scalar(g)],
        };
        let state = AdamState {
            m: vec![Matrix::scalar(0.0)],
            v: vec![Matrix::scalar(0.0)],
            t: 0,
        };
        (p, grads, state)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, grads, mut state) = scalar_setup(0.0);
        adam_step(&mut [&mut p], &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(p.item(), 0.5);
    }

    #[test]
    fn first_step_magnitude() {
        let (mut p, grads, mut state) = scalar_setup(1.0);
        adam_step(&mut [&mut p], &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_abs_diff_eq!(0.5 - p.item(), 0.001 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_recursion() {
        let cfg = TrainConfig::default();
        let (mut p, grads, mut state) = scalar_setup(0.3);
        adam_step(&mut [&mut p], &grads, &mut state, &cfg).unwrap();
        adam_step(&mut [&mut p], &grads, &mut state, &cfg).unwrap();
        let (mut theta, mut m, mut v) = (0.5_f64, 0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * 0.3;
            v = 0.999 * v + 0.001 * 0.09;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            theta -= 0.001 * mh / (vh.sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(p.item(), theta, epsilon = 1e-15);
    }

    #[test]
    fn nan_gradient_rejected() {
        let (mut p, grads, mut state) = scalar_setup(f64::NAN);
        assert!(adam_step(&mut [&mut p], &grads, &mut state, &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let x = Matrix::from_fn(20, 1, |i, _| i as f64 / 10.0);
        let ds = Dataset::new(x.clone(), x, "t").unwrap();
        let spec = NetworkSpec::regression(1, &[3], 1);
        let cfg = TrainConfig {
            max_epochs: Some(0),
            ..TrainConfig::default()
        };
        let out = train(&ds, &spec, &cfg, Objective::Ropd).unwrap();
        assert_eq!(out.model, ModelState::init(spec, 0).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn log_lines_are_json() {
        let log = vec![EpochRecord { epoch: 0, loss: 1.5, wall_ms: 3 }];
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"epoch\":0,\"loss\":1.5,\"wall_ms\":3}\n");
    }
}
