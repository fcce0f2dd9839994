//! Weight distributions and the feed-forward network built from them.
//!
//! A network is a stack of layers whose weights are either independent
//! Gaussians (`w ~ N(μ, exp(ρ)²)`) or scaled Bernoullis
//! (`w = (w' − 0.5)·s`, `w' ~ B(p)`). Forward evaluation never samples: it
//! turns each layer's parameters into weight moments and pushes the input
//! through [`linear_moments`](crate::moments::linear_moments) and
//! [`rectifier_moments`](crate::moments::rectifier_moments).
//!
//! The rectifier rule treats units as independent, which is only
//! approximately true once several inputs share noisy weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FawnError, Result};
use crate::moments::{
    self, cov_diag_batch, linear_mean_batch, linear_var_batch, noise_batch, rectifier_batch, MomentVector,
    NoiseSpec,
};
use crate::tensor::Matrix;

/// Standard deviation of the initial weight means.
pub const INIT_MEAN_STD: f64 = 0.2;
/// Initial posterior standard deviation, `exp(rho)`.
pub const INIT_SIGMA: f64 = 0.05;
/// Standard deviation of the initial Bernoulli weight scalers.
pub const INIT_SCALE_STD: f64 = 0.4;

/// Elementwise transfer function applied after a layer's linear map.
///
/// Only transfers with closed-form Gaussian moments are supported; a
/// logistic-sigmoid approximation would slot in here as another variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    Rectifier,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    Gaussian,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Diagonal,
    FullCovariance,
}

/// Architecture of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input width followed by the width of every layer.
    pub layer_widths: Vec<usize>,
    /// One transfer per layer; the last must be `Identity`.
    pub transfers: Vec<Transfer>,
    pub weight_family: WeightFamily,
    pub input_noise: Option<NoiseSpec>,
    pub output_mode: OutputMode,
}

impl NetworkSpec {
    /// Regression network with rectifier hidden layers and a linear output.
    pub fn regression(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        let mut transfers = vec![Transfer::Rectifier; hidden.len()];
        transfers.push(Transfer::Identity);
        Self {
            layer_widths,
            transfers,
            weight_family: WeightFamily::Gaussian,
            input_noise: None,
            output_mode: OutputMode::Diagonal,
        }
    }

    pub fn with_family(mut self, family: WeightFamily) -> Self {
        self.weight_family = family;
        self
    }

    pub fn with_output_mode(mut self, mode: OutputMode) -> Self {
        self.output_mode = mode;
        self
    }

    pub fn with_input_noise(mut self, noise: NoiseSpec) -> Self {
        self.input_noise = Some(noise);
        self
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec has widths")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(FawnError::InvalidInput("a network needs at least one layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(FawnError::InvalidInput("layer widths must be positive".into()));
        }
        if self.transfers.len() != self.num_layers() {
            return Err(dim_err("transfers", self.num_layers(), self.transfers.len()));
        }
        if self.transfers.last() != Some(&Transfer::Identity) {
            return Err(FawnError::InvalidInput("the output layer must use the identity transfer".into()));
        }
        if self.output_mode == OutputMode::FullCovariance && self.weight_family != WeightFamily::Gaussian {
            return Err(FawnError::Unsupported(
                "full-covariance output requires Gaussian weights".into(),
            ));
        }
        if let Some(noise) = &self.input_noise {
            noise.validate(self.input_width())?;
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior over a layer's weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianWeightLayer {
    /// Weight means, `n×m`.
    pub mu: Matrix,
    /// Log standard deviations, `n×m`.
    pub rho: Matrix,
    pub bias_mu: Matrix,
    pub bias_rho: Matrix,
}

impl GaussianWeightLayer {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_MEAN_STD).expect("valid std");
        let log_sigma = INIT_SIGMA.ln();
        Self {
            mu: Matrix::from_fn(inputs, outputs, |_, _| normal.sample(rng)),
            rho: Matrix::filled(inputs, outputs, log_sigma),
            bias_mu: Matrix::from_fn(1, outputs, |_, _| normal.sample(rng)),
            bias_rho: Matrix::filled(1, outputs, log_sigma),
        }
    }

    /// Builds a layer from explicit weight means and variances.
    pub fn from_moments(w_mean: Matrix, w_var: &Matrix, b_mean: &[f64], b_var: &[f64]) -> Result<Self> {
        if w_mean.shape() != w_var.shape() || b_mean.len() != w_mean.cols() || b_var.len() != b_mean.len() {
            return Err(dim_err("GaussianWeightLayer::from_moments", format!("{:?}", w_mean.shape()), "mismatched parts"));
        }
        if w_var.as_slice().iter().chain(b_var).any(|&v| !(v > 0.0)) {
            return Err(FawnError::InvalidInput("Gaussian weight variances must be positive".into()));
        }
        Ok(Self {
            mu: w_mean,
            rho: w_var.map(|v| 0.5 * v.ln()),
            bias_mu: Matrix::row_vector(b_mean),
            bias_rho: Matrix::row_vector(&b_var.iter().map(|v| 0.5 * v.ln()).collect::<Vec<_>>()),
        })
    }

    pub fn inputs(&self) -> usize {
        self.mu.rows()
    }

    pub fn outputs(&self) -> usize {
        self.mu.cols()
    }

    pub fn weight_variance(&self) -> Matrix {
        self.rho.map(|r| (2.0 * r).exp())
    }

    pub fn bias_variance(&self) -> Matrix {
        self.bias_rho.map(|r| (2.0 * r).exp())
    }
}

/// Bernoulli weights `w = (w' − 0.5)·s`, `w' ~ B(p)`, with Gaussian biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliWeightLayer {
    /// `p = logistic(logit_p)`, `n×m`.
    pub logit_p: Matrix,
    /// Per-weight scaler `s`, `n×m`.
    pub scale: Matrix,
    pub bias_mu: Matrix,
    pub bias_rho: Matrix,
}

impl BernoulliWeightLayer {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = Normal::new(0.0, INIT_SCALE_STD).expect("valid std");
        let bias = Normal::new(0.0, INIT_MEAN_STD).expect("valid std");
        Self {
            logit_p: Matrix::zeros(inputs, outputs),
            scale: Matrix::from_fn(inputs, outputs, |_, _| scale.sample(rng)),
            bias_mu: Matrix::from_fn(1, outputs, |_, _| bias.sample(rng)),
            bias_rho: Matrix::filled(1, outputs, INIT_SIGMA.ln()),
        }
    }

    pub fn probability(&self) -> Matrix {
        self.logit_p.map(logistic)
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightLayer {
    Gaussian(GaussianWeightLayer),
    Bernoulli(BernoulliWeightLayer),
}

/// First two moments of every weight and bias in a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    pub w_mean: Matrix,
    pub w_var: Matrix,
    pub b_mean: Matrix,
    pub b_var: Matrix,
}

impl WeightLayer {
    pub fn inputs(&self) -> usize {
        match self {
            Self::Gaussian(l) => l.mu.rows(),
            Self::Bernoulli(l) => l.logit_p.rows(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Self::Gaussian(l) => l.mu.cols(),
            Self::Bernoulli(l) => l.logit_p.cols(),
        }
    }

    pub fn family(&self) -> WeightFamily {
        match self {
            Self::Gaussian(_) => WeightFamily::Gaussian,
            Self::Bernoulli(_) => WeightFamily::Bernoulli,
        }
    }

    pub fn weight_moments(&self) -> LayerMoments {
        match self {
            Self::Gaussian(l) => LayerMoments {
                w_mean: l.mu.clone(),
                w_var: l.weight_variance(),
                b_mean: l.bias_mu.clone(),
                b_var: l.bias_variance(),
            },
            Self::Bernoulli(l) => {
                let p = l.probability();
                LayerMoments {
                    w_mean: p.zip_map(&l.scale, |p, s| (p - 0.5) * s),
                    w_var: p.zip_map(&l.scale, |p, s| p * (1.0 - p) * s * s),
                    b_mean: l.bias_mu.clone(),
                    b_var: l.bias_rho.map(|r| (2.0 * r).exp()),
                }
            }
        }
    }

    pub(crate) fn tensors(&self) -> [&Matrix; 4] {
        match self {
            Self::Gaussian(l) => [&l.mu, &l.rho, &l.bias_mu, &l.bias_rho],
            Self::Bernoulli(l) => [&l.logit_p, &l.scale, &l.bias_mu, &l.bias_rho],
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        match self {
            Self::Gaussian(l) => [&mut l.mu, &mut l.rho, &mut l.bias_mu, &mut l.bias_rho],
            Self::Bernoulli(l) => [&mut l.logit_p, &mut l.scale, &mut l.bias_mu, &mut l.bias_rho],
        }
    }
}

/// Initialises one layer per spec entry.
pub fn init_layers<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Vec<WeightLayer>> {
    spec.validate()?;
    Ok(spec
        .layer_widths
        .windows(2)
        .map(|w| match spec.weight_family {
            WeightFamily::Gaussian => WeightLayer::Gaussian(GaussianWeightLayer::init(w[0], w[1], rng)),
            WeightFamily::Bernoulli => WeightLayer::Bernoulli(BernoulliWeightLayer::init(w[0], w[1], rng)),
        })
        .collect())
}

pub(crate) fn check_layers(spec: &NetworkSpec, layers: &[WeightLayer]) -> Result<()> {
    spec.validate()?;
    if layers.len() != spec.num_layers() {
        return Err(dim_err("layer count", spec.num_layers(), layers.len()));
    }
    for (i, layer) in layers.iter().enumerate() {
        let (n, m) = (spec.layer_widths[i], spec.layer_widths[i + 1]);
        if layer.inputs() != n || layer.outputs() != m {
            return Err(dim_err("layer shape", format!("{n}x{m}"), format!("{}x{}", layer.inputs(), layer.outputs())));
        }
    }
    Ok(())
}

/// Row-wise moments of a batch of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Matrix,
    pub var: Matrix,
}

impl BatchMoments {
    pub fn row(&self, i: usize) -> MomentVector {
        MomentVector::from_row_matrices(&self.mean, &self.var, i)
    }
}

/// Moments entering the last layer, plus the last layer's weight moments.
pub(crate) struct PenultimateMoments {
    pub input: BatchMoments,
    pub last: LayerMoments,
}

pub(crate) fn penultimate_batch(spec: &NetworkSpec, layers: &[WeightLayer], x: &Matrix) -> Result<PenultimateMoments> {
    check_layers(spec, layers)?;
    if x.cols() != spec.input_width() {
        return Err(dim_err("network input", spec.input_width(), x.cols()));
    }
    if !x.is_finite() {
        return Err(FawnError::InvalidInput("non-finite network input".into()));
    }
    let mut mean = x.clone();
    let mut var = Matrix::zeros(x.rows(), x.cols());
    if let Some(noise) = &spec.input_noise {
        (mean, var) = noise_batch(&mean, &var, noise);
    }
    let last = layers.len() - 1;
    for (layer, transfer) in layers[..last].iter().zip(&spec.transfers) {
        let lm = layer.weight_moments();
        let a_mean = linear_mean_batch(&mean, &lm.w_mean, &lm.b_mean);
        let a_var = linear_var_batch(&mean, &var, &lm.w_mean, &lm.w_var, &lm.b_var);
        (mean, var) = match transfer {
            Transfer::Rectifier => rectifier_batch(&a_mean, &a_var),
            Transfer::Identity => (a_mean, a_var),
        };
    }
    Ok(PenultimateMoments {
        input: BatchMoments { mean, var },
        last: layers[last].weight_moments(),
    })
}

/// Output moments for a batch of inputs (`B×n_in` → `B×n_out`).
pub fn forward_batch(spec: &NetworkSpec, layers: &[WeightLayer], x: &Matrix) -> Result<BatchMoments> {
    if x.rows() == 0 {
        return Err(FawnError::InvalidInput("empty batch".into()));
    }
    let pen = penultimate_batch(spec, layers, x)?;
    let lm = &pen.last;
    Ok(BatchMoments {
        mean: linear_mean_batch(&pen.input.mean, &lm.w_mean, &lm.b_mean),
        var: linear_var_batch(&pen.input.mean, &pen.input.var, &lm.w_mean, &lm.w_var, &lm.b_var),
    })
}

/// Output moments for a single input vector.
pub fn forward(spec: &NetworkSpec, layers: &[WeightLayer], x: &[f64]) -> Result<MomentVector> {
    let lifted = moments::lift_point(x)?;
    let (m, _) = lifted.to_row_matrices();
    Ok(forward_batch(spec, layers, &m)?.row(0))
}

/// Deterministic network evaluated at fixed weights (`B×n_in` → `B×n_out`).
pub fn deterministic_forward(
    spec: &NetworkSpec,
    weights: &[(Matrix, Matrix)],
    x: &Matrix,
) -> Matrix {
    let mut h = x.clone();
    for ((w, b), transfer) in weights.iter().zip(&spec.transfers) {
        h = linear_mean_batch(&h, w, b);
        if *transfer == Transfer::Rectifier {
            h = h.map(|v| v.max(0.0));
        }
    }
    h
}

/// Diagonal of the full output covariance for a batch, see
/// [`crate::covariance`].
pub(crate) fn output_diag_v(pen: &PenultimateMoments) -> Matrix {
    cov_diag_batch(&pen.input.mean, &pen.input.var, &pen.last.w_var, &pen.last.b_var)
}
