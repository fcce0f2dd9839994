//! Monte Carlo check of the analytic moments: draw concrete weights, run
//! the plain network, compare sample moments.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::forward_covariant;
use crate::error::{dim_err, FawnError, Result};
use crate::layers::{
    self, check_layers, BernoulliWeightLayer, GaussianWeightLayer, NetworkSpec, Transfer, WeightFamily, WeightLayer,
};
use crate::moments::NoiseKind;
use crate::tensor::Matrix;

pub const DEFAULT_THRESHOLD: f64 = 5.0;
pub const MIN_SAMPLES: usize = 1000;
/// Independent RNG streams a run is split into; fixed so results do not
/// depend on the thread count.
const STREAMS: usize = 64;

/// Running first and second moments (and co-moments) of output vectors.
#[derive(Debug, Clone, PartialEq)]
struct Accumulator {
    count: f64,
    mean: Vec<f64>,
    /// Sum of outer products of deviations, row-major `m×m`.
    comoment: Vec<f64>,
    /// Per output, sums of `(y − shift)^k` for `k = 1..=4`.
    shift: Vec<f64>,
    power_sums: Vec<[f64; 4]>,
}

impl Accumulator {
    fn new(shift: Vec<f64>) -> Self {
        let dim = shift.len();
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            shift,
            power_sums: vec![[0.0; 4]; dim],
        }
    }

    fn push(&mut self, y: &[f64], delta: &mut [f64]) {
        let m = self.mean.len();
        self.count += 1.0;
        for ((sums, &v), c) in self.power_sums.iter_mut().zip(y).zip(&self.shift) {
            let d = v - c;
            let d2 = d * d;
            sums[0] += d;
            sums[1] += d2;
            sums[2] += d2 * d;
            sums[3] += d2 * d2;
        }
        for (d, (&v, mu)) in delta.iter_mut().zip(y.iter().zip(&mut self.mean)) {
            *d = v - *mu;
            *mu += *d / self.count;
        }
        for o in 0..m {
            let after = y[o] - self.mean[o];
            for p in 0..m {
                self.comoment[o * m + p] += delta[p] * after;
            }
        }
    }

    fn merge(mut self, other: &Self) -> Self {
        let m = self.mean.len();
        let total = self.count + other.count;
        if other.count == 0.0 {
            return self;
        }
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = self.count * other.count / total;
        for o in 0..m {
            for p in 0..m {
                self.comoment[o * m + p] += other.comoment[o * m + p] + delta[o] * delta[p] * w;
            }
        }
        for (mu, d) in self.mean.iter_mut().zip(&delta) {
            *mu += d * other.count / total;
        }
        for (a, b) in self.power_sums.iter_mut().zip(&other.power_sums) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        self.count = total;
        self
    }

    /// Fourth central moment per output.
    fn fourth_central(&self) -> Vec<f64> {
        self.power_sums
            .iter()
            .map(|s| {
                let [a, m2, m3, m4] = s.map(|v| v / self.count);
                m4 - 4.0 * a * m3 + 6.0 * a * a * m2 - 3.0 * a.powi(4)
            })
            .collect()
    }
}

/// Sample mean, variance and covariance of the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMoments {
    pub samples: usize,
    pub mean: Vec<f64>,
    /// Unbiased (`S−1`) sample variance.
    pub var: Vec<f64>,
    pub cov: Matrix,
    /// Fourth central sample moment per output.
    pub fourth_central: Vec<f64>,
}

struct Sampler<'a> {
    spec: &'a NetworkSpec,
    layers: &'a [WeightLayer],
    sigma: Vec<(Matrix, Matrix)>,
    probability: Vec<Matrix>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a NetworkSpec, layers: &'a [WeightLayer]) -> Self {
        let sigma = layers
            .iter()
            .map(|l| match l {
                WeightLayer::Gaussian(g) => (g.rho.map(f64::exp), g.bias_rho.map(f64::exp)),
                WeightLayer::Bernoulli(b) => (Matrix::zeros(0, 0), b.bias_rho.map(f64::exp)),
            })
            .collect();
        let probability = layers
            .iter()
            .map(|l| match l {
                WeightLayer::Bernoulli(b) => b.probability(),
                WeightLayer::Gaussian(_) => Matrix::zeros(0, 0),
            })
            .collect();
        Self {
            spec,
            layers,
            sigma,
            probability,
        }
    }

    /// One draw of every weight, input noise included, evaluated at `x`.
    fn draw(&self, x: &[f64], rng: &mut ChaCha8Rng, h: &mut Vec<f64>, next: &mut Vec<f64>) {
        h.clear();
        h.extend_from_slice(x);
        if let Some(noise) = &self.spec.input_noise {
            for (j, v) in h.iter_mut().enumerate() {
                let n: f64 = StandardNormal.sample(rng);
                let e = noise.mean_at(j) + noise.var_at(j).sqrt() * n;
                match noise.kind {
                    NoiseKind::Additive => *v += e,
                    NoiseKind::Multiplicative => *v *= e,
                }
            }
        }
        for (l, (layer, transfer)) in self.layers.iter().zip(&self.spec.transfers).enumerate() {
            let (w_sigma, b_sigma) = &self.sigma[l];
            next.clear();
            match layer {
                WeightLayer::Gaussian(g) => {
                    for j in 0..g.bias_mu.cols() {
                        let n: f64 = StandardNormal.sample(rng);
                        next.push(g.bias_mu.get(0, j) + b_sigma.get(0, j) * n);
                    }
                    for (i, &hi) in h.iter().enumerate() {
                        let (mu, sd) = (g.mu.row(i), w_sigma.row(i));
                        for (o, (&m, &s)) in next.iter_mut().zip(mu.iter().zip(sd)) {
                            let n: f64 = StandardNormal.sample(rng);
                            *o += hi * (m + s * n);
                        }
                    }
                }
                WeightLayer::Bernoulli(b) => {
                    for j in 0..b.bias_mu.cols() {
                        let n: f64 = StandardNormal.sample(rng);
                        next.push(b.bias_mu.get(0, j) + b_sigma.get(0, j) * n);
                    }
                    let p = &self.probability[l];
                    for (i, &hi) in h.iter().enumerate() {
                        for (o, (&pk, &s)) in next.iter_mut().zip(p.row(i).iter().zip(b.scale.row(i))) {
                            let on = if rng.random::<f64>() < pk { 1.0 } else { 0.0 };
                            *o += hi * (on - 0.5) * s;
                        }
                    }
                }
            }
            if *transfer == Transfer::Rectifier {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(h, next);
        }
    }
}

/// Draws `samples` full weight instantiations and returns the moments of
/// the network output at `x`.
pub fn sample_forward(
    spec: &NetworkSpec,
    layers: &[WeightLayer],
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<EmpiricalMoments> {
    check_layers(spec, layers)?;
    if x.len() != spec.input_width() {
        return Err(dim_err("sample input", spec.input_width(), x.len()));
    }
    if samples < MIN_SAMPLES {
        return Err(FawnError::InvalidInput(format!("need at least {MIN_SAMPLES} samples, got {samples}")));
    }
    let m = spec.output_width();
    let sampler = Sampler::new(spec, layers);
    let per_stream = samples / STREAMS;
    let extra = samples % STREAMS;
    // A common shift keeps the power sums well conditioned and mergeable.
    let shift = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAMS as u64);
        let (mut h, mut next) = (Vec::new(), Vec::new());
        let mut sum = vec![0.0; m];
        for _ in 0..64 {
            sampler.draw(x, &mut rng, &mut h, &mut next);
            sum.iter_mut().zip(&h).for_each(|(s, v)| *s += v / 64.0);
        }
        sum
    };
    let parts: Vec<Accumulator> = (0..STREAMS)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let count = per_stream + usize::from(stream < extra);
            let mut acc = Accumulator::new(shift.clone());
            let (mut h, mut next, mut delta) = (Vec::new(), Vec::new(), vec![0.0; m]);
            for _ in 0..count {
                sampler.draw(x, &mut rng, &mut h, &mut next);
                acc.push(&h, &mut delta);
            }
            acc
        })
        .collect();
    let acc = parts.iter().fold(Accumulator::new(shift.clone()), |a, b| a.merge(b));
    let denom = acc.count - 1.0;
    let cov = Matrix::from_vec(m, m, acc.comoment.iter().map(|c| c / denom).collect());
    Ok(EmpiricalMoments {
        samples,
        var: (0..m).map(|o| cov.get(o, o)).collect(),
        fourth_central: acc.fourth_central(),
        mean: acc.mean,
        cov,
    })
}

/// Outcome of one analytic-versus-sampled comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub op_name: String,
    pub n_samples: usize,
    pub analytic_mean: Vec<f64>,
    pub analytic_var: Vec<f64>,
    pub empirical_mean: Vec<f64>,
    pub empirical_var: Vec<f64>,
    /// Mean z-scores followed by variance (or covariance) z-scores.
    pub z_scores: Vec<f64>,
    /// Variance z-scores recomputed with the fourth-moment standard error
    /// `√((μ₄ − var²(S−3)/(S−1))/S)`; diagnostic only.
    #[serde(default)]
    pub z_var_fourth_moment: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
}

impl SampleReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.iter().fold(0.0, |m, z| if z.is_nan() { f64::INFINITY } else { m.max(z.abs()) })
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn finish(op_name: &str, z_scores: Vec<f64>, threshold: f64, parts: [Vec<f64>; 4], samples: usize) -> SampleReport {
    let [analytic_mean, analytic_var, empirical_mean, empirical_var] = parts;
    let pass = z_scores.iter().all(|z| z.abs() < threshold);
    SampleReport {
        z_var_fourth_moment: Vec::new(),
        op_name: op_name.to_string(),
        n_samples: samples,
        analytic_mean,
        analytic_var,
        empirical_mean,
        empirical_var,
        z_scores,
        threshold,
        pass,
    }
}

/// Compares sampled output moments with the analytic forward pass at each
/// input. Standard errors use the Gaussian approximations
/// `√(var/S)` for the mean and `var·√(2/(S−1))` for the variance.
pub fn validate(
    spec: &NetworkSpec,
    layers: &[WeightLayer],
    inputs: &[Vec<f64>],
    samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<SampleReport>> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let analytic = layers::forward(spec, layers, x)?;
            let emp = sample_forward(spec, layers, x, samples, seed.wrapping_add(k as u64))?;
            let s = samples as f64;
            let mut z = Vec::with_capacity(2 * emp.mean.len());
            for o in 0..emp.mean.len() {
                z.push(z_score(emp.mean[o] - analytic.mean()[o], (emp.var[o] / s).sqrt()));
            }
            for o in 0..emp.mean.len() {
                let se = emp.var[o] * (2.0 / (s - 1.0)).sqrt();
                z.push(z_score(emp.var[o] - analytic.variance()[o], se));
            }
            let z4 = (0..emp.mean.len())
                .map(|o| {
                    let v = emp.var[o];
                    let se = ((emp.fourth_central[o] - v * v * (s - 3.0) / (s - 1.0)) / s).max(0.0).sqrt();
                    z_score(v - analytic.variance()[o], se)
                })
                .collect();
            let parts = [
                analytic.mean().to_vec(),
                analytic.variance().to_vec(),
                emp.mean,
                emp.var,
            ];
            let mut report = finish("forward_moments", z, threshold, parts, samples);
            report.z_var_fourth_moment = z4;
            Ok(report)
        })
        .collect()
}

/// Compares every output covariance entry of a Gaussian network with the
/// sample covariance; `SE = √((V_o V_p + C_op²)/(S−1))`.
pub fn validate_covariance(
    spec: &NetworkSpec,
    layers: &[WeightLayer],
    x: &[f64],
    samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<SampleReport> {
    let out = forward_covariant(spec, layers, x)?;
    let dense = out.dense();
    let emp = sample_forward(spec, layers, x, samples, seed)?;
    let m = out.dim();
    let s = samples as f64;
    let mut z = Vec::with_capacity(m + m * (m + 1) / 2);
    for o in 0..m {
        z.push(z_score(emp.mean[o] - out.mean[o], (emp.var[o] / s).sqrt()));
    }
    let (mut analytic_cov, mut empirical_cov) = (Vec::new(), Vec::new());
    for o in 0..m {
        for p in o..m {
            let c = emp.cov.get(o, p);
            let se = ((emp.var[o] * emp.var[p] + c * c) / (s - 1.0)).sqrt();
            z.push(z_score(c - dense.get(o, p), se));
            analytic_cov.push(dense.get(o, p));
            empirical_cov.push(c);
        }
    }
    let parts = [out.mean.clone(), analytic_cov, emp.mean, empirical_cov];
    Ok(finish("output_covariance", z, threshold, parts, samples))
}

/// A network with randomly drawn weight distributions and one input point.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomConfig {
    pub spec: NetworkSpec,
    pub layers: Vec<WeightLayer>,
    pub input: Vec<f64>,
}

/// Draws a configuration: `hidden` rectifier widths, weight means from
/// `N(0, 0.5²)`, standard deviations in `[0.05, 1]` (Gaussian) or
/// logits in `[−2, 2]` and scales in `[0.2, 1.5]` (Bernoulli), inputs in
/// `[−1, 1]`.
pub fn random_config(
    inputs: usize,
    hidden: &[usize],
    outputs: usize,
    family: WeightFamily,
    rng: &mut impl Rng,
) -> RandomConfig {
    let spec = NetworkSpec::regression(inputs, hidden, outputs).with_family(family);
    let mean = rand_distr::Normal::new(0.0, 0.5).expect("valid std");
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (n, m) = (w[0], w[1]);
            let bias_mu = Matrix::from_fn(1, m, |_, _| mean.sample(rng));
            let bias_rho = Matrix::from_fn(1, m, |_, _| rng.random_range(0.05_f64..1.0).ln());
            match family {
                WeightFamily::Gaussian => WeightLayer::Gaussian(GaussianWeightLayer {
                    mu: Matrix::from_fn(n, m, |_, _| mean.sample(rng)),
                    rho: Matrix::from_fn(n, m, |_, _| rng.random_range(0.05_f64..1.0).ln()),
                    bias_mu,
                    bias_rho,
                }),
                WeightFamily::Bernoulli => WeightLayer::Bernoulli(BernoulliWeightLayer {
                    logit_p: Matrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0)),
                    scale: Matrix::from_fn(n, m, |_, _| rng.random_range(0.2..1.5)),
                    bias_mu,
                    bias_rho,
                }),
            }
        })
        .collect();
    let input = (0..inputs).map(|_| rng.random_range(-1.0..1.0)).collect();
    RandomConfig { spec, layers, input }
}

/// Serialises reports as a JSON document.
pub fn report_json(reports: &[SampleReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}
