//! Matrix-valued reverse-mode tape.
//!
//! Nodes are appended in execution order, so the tape is already
//! topologically sorted. Each primitive stores the ids of its inputs and
//! whatever forward quantities its adjoint needs; `backward` walks the tape
//! once in reverse.

use crate::covariance::{dense_precision_logdet, mvn_nll_from_parts, recursive_precision_logdet};
use crate::error::{dim_err, FawnError, Result};
use crate::layers::logistic;
use crate::losses::HALF_LN_2PI;
use crate::moments::{
    cov_diag_batch, linear_mean_batch, linear_var_batch, noise_batch, rectifier_batch, rectifier_partials,
    NoiseKind, NoiseSpec,
};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Deliberate defects for exercising the validation battery.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantedFault {
    /// Flips the sign of the rectifier mean adjoint.
    RectifierBackwardSign,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf { param: Option<usize> },
    GaussianVariance { rho: Var },
    BernoulliMean { logit: Var, scale: Var },
    BernoulliVariance { logit: Var, scale: Var },
    LinearMean { x: Var, w: Var, b: Var },
    LinearVariance { x_mean: Var, x_var: Var, w_mean: Var, w_var: Var, b_var: Var },
    CovDiag { x_mean: Var, x_var: Var, w_var: Var, b_var: Var },
    RectifierMean { mean: Var, var: Var },
    RectifierVariance { mean: Var, var: Var },
    NoiseMean { mean: Var, noise: NoiseSpec },
    NoiseVariance { mean: Var, var: Var, noise: NoiseSpec },
    ExpectedNegLogLik { target: Var, mean: Var, var: Var, hat_rho: Var },
    GaussianNll { target: Var, mean: Var, var: Var, hat_rho: Var },
    MvnNll { target: Var, mean: Var, diag_v: Var, x_var: Var, w_mean: Var, hat_rho: Var },
    Kl { mu: Var, rho: Var, prior_mu: Var, prior_rho: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    Element { a: Var, row: usize, col: usize },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::GaussianVariance { .. } => "gaussian_variance",
            Op::BernoulliMean { .. } => "bernoulli_mean",
            Op::BernoulliVariance { .. } => "bernoulli_variance",
            Op::LinearMean { .. } => "linear_mean",
            Op::LinearVariance { .. } => "linear_variance",
            Op::CovDiag { .. } => "covariance_diagonal",
            Op::RectifierMean { .. } => "rectifier_mean",
            Op::RectifierVariance { .. } => "rectifier_variance",
            Op::NoiseMean { .. } => "noise_mean",
            Op::NoiseVariance { .. } => "noise_variance",
            Op::ExpectedNegLogLik { .. } => "expected_neg_loglik",
            Op::GaussianNll { .. } => "gaussian_nll",
            Op::MvnNll { .. } => "mvn_nll",
            Op::Kl { .. } => "kl_shared_prior",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Element { .. } => "element",
        }
    }
}

/// Per-sample precision and `α = P(z − mean)` kept for the MVN adjoint.
#[derive(Debug, Clone)]
pub(crate) struct MvnSaved {
    precision: Vec<Matrix>,
    alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    saved: Option<MvnSaved>,
}

/// One gradient tensor per registered parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grads: Vec<Matrix>,
}

impl GradientBundle {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            grads: self.grads.iter().map(|g| g.scale(factor)).collect(),
        }
    }

    /// Flattened view, parameter by parameter.
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<PlantedFault>,
}

fn same_shape(context: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(context, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<PlantedFault>) -> Self {
        Self { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf { param: None }, value, None)
    }

    /// A trainable input whose gradient lands in slot `index` of the bundle.
    pub fn param(&mut self, value: Matrix, index: usize) -> Var {
        self.push(Op::Leaf { param: Some(index) }, value, None)
    }

    fn push(&mut self, op: Op, value: Matrix, saved: Option<MvnSaved>) -> Var {
        self.nodes.push(Node { op, value, saved });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = evaluate(&op, |v| &self.nodes[v.0].value)?;
        if !value.is_finite() {
            return Err(FawnError::NonFinite { primitive: op.name() });
        }
        Ok(self.push(op, value, saved))
    }

    pub fn gaussian_variance(&mut self, rho: Var) -> Result<Var> {
        self.record(Op::GaussianVariance { rho })
    }

    pub fn bernoulli_mean(&mut self, logit: Var, scale: Var) -> Result<Var> {
        self.record(Op::BernoulliMean { logit, scale })
    }

    pub fn bernoulli_variance(&mut self, logit: Var, scale: Var) -> Result<Var> {
        self.record(Op::BernoulliVariance { logit, scale })
    }

    pub fn linear_mean(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::LinearMean { x, w, b })
    }

    pub fn linear_variance(&mut self, x_mean: Var, x_var: Var, w_mean: Var, w_var: Var, b_var: Var) -> Result<Var> {
        self.record(Op::LinearVariance { x_mean, x_var, w_mean, w_var, b_var })
    }

    pub fn cov_diag(&mut self, x_mean: Var, x_var: Var, w_var: Var, b_var: Var) -> Result<Var> {
        self.record(Op::CovDiag { x_mean, x_var, w_var, b_var })
    }

    pub fn rectifier(&mut self, mean: Var, var: Var) -> Result<(Var, Var)> {
        Ok((
            self.record(Op::RectifierMean { mean, var })?,
            self.record(Op::RectifierVariance { mean, var })?,
        ))
    }

    pub fn noise(&mut self, mean: Var, var: Var, noise: &NoiseSpec) -> Result<(Var, Var)> {
        noise.validate(self.value(mean).cols())?;
        Ok((
            self.record(Op::NoiseMean { mean, noise: noise.clone() })?,
            self.record(Op::NoiseVariance { mean, var, noise: noise.clone() })?,
        ))
    }

    /// `Σ −E[log N(z | y, σ̂²)]` over the batch and output dimensions.
    pub fn expected_neg_loglik(&mut self, target: Var, mean: Var, var: Var, hat_rho: Var) -> Result<Var> {
        self.record(Op::ExpectedNegLogLik { target, mean, var, hat_rho })
    }

    /// `Σ −log N(z | mean, var + σ̂²)` over the batch and output dimensions.
    pub fn gaussian_nll(&mut self, target: Var, mean: Var, var: Var, hat_rho: Var) -> Result<Var> {
        self.record(Op::GaussianNll { target, mean, var, hat_rho })
    }

    /// `Σ_b −log N(z_b | mean_b, C_b + diag(σ̂²))` with
    /// `C_b = diag(diag_v_b) + W_meanᵀ diag(x_var_b) W_mean`.
    pub fn mvn_nll(
        &mut self,
        target: Var,
        mean: Var,
        diag_v: Var,
        x_var: Var,
        w_mean: Var,
        hat_rho: Var,
    ) -> Result<Var> {
        self.record(Op::MvnNll { target, mean, diag_v, x_var, w_mean, hat_rho })
    }

    /// KL from `N(mu, exp(rho)²)` (elementwise) to `N(prior_mu, exp(prior_rho)²)`.
    pub fn kl(&mut self, mu: Var, rho: Var, prior_mu: Var, prior_rho: Var) -> Result<Var> {
        self.record(Op::Kl { mu, rho, prior_mu, prior_rho })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale { a, factor })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum { a })
    }

    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        self.record(Op::Element { a, row, col })
    }

    /// Recomputes every node from the leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf { .. } => node.value.clone(),
                _ => evaluate(&node.op, |v| &values[v.0])?.0,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Result<GradientBundle> {
        if self.value(root).len() != 1 {
            return Err(FawnError::InvalidInput(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Leaf { param: Some(i) } => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut grads: Vec<Option<Matrix>> = vec![None; n_params];

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf { param: Some(i) } = node.op {
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let contributions = self.adjoint(node, &g)?;
            for (var, contrib) in contributions {
                if !contrib.is_finite() {
                    return Err(FawnError::NonFinite { primitive: node.op.name() });
                }
                match &mut adj[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    let shape = self
                        .nodes
                        .iter()
                        .find(|n| matches!(n.op, Op::Leaf { param: Some(j) } if j == i))
                        .map_or((0, 0), |n| n.value.shape());
                    Matrix::zeros(shape.0, shape.1)
                })
            })
            .collect();
        Ok(GradientBundle { grads })
    }

    fn adjoint(&self, node: &Node, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::GaussianVariance { rho } => {
                vec![(*rho, g.zip_map(&node.value, |g, v| 2.0 * g * v))]
            }
            Op::BernoulliMean { logit, scale } => {
                let p = val(*logit).map(logistic);
                let s = val(*scale);
                let g_logit = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                    let p = p.get(i, j);
                    g.get(i, j) * s.get(i, j) * p * (1.0 - p)
                });
                let g_scale = g.zip_map(&p, |g, p| g * (p - 0.5));
                vec![(*logit, g_logit), (*scale, g_scale)]
            }
            Op::BernoulliVariance { logit, scale } => {
                let p = val(*logit).map(logistic);
                let s = val(*scale);
                let g_logit = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                    let (p, s) = (p.get(i, j), s.get(i, j));
                    g.get(i, j) * s * s * p * (1.0 - p) * (1.0 - 2.0 * p)
                });
                let g_scale = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                    let (p, s) = (p.get(i, j), s.get(i, j));
                    g.get(i, j) * 2.0 * p * (1.0 - p) * s
                });
                vec![(*logit, g_logit), (*scale, g_scale)]
            }
            Op::LinearMean { x, w, b } => vec![
                (*x, g.matmul_t(val(*w))),
                (*w, val(*x).t_matmul(g)),
                (*b, g.col_sums()),
            ],
            Op::LinearVariance { x_mean, x_var, w_mean, w_var, b_var } => {
                let (xm, xv, wm, wv) = (val(*x_mean), val(*x_var), val(*w_mean), val(*w_var));
                let w_second = wm.zip_map(wv, |m, v| m * m + v);
                let g_xm = g.matmul_t(wv).zip_map(xm, |a, m| 2.0 * a * m);
                let g_xv = g.matmul_t(&w_second);
                let g_wm = xv.t_matmul(g).zip_map(wm, |a, m| 2.0 * a * m);
                let second = xm.zip_map(xv, |m, v| m * m + v);
                let g_wv = second.t_matmul(g);
                vec![
                    (*x_mean, g_xm),
                    (*x_var, g_xv),
                    (*w_mean, g_wm),
                    (*w_var, g_wv),
                    (*b_var, g.col_sums()),
                ]
            }
            Op::CovDiag { x_mean, x_var, w_var, b_var } => {
                let (xm, xv, wv) = (val(*x_mean), val(*x_var), val(*w_var));
                let g_xv = g.matmul_t(wv);
                let g_xm = g_xv.zip_map(xm, |a, m| 2.0 * a * m);
                let second = xm.zip_map(xv, |m, v| m * m + v);
                vec![
                    (*x_mean, g_xm),
                    (*x_var, g_xv),
                    (*w_var, second.t_matmul(g)),
                    (*b_var, g.col_sums()),
                ]
            }
            Op::RectifierMean { mean, var } | Op::RectifierVariance { mean, var } => {
                let is_mean = matches!(node.op, Op::RectifierMean { .. });
                let (m, v) = (val(*mean), val(*var));
                let mut g_m = Matrix::zeros(m.rows(), m.cols());
                let mut g_v = Matrix::zeros(m.rows(), m.cols());
                let sign = if is_mean && self.fault == Some(PlantedFault::RectifierBackwardSign) {
                    -1.0
                } else {
                    1.0
                };
                for k in 0..m.len() {
                    let p = rectifier_partials(m.as_slice()[k], v.as_slice()[k]);
                    let gk = g.as_slice()[k];
                    let (dm, dv) = if is_mean { (p[0], p[1]) } else { (p[2], p[3]) };
                    g_m.as_mut_slice()[k] = sign * gk * dm;
                    g_v.as_mut_slice()[k] = sign * gk * dv;
                }
                vec![(*mean, g_m), (*var, g_v)]
            }
            Op::NoiseMean { mean, noise } => {
                let g_m = match noise.kind {
                    NoiseKind::Additive => g.clone(),
                    NoiseKind::Multiplicative => {
                        Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * noise.mean_at(j))
                    }
                };
                vec![(*mean, g_m)]
            }
            Op::NoiseVariance { mean, var, noise } => match noise.kind {
                NoiseKind::Additive => vec![(*var, g.clone())],
                NoiseKind::Multiplicative => {
                    let m = val(*mean);
                    let g_m = Matrix::from_fn(g.rows(), g.cols(), |i, j| 2.0 * g.get(i, j) * m.get(i, j) * noise.var_at(j));
                    let g_v = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let (em, ev) = (noise.mean_at(j), noise.var_at(j));
                        g.get(i, j) * (em * em + ev)
                    });
                    vec![(*mean, g_m), (*var, g_v)]
                }
            },
            Op::ExpectedNegLogLik { target, mean, var, hat_rho } => {
                let g = g.item();
                let (z, mu, v, hr) = (val(*target), val(*mean), val(*var), val(*hat_rho));
                let s2: Vec<f64> = hr.as_slice().iter().map(|r| (2.0 * r).exp()).collect();
                let mut g_mu = Matrix::zeros(mu.rows(), mu.cols());
                let mut g_v = Matrix::zeros(mu.rows(), mu.cols());
                let mut g_hr = Matrix::zeros(1, mu.cols());
                for b in 0..mu.rows() {
                    for o in 0..mu.cols() {
                        let d = z.get(b, o) - mu.get(b, o);
                        g_mu.set(b, o, -g * d / s2[o]);
                        g_v.set(b, o, g / (2.0 * s2[o]));
                        g_hr.add_at(0, o, g * (1.0 - (v.get(b, o) + d * d) / s2[o]));
                    }
                }
                vec![(*mean, g_mu), (*var, g_v), (*hat_rho, g_hr)]
            }
            Op::GaussianNll { target, mean, var, hat_rho } => {
                let g = g.item();
                let (z, mu, v, hr) = (val(*target), val(*mean), val(*var), val(*hat_rho));
                let s2: Vec<f64> = hr.as_slice().iter().map(|r| (2.0 * r).exp()).collect();
                let mut g_mu = Matrix::zeros(mu.rows(), mu.cols());
                let mut g_v = Matrix::zeros(mu.rows(), mu.cols());
                let mut g_hr = Matrix::zeros(1, mu.cols());
                for b in 0..mu.rows() {
                    for o in 0..mu.cols() {
                        let d = z.get(b, o) - mu.get(b, o);
                        let total = v.get(b, o) + s2[o];
                        let d_total = 0.5 / total - d * d / (2.0 * total * total);
                        g_mu.set(b, o, -g * d / total);
                        g_v.set(b, o, g * d_total);
                        g_hr.add_at(0, o, g * d_total * 2.0 * s2[o]);
                    }
                }
                vec![(*mean, g_mu), (*var, g_v), (*hat_rho, g_hr)]
            }
            Op::MvnNll { mean, diag_v, x_var, w_mean, hat_rho, .. } => {
                let g = g.item();
                let saved = node.saved.as_ref().expect("mvn node saves its factors");
                let (xv, wm, hr) = (val(*x_var), val(*w_mean), val(*hat_rho));
                let (batch, m) = (val(*mean).rows(), val(*mean).cols());
                let s2: Vec<f64> = hr.as_slice().iter().map(|r| (2.0 * r).exp()).collect();
                let mut g_mean = Matrix::zeros(batch, m);
                let mut g_diag = Matrix::zeros(batch, m);
                let mut g_xv = Matrix::zeros(batch, xv.cols());
                let mut g_w = Matrix::zeros(wm.rows(), m);
                let mut g_hr = Matrix::zeros(1, m);
                for b in 0..batch {
                    let p = &saved.precision[b];
                    let alpha = &saved.alpha[b];
                    // ∂L/∂C = ½(P − ααᵀ)
                    let gc = Matrix::from_fn(m, m, |o, q| 0.5 * g * (p.get(o, q) - alpha[o] * alpha[q]));
                    for o in 0..m {
                        g_mean.set(b, o, -g * alpha[o]);
                        g_diag.set(b, o, gc.get(o, o));
                        g_hr.add_at(0, o, gc.get(o, o) * 2.0 * s2[o]);
                    }
                    // W·G, one row per hidden unit
                    let wg = wm.matmul(&gc);
                    for i in 0..wm.rows() {
                        let row_w = wm.row(i);
                        let row_wg = wg.row(i);
                        let quad: f64 = row_w.iter().zip(row_wg).map(|(a, c)| a * c).sum();
                        g_xv.set(b, i, quad);
                        let scale = 2.0 * xv.get(b, i);
                        if scale != 0.0 {
                            for (acc, c) in g_w.row_mut(i).iter_mut().zip(row_wg) {
                                *acc += scale * c;
                            }
                        }
                    }
                }
                vec![
                    (*mean, g_mean),
                    (*diag_v, g_diag),
                    (*x_var, g_xv),
                    (*w_mean, g_w),
                    (*hat_rho, g_hr),
                ]
            }
            Op::Kl { mu, rho, prior_mu, prior_rho } => {
                let g = g.item();
                let (pm, pr) = (val(*prior_mu).item(), val(*prior_rho).item());
                let ps2 = (2.0 * pr).exp();
                let (m, r) = (val(*mu), val(*rho));
                let g_mu = m.map(|m| g * (m - pm) / ps2);
                let g_rho = r.map(|r| g * ((2.0 * r).exp() / ps2 - 1.0));
                let mut g_pm = 0.0;
                let mut g_pr = 0.0;
                for (&m, &r) in m.as_slice().iter().zip(r.as_slice()) {
                    let d = m - pm;
                    g_pm -= d / ps2;
                    g_pr += 1.0 - ((2.0 * r).exp() + d * d) / ps2;
                }
                vec![
                    (*mu, g_mu),
                    (*rho, g_rho),
                    (*prior_mu, Matrix::scalar(g * g_pm)),
                    (*prior_rho, Matrix::scalar(g * g_pr)),
                ]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { a, factor } => vec![(*a, g.scale(*factor))],
            Op::Sum { a } => {
                let (r, c) = val(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.item()))]
            }
            Op::Element { a, row, col } => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                out.set(*row, *col, g.item());
                vec![(*a, out)]
            }
        };
        Ok(out)
    }
}

/// Forward value of a primitive, plus anything saved for its adjoint.
fn evaluate<'a>(op: &Op, val: impl Fn(Var) -> &'a Matrix) -> Result<(Matrix, Option<MvnSaved>)> {
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::GaussianVariance { rho } => val(*rho).map(|r| (2.0 * r).exp()),
        Op::BernoulliMean { logit, scale } => {
            same_shape("bernoulli_mean", val(*logit), val(*scale))?;
            val(*logit).zip_map(val(*scale), |l, s| (logistic(l) - 0.5) * s)
        }
        Op::BernoulliVariance { logit, scale } => {
            same_shape("bernoulli_variance", val(*logit), val(*scale))?;
            val(*logit).zip_map(val(*scale), |l, s| {
                let p = logistic(l);
                p * (1.0 - p) * s * s
            })
        }
        Op::LinearMean { x, w, b } => {
            check_linear(val(*x), val(*w), val(*b))?;
            linear_mean_batch(val(*x), val(*w), val(*b))
        }
        Op::LinearVariance { x_mean, x_var, w_mean, w_var, b_var } => {
            same_shape("linear_variance x", val(*x_mean), val(*x_var))?;
            same_shape("linear_variance w", val(*w_mean), val(*w_var))?;
            check_linear(val(*x_mean), val(*w_mean), val(*b_var))?;
            linear_var_batch(val(*x_mean), val(*x_var), val(*w_mean), val(*w_var), val(*b_var))
        }
        Op::CovDiag { x_mean, x_var, w_var, b_var } => {
            same_shape("covariance_diagonal x", val(*x_mean), val(*x_var))?;
            check_linear(val(*x_mean), val(*w_var), val(*b_var))?;
            cov_diag_batch(val(*x_mean), val(*x_var), val(*w_var), val(*b_var))
        }
        Op::RectifierMean { mean, var } => {
            same_shape("rectifier", val(*mean), val(*var))?;
            rectifier_batch(val(*mean), val(*var)).0
        }
        Op::RectifierVariance { mean, var } => {
            same_shape("rectifier", val(*mean), val(*var))?;
            rectifier_batch(val(*mean), val(*var)).1
        }
        Op::NoiseMean { mean, noise } => {
            let zeros = Matrix::zeros(val(*mean).rows(), val(*mean).cols());
            noise_batch(val(*mean), &zeros, noise).0
        }
        Op::NoiseVariance { mean, var, noise } => {
            same_shape("noise", val(*mean), val(*var))?;
            noise_batch(val(*mean), val(*var), noise).1
        }
        Op::ExpectedNegLogLik { target, mean, var, hat_rho } => {
            let (z, mu, v, hr) = (val(*target), val(*mean), val(*var), val(*hat_rho));
            check_loss_shapes(z, mu, v, hr)?;
            let mut total = 0.0;
            for b in 0..mu.rows() {
                for o in 0..mu.cols() {
                    let s2 = (2.0 * hr.get(0, o)).exp();
                    let d = z.get(b, o) - mu.get(b, o);
                    total += (v.get(b, o) + d * d) / (2.0 * s2) + hr.get(0, o) + HALF_LN_2PI;
                }
            }
            Matrix::scalar(total)
        }
        Op::GaussianNll { target, mean, var, hat_rho } => {
            let (z, mu, v, hr) = (val(*target), val(*mean), val(*var), val(*hat_rho));
            check_loss_shapes(z, mu, v, hr)?;
            let mut total = 0.0;
            for b in 0..mu.rows() {
                for o in 0..mu.cols() {
                    let s2 = v.get(b, o) + (2.0 * hr.get(0, o)).exp();
                    let d = z.get(b, o) - mu.get(b, o);
                    total += 0.5 * s2.ln() + HALF_LN_2PI + d * d / (2.0 * s2);
                }
            }
            Matrix::scalar(total)
        }
        Op::MvnNll { target, mean, diag_v, x_var, w_mean, hat_rho } => {
            let (z, mu, dv, xv, wm, hr) = (
                val(*target),
                val(*mean),
                val(*diag_v),
                val(*x_var),
                val(*w_mean),
                val(*hat_rho),
            );
            check_loss_shapes(z, mu, dv, hr)?;
            if xv.rows() != mu.rows() || wm.rows() != xv.cols() || wm.cols() != mu.cols() {
                return Err(dim_err(
                    "mvn_nll rank-one factors",
                    format!("x_var {}x{}, w {}x{}", mu.rows(), wm.rows(), xv.cols(), mu.cols()),
                    format!("x_var {:?}, w {:?}", xv.shape(), wm.shape()),
                ));
            }
            let s2: Vec<f64> = hr.as_slice().iter().map(|r| (2.0 * r).exp()).collect();
            let mut total = 0.0;
            let mut saved = MvnSaved {
                precision: Vec::with_capacity(mu.rows()),
                alpha: Vec::with_capacity(mu.rows()),
            };
            for b in 0..mu.rows() {
                let diag: Vec<f64> = dv.row(b).iter().zip(&s2).map(|(d, s)| d + s).collect();
                let terms = crate::covariance::rank_one_terms(xv.row(b), wm);
                let (precision, logdet) = match recursive_precision_logdet(&diag, &terms) {
                    Err(FawnError::Degenerate(_)) => {
                        let dense = crate::covariance::CovariantOutput {
                            mean: mu.row(b).to_vec(),
                            diag_v: diag.clone(),
                            rank_one_terms: terms,
                        }
                        .dense();
                        dense_precision_logdet(&dense)?
                    }
                    other => other?,
                };
                let (nll, alpha) = mvn_nll_from_parts(z.row(b), mu.row(b), &precision, logdet);
                total += nll;
                saved.precision.push(precision);
                saved.alpha.push(alpha);
            }
            return Ok((Matrix::scalar(total), Some(saved)));
        }
        Op::Kl { mu, rho, prior_mu, prior_rho } => {
            same_shape("kl", val(*mu), val(*rho))?;
            let (pm, pr) = (val(*prior_mu).item(), val(*prior_rho).item());
            let ps2 = (2.0 * pr).exp();
            let total: f64 = val(*mu)
                .as_slice()
                .iter()
                .zip(val(*rho).as_slice())
                .map(|(&m, &r)| pr - r + ((2.0 * r).exp() + (m - pm).powi(2)) / (2.0 * ps2) - 0.5)
                .sum();
            Matrix::scalar(total)
        }
        Op::Add { a, b } => {
            same_shape("add", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x + y)
        }
        Op::Scale { a, factor } => val(*a).scale(*factor),
        Op::Sum { a } => Matrix::scalar(val(*a).sum()),
        Op::Element { a, row, col } => {
            let m = val(*a);
            if *row >= m.rows() || *col >= m.cols() {
                return Err(dim_err("element", format!("{:?}", m.shape()), format!("({row}, {col})")));
            }
            Matrix::scalar(m.get(*row, *col))
        }
    };
    Ok((out, None))
}

fn check_linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(dim_err("linear input width", w.rows(), x.cols()));
    }
    if b.shape() != (1, w.cols()) {
        return Err(dim_err("linear bias", format!("(1, {})", w.cols()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn check_loss_shapes(z: &Matrix, mean: &Matrix, var: &Matrix, hat_rho: &Matrix) -> Result<()> {
    same_shape("loss target", mean, z)?;
    same_shape("loss variance", mean, var)?;
    if hat_rho.shape() != (1, mean.cols()) {
        return Err(dim_err("loss noise", format!("(1, {})", mean.cols()), format!("{:?}", hat_rho.shape())));
    }
    Ok(())
}
