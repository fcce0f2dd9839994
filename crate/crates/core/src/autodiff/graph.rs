//! Records a model's training objective on a [`Tape`].

use crate::error::{dim_err, FawnError, Result};
use crate::layers::{OutputMode, Transfer, WeightFamily, WeightLayer};
use crate::losses::{check_objective, Objective};
use crate::model::ModelState;
use crate::tensor::Matrix;

use super::tape::{GradientBundle, PlantedFault, Tape, Var};

struct LayerVars {
    w_mean: Var,
    w_var: Var,
    b_mean: Var,
    b_var: Var,
    /// `(mu, rho)` pairs that the KL term regularises.
    kl_pairs: Vec<(Var, Var)>,
}

/// A recorded objective and the node holding its value.
pub struct RecordedLoss {
    pub tape: Tape,
    pub loss: Var,
}

impl RecordedLoss {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    pub fn backward(&self) -> Result<GradientBundle> {
        self.tape.backward(self.loss)
    }
}

fn layer_vars(tape: &mut Tape, layer: &WeightLayer, first: usize) -> Result<LayerVars> {
    let [a, b, c, d] = layer.tensors();
    let (a, b) = (tape.param(a.clone(), first), tape.param(b.clone(), first + 1));
    let b_mean = tape.param(c.clone(), first + 2);
    let bias_rho = tape.param(d.clone(), first + 3);
    let b_var = tape.gaussian_variance(bias_rho)?;
    Ok(match layer {
        WeightLayer::Gaussian(_) => LayerVars {
            w_mean: a,
            w_var: tape.gaussian_variance(b)?,
            b_mean,
            b_var,
            kl_pairs: vec![(a, b), (b_mean, bias_rho)],
        },
        WeightLayer::Bernoulli(_) => LayerVars {
            w_mean: tape.bernoulli_mean(a, b)?,
            w_var: tape.bernoulli_variance(a, b)?,
            b_mean,
            b_var,
            kl_pairs: vec![(b_mean, bias_rho)],
        },
    })
}

/// Builds the minibatch objective of `model` on a fresh tape.
///
/// The parameter indices on the tape follow [`ModelState::tensors`], so
/// the resulting gradients line up with the model's tensors.
pub fn record_loss(
    model: &ModelState,
    objective: Objective,
    x: &Matrix,
    z: &Matrix,
    n_total: usize,
    fault: Option<PlantedFault>,
) -> Result<RecordedLoss> {
    let spec = &model.spec;
    check_objective(objective, spec.weight_family, spec.output_mode)?;
    crate::layers::check_layers(spec, &model.layers)?;
    if x.cols() != spec.input_width() {
        return Err(dim_err("network input", spec.input_width(), x.cols()));
    }
    if z.cols() != spec.output_width() || z.rows() != x.rows() {
        return Err(dim_err(
            "targets",
            format!("({}, {})", x.rows(), spec.output_width()),
            format!("{:?}", z.shape()),
        ));
    }
    if x.rows() == 0 || n_total < x.rows() {
        return Err(FawnError::InvalidInput(format!(
            "batch of {} rows from a training set of {n_total}",
            x.rows()
        )));
    }

    let mut tape = Tape::with_fault(fault);
    let layers: Vec<LayerVars> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| layer_vars(&mut tape, layer, 4 * i))
        .collect::<Result<_>>()?;
    let p = model.prior_index();
    let prior_mu = tape.param(model.prior.tilde_mu.clone(), p);
    let prior_rho = tape.param(model.prior.tilde_rho.clone(), p + 1);
    let hat_rho = tape.param(model.likelihood.hat_rho.clone(), p + 2);

    let mut mean = tape.constant(x.clone());
    let mut var = tape.constant(Matrix::zeros(x.rows(), x.cols()));
    if let Some(noise) = &spec.input_noise {
        (mean, var) = tape.noise(mean, var, noise)?;
    }
    let (last, hidden) = layers.split_last().expect("validated spec has a layer");
    for (lv, transfer) in hidden.iter().zip(&spec.transfers) {
        let a_mean = tape.linear_mean(mean, lv.w_mean, lv.b_mean)?;
        let a_var = tape.linear_variance(mean, var, lv.w_mean, lv.w_var, lv.b_var)?;
        (mean, var) = match transfer {
            Transfer::Rectifier => tape.rectifier(a_mean, a_var)?,
            Transfer::Identity => (a_mean, a_var),
        };
    }

    let target = tape.constant(z.clone());
    let out_mean = tape.linear_mean(mean, last.w_mean, last.b_mean)?;
    let data = match spec.output_mode {
        OutputMode::Diagonal => {
            let out_var = tape.linear_variance(mean, var, last.w_mean, last.w_var, last.b_var)?;
            match objective {
                Objective::Vi => tape.expected_neg_loglik(target, out_mean, out_var, hat_rho)?,
                Objective::Ropd => tape.gaussian_nll(target, out_mean, out_var, hat_rho)?,
            }
        }
        OutputMode::FullCovariance => {
            let diag = tape.cov_diag(mean, var, last.w_var, last.b_var)?;
            tape.mvn_nll(target, out_mean, diag, var, last.w_mean, hat_rho)?
        }
    };

    let loss = match spec.weight_family {
        WeightFamily::Bernoulli => data,
        WeightFamily::Gaussian => {
            let mut kl: Option<Var> = None;
            for &(mu, rho) in layers.iter().flat_map(|l| &l.kl_pairs) {
                let term = tape.kl(mu, rho, prior_mu, prior_rho)?;
                kl = Some(match kl {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            let kl = kl.expect("at least one layer");
            let scaled = tape.scale(kl, x.rows() as f64 / n_total as f64)?;
            tape.add(data, scaled)?
        }
    };
    Ok(RecordedLoss { tape, loss })
}

/// Minibatch objective and its gradient with respect to every model tensor.
pub fn loss_and_grad(
    model: &ModelState,
    objective: Objective,
    x: &Matrix,
    z: &Matrix,
    n_total: usize,
) -> Result<(f64, GradientBundle)> {
    let recorded = record_loss(model, objective, x, z, n_total, None)?;
    let grads = recorded.backward()?;
    Ok((recorded.value(), grads))
}
