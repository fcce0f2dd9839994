//! Trainable state and its on-disk checkpoint.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StandardizationStats;
use crate::error::{FawnError, Result};
use crate::layers::{self, NetworkSpec, WeightLayer, INIT_MEAN_STD};
use crate::losses::{LikelihoodParams, PriorParams};
use crate::optim::AdamState;
use crate::tensor::Matrix;

/// Magic string identifying checkpoint documents.
pub const CHECKPOINT_MAGIC: &str = "FAWN1";

/// Network layers together with the shared prior and observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: NetworkSpec,
    pub layers: Vec<WeightLayer>,
    pub prior: PriorParams,
    pub likelihood: LikelihoodParams,
}

impl ModelState {
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layers::init_layers(&spec, &mut rng)?;
        let outputs = spec.output_width();
        Ok(Self {
            spec,
            layers,
            prior: PriorParams::new(0.0, INIT_MEAN_STD)?,
            likelihood: LikelihoodParams::new(&vec![1.0; outputs])?,
        })
    }

    /// Every trainable tensor in a fixed order: four per layer, then the
    /// prior mean and log-scale, then the observation log-noise.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(WeightLayer::tensors).collect();
        out.push(&self.prior.tilde_mu);
        out.push(&self.prior.tilde_rho);
        out.push(&self.likelihood.hat_rho);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.layers.iter_mut().flat_map(WeightLayer::tensors_mut).collect();
        out.push(&mut self.prior.tilde_mu);
        out.push(&mut self.prior.tilde_rho);
        out.push(&mut self.likelihood.hat_rho);
        out
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 4 + 3
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn prior_index(&self) -> usize {
        self.layers.len() * 4
    }
}

/// A serialised model plus whatever is needed to use it on raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub model: ModelState,
    #[serde(default)]
    pub standardization: Option<StandardizationStats>,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: ModelState) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.to_string(),
            model,
            standardization: None,
            optimizer: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("magic").and_then(|m| m.as_str()) {
            Some(CHECKPOINT_MAGIC) => {}
            Some(other) => return Err(FawnError::Checkpoint(format!("unsupported magic `{other}`"))),
            None => return Err(FawnError::Checkpoint("missing magic string".into())),
        }
        let checkpoint: Self = serde_json::from_value(value)?;
        layers::check_layers(&checkpoint.model.spec, &checkpoint.model.layers)?;
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
