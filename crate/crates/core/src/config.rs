//! Run configuration: a TOML file with command-line overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkConfig;
use crate::error::{FawnError, Result};
use crate::layers::{OutputMode, WeightFamily};
use crate::losses::{check_objective, Objective};
use crate::optim::TrainConfig;

pub const DEFAULT_HIDDEN: usize = 50;
pub const DEFAULT_SPLITS: usize = 10;

/// Hidden widths given either as one number or as a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hidden {
    One(usize),
    Many(Vec<usize>),
}

impl Hidden {
    pub fn widths(&self) -> Vec<usize> {
        match self {
            Hidden::One(w) => vec![*w],
            Hidden::Many(ws) => ws.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest names or CSV paths.
    pub datasets: Vec<String>,
    pub objective: Objective,
    pub family: WeightFamily,
    pub covariance: OutputMode,
    pub hidden: Hidden,
    pub splits: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datasets: vec!["boston".into()],
            objective: Objective::Ropd,
            family: WeightFamily::Gaussian,
            covariance: OutputMode::Diagonal,
            hidden: Hidden::One(DEFAULT_HIDDEN),
            splits: DEFAULT_SPLITS,
            seed: 0,
            out: None,
            train: TrainConfig::default(),
        }
    }
}

/// Values given on the command line; `None` keeps the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub datasets: Option<Vec<String>>,
    pub objective: Option<Objective>,
    pub family: Option<WeightFamily>,
    pub covariance: Option<OutputMode>,
    pub hidden: Option<Vec<usize>>,
    pub splits: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FawnError::InvalidInput(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn apply(mut self, o: Overrides) -> Self {
        if let Some(v) = o.datasets {
            self.datasets = v;
        }
        if let Some(v) = o.objective {
            self.objective = v;
        }
        if let Some(v) = o.family {
            self.family = v;
        }
        if let Some(v) = o.covariance {
            self.covariance = v;
        }
        if let Some(v) = o.hidden {
            self.hidden = Hidden::Many(v);
        }
        if let Some(v) = o.splits {
            self.splits = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if o.out.is_some() {
            self.out = o.out;
        }
        if o.max_epochs.is_some() {
            self.train.max_epochs = o.max_epochs;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_objective(self.objective, self.family, self.covariance)?;
        if self.hidden.widths().contains(&0) {
            return Err(FawnError::InvalidInput("hidden widths must be positive".into()));
        }
        if self.splits == 0 {
            return Err(FawnError::InvalidInput("splits must be at least 1".into()));
        }
        if self.datasets.is_empty() {
            return Err(FawnError::InvalidInput("no dataset given".into()));
        }
        self.train.validate()
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            objective: self.objective,
            family: self.family,
            output_mode: self.covariance,
            hidden: self.hidden.widths(),
            splits: self.splits,
            seed: self.seed,
            train: self.train.clone(),
        }
    }
}
