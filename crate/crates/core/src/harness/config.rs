//! Training configuration read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: Option<u64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub augment: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Warm start from matching blocks of an earlier checkpoint.
    pub init_checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Run validation every this many epochs (the last epoch is always validated).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: None,
            batch_size: 64,
            epochs: 36,
            lr: 1e-4,
            lr_decay_epochs: vec![24, 30],
            lr_decay_factor: 5.0,
            augment: true,
            max_steps: None,
            init_checkpoint: None,
            data_dir: None,
            out_dir: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return bad("batch_size, epochs and validate_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be >= 1, got {}", self.lr_decay_factor));
        }
        if let Some(&e) = self.lr_decay_epochs.iter().find(|&&e| e == 0 || e >= self.epochs) {
            return bad(format!("decay epoch {e} must lie in 1..{}", self.epochs));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::InvalidArgument("a seed is required (--seed or `seed` in the config)".into()))
    }

    /// Learning rate in force during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_decay_epochs.iter().filter(|&&e| e < epoch).count();
        if n == 0 {
            self.lr
        } else {
            self.lr / self.lr_decay_factor.powi(n as i32)
        }
    }
}
