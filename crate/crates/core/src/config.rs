//! Experiment configuration, read from TOML.
//!
//! Every section is optional; missing keys take the defaults below.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/default"
//!
//! [dataset]      # DatasetSpec
//! static_classes = 2
//! motion_classes = 2
//! frames = 8
//! noise = 0.05
//!
//! [model]        # NetConfig
//! widths = [8, 8, 16, 16]
//!
//! [selection]    # SelectionConfig
//! widths = [16, 32]
//!
//! [train]        # TrainConfig
//! batch_size = 32
//!
//! [reward]       # RewardConfig
//! gamma = 1.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::selection::{RewardConfig, SelectionConfig, SelectionSpec};
use crate::trainer::TrainConfig;
use crate::video_net::{NetConfig, NetSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation, initialisation and training.
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetSpec,
    pub model: NetConfig,
    pub selection: SelectionConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            dataset: DatasetSpec::default(),
            model: NetConfig::default(),
            selection: SelectionConfig::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the run seed; the training seed follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.reward.validate()?;
        self.net_spec()?;
        self.selection_spec()?;
        Ok(())
    }

    pub fn net_spec(&self) -> Result<NetSpec> {
        let d = &self.dataset;
        NetSpec::from_config(
            &self.model,
            d.num_classes(),
            d.frames,
            d.channels,
            d.height,
            d.width,
        )
    }

    pub fn selection_spec(&self) -> Result<SelectionSpec> {
        let d = &self.dataset;
        let k = self.net_spec()?.num_temporal();
        SelectionSpec::new(&self.selection, d.frames, k, d.channels, d.height, d.width)
    }
}
