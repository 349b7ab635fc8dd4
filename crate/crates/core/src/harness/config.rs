use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::dsrecon::DensifyParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sim::SceneSpec;

/// Where training and evaluation scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base seed of generated scenes; scene `i` uses [`super::scene_seed`].
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Frame of each sequence used as network input.
    pub frame: usize,
    /// Directory of sequence files written by `gen`. When unset, scenes are
    /// simulated in memory.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, train_scenes: 16, eval_scenes: 4, frame: 2, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub densify: DensifyParams,
    pub optimizer: AdamConfig,
    /// Seeds parameter initialization, sample order and negative subsampling.
    pub seed: u64,
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub data: DataConfig,
    /// Writes an extra checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scene: SceneSpec::default(),
            densify: DensifyParams::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
            epochs: 1,
            batch_size: 4,
            data: DataConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.densify.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.data.frame >= self.scene.frames {
            return Err(Error::Config(format!(
                "data.frame {} out of range for {} frames",
                self.data.frame, self.scene.frames
            )));
        }
        if self.model.encoder.in_channels != 5 {
            return Err(Error::Config(format!(
                "encoder.in_channels must be 5 (x, y, z, intensity, timestamp), got {}",
                self.model.encoder.in_channels
            )));
        }
        Ok(())
    }

    /// Reads and validates a JSON config.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
