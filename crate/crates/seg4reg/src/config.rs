//! Run configuration: one strict nested JSON document covering data,
//! both networks, and the training schedule. Unknown keys are rejected;
//! the content hash is computed over the resolved values, so reordering
//! keys in the file never changes it.

use std::path::{Path, PathBuf};

use crate::data::AugmentationConfig;
use crate::domain::Fnv1a;
use crate::error::{Error, Result};
use crate::regnet::{InputMode, RegNetConfig};
use crate::segnet::SegNetConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_dir: PathBuf,
    pub test_dir: Option<PathBuf>,
    /// Network input size (rows, cols).
    pub target_size: (usize, usize),
    /// Optional geometric augmentation for segmentation training stages.
    pub augment: Option<AugmentationConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data/train"),
            test_dir: None,
            target_size: (512, 256),
            augment: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageParams {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            epochs: 0,
            lr: 1e-4,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Weight of the CAM-consistency term in stages 2 and 5.
    pub w_ar: f64,
    /// Deployed regressor input composition.
    pub input_mode: InputMode,
    /// Re-initialize the regressor at stage 5 instead of continuing from the
    /// stage-2 optimum.
    pub reinit_stage5: bool,
    pub out_dir: PathBuf,
    /// Exactly five stages, in schedule order.
    pub stages: Vec<StageParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            w_ar: 1.0,
            input_mode: InputMode::ImageMask,
            reinit_stage5: false,
            out_dir: PathBuf::from("runs/default"),
            stages: vec![
                StageParams {
                    epochs: 90,
                    lr: 1e-4,
                    weight_decay: 1e-5,
                },
                StageParams {
                    epochs: 200,
                    lr: 1e-3,
                    weight_decay: 1e-5,
                },
                StageParams {
                    epochs: 30,
                    lr: 1e-4,
                    weight_decay: 1e-5,
                },
                StageParams {
                    epochs: 30,
                    lr: 1e-4,
                    weight_decay: 1e-5,
                },
                StageParams {
                    epochs: 200,
                    lr: 1e-3,
                    weight_decay: 1e-5,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub segnet: SegNetConfig,
    pub regnet: RegNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.segnet.validate()?;
        self.regnet.validate()?;
        if self.train.stages.len() != 5 {
            return Err(Error::InvalidInput(format!(
                "schedule must have exactly 5 stages, got {}",
                self.train.stages.len()
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if self.train.w_ar < 0.0 {
            return Err(Error::InvalidInput("w_ar must be non-negative".into()));
        }
        if self.data.target_size.0 < 8 || self.data.target_size.1 < 8 {
            return Err(Error::InvalidInput(
                "target size must be at least 8x8".into(),
            ));
        }
        if let Some(aug) = &self.data.augment {
            aug.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Malformed(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    /// Content hash of the resolved configuration. Input key order is
    /// irrelevant because hashing happens after parsing into the typed
    /// structure.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization");
        let mut h = Fnv1a::new();
        h.update(canonical.as_bytes());
        format!("cfg1:{:016x}", h.finish())
    }
}
