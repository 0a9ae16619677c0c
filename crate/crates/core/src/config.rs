//! Model dimensions and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanError};
use crate::evaluation::Variant;
use crate::objective::MarginConfig;

/// Architecture sizes. Defaults are desk scale; the full-size values
/// (`embed_dim = 300`, `joint_dim = 1024`) are reachable through config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 8.
    pub image_size: usize,
    /// Channels of the three saliency backbone stages.
    pub backbone_channels: [usize; 3],
    /// Output width of both feature-fusion branches.
    pub fusion_width: usize,
    /// Hidden channels inside the residual refinement function.
    pub rrb_hidden: usize,
    /// Channels of the first two feature-encoder stages.
    pub encoder_channels: [usize; 2],
    /// Region feature dimension `d`.
    pub feature_dim: usize,
    /// Joint space dimension `k` (also the GRU hidden size).
    pub joint_dim: usize,
    pub embed_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            backbone_channels: [8, 16, 32],
            fusion_width: 16,
            rrb_hidden: 8,
            encoder_channels: [8, 16],
            feature_dim: 32,
            joint_dim: 64,
            embed_dim: 32,
            max_len: 16,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions for finite-difference suites.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            backbone_channels: [2, 3, 4],
            fusion_width: 3,
            rrb_hidden: 2,
            encoder_channels: [2, 3],
            feature_dim: 4,
            joint_dim: 5,
            embed_dim: 3,
            max_len: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(SanError::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        let dims = [
            self.fusion_width,
            self.rrb_hidden,
            self.feature_dim,
            self.joint_dim,
            self.embed_dim,
            self.max_len,
        ];
        if dims.contains(&0)
            || self.backbone_channels.contains(&0)
            || self.encoder_channels.contains(&0)
        {
            return Err(SanError::Config("all model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Side of the region grid (`X = Y`).
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 0.1,
            batch: 16,
            iterations: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 0.001,
            batch: 8,
            epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub loss: MarginConfig,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            loss: MarginConfig::default(),
            variant: Variant::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.stage1.lr >= 0.0) || !(self.stage2.lr >= 0.0) {
            return Err(SanError::Config("learning rates must be non-negative".into()));
        }
        if self.stage1.batch == 0 {
            return Err(SanError::Config("stage-1 batch must be positive".into()));
        }
        if self.stage2.batch < 2 {
            return Err(SanError::Config(
                "stage-2 batch must be at least 2 so every pair has negatives".into(),
            ));
        }
        Ok(())
    }
}
