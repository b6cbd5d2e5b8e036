//! TOML run configuration. Every section has defaults, unknown keys are
//! rejected, and the fully resolved configuration is written next to the
//! outputs of every command.

use std::path::{Path, PathBuf};

use rgbd_diffusion::autoencoder::{AeConfig, TrainOptions};
use rgbd_diffusion::diffusion::{DiffusionConfig, DiffusionTrainOptions, SamplerConfig};
use rgbd_diffusion::eval::EvalConfig;
use rgbd_diffusion::pano::PanoPrepConfig;
use rgbd_diffusion::rgbd::DEFAULT_DEPTH_BITS;
use rgbd_diffusion::sr::{DegradationRecipe, DepthLrKind};
use rgbd_diffusion::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const OUTPUT_ROOT_ENV: &str = "RGBD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanoSection {
    pub prep: PanoPrepConfig,
    /// Fraction of source HDRs held out for validation.
    pub val_fraction: f64,
    /// Output height for `sample-pano`.
    pub sample_height: usize,
}

impl Default for PanoSection {
    fn default() -> Self {
        Self {
            prep: PanoPrepConfig::default(),
            val_fraction: 322.0 / (7828.0 + 322.0),
            sample_height: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrSection {
    pub depth_lr: DepthLrKind,
    /// Depth provider for the `d` strategy and for panorama preparation.
    pub depth_estimator: String,
}

impl Default for SrSection {
    fn default() -> Self {
        Self {
            depth_lr: DepthLrKind::Bicubic,
            depth_estimator: "luma".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub depth_bits: u8,
    pub autoencoder: AeConfig,
    pub ae_train: TrainOptions,
    pub diffusion: DiffusionConfig,
    pub diffusion_train: DiffusionTrainOptions,
    pub sampler: SamplerConfig,
    pub degradation: DegradationRecipe,
    pub sr: SrSection,
    pub pano: PanoSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            depth_bits: DEFAULT_DEPTH_BITS,
            autoencoder: AeConfig::default(),
            ae_train: TrainOptions::default(),
            diffusion: DiffusionConfig::default(),
            diffusion_train: DiffusionTrainOptions::default(),
            sampler: SamplerConfig::default(),
            degradation: DegradationRecipe::default(),
            sr: SrSection::default(),
            pano: PanoSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "unsupported device {:?}; only \"cpu\" is available",
                self.device
            )));
        }
        if !(1..=16).contains(&self.depth_bits) {
            return Err(Error::Config(format!(
                "depth_bits must be in 1..=16, got {}",
                self.depth_bits
            )));
        }
        self.autoencoder.validate()?;
        self.diffusion.validate()?;
        self.degradation.validate()?;
        self.pano.prep.validate()?;
        if !(0.0..1.0).contains(&self.pano.val_fraction) {
            return Err(Error::Config("pano.val_fraction must be in [0, 1)".into()));
        }
        self.eval.validate()?;
        if self.ae_train.batch_size == 0 || self.diffusion_train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.diffusion_train.cond_dropout) {
            return Err(Error::Config("diffusion_train.cond_dropout must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
