//! Latent diffusion: noise schedule, conditional denoiser, training
//! objective, samplers and text conditioning.

pub mod sampler;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

pub use sampler::{
    ddim_timesteps, initial_noise, sample, sample_ddim, sample_ddim_from, sample_ddpm, sample_ddpm_from, Guided,
    SamplerConfig, SamplerKind, StepHook,
};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
pub use text::{embed_text, HashTextEncoder, TextCondition, TextEncoder, TextEncoderConfig};
pub use train::{train_denoiser, train_denoiser_with, training_loss, DiffusionExample, DiffusionTrainOptions};
pub use unet::{denoise_step, DenoiserConfig, NoisePredictor, UNet};

use crate::error::{Error, Result};
use crate::nn::Checkpoint;

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub text: TextEncoderConfig,
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.schedule.build()?;
        if self.text.context_dim != self.denoiser.context_dim {
            return Err(Error::Config(format!(
                "text context_dim {} != denoiser context_dim {}",
                self.text.context_dim, self.denoiser.context_dim
            )));
        }
        Ok(())
    }
}

/// A denoiser together with the schedule and text encoder it was trained
/// with.
pub struct LatentDiffusion {
    pub config: DiffusionConfig,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub text: HashTextEncoder,
}

impl LatentDiffusion {
    pub fn new(config: DiffusionConfig, init_seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            unet: UNet::new(config.denoiser.clone(), init_seed, dtype, device)?,
            schedule: config.schedule.build()?,
            text: HashTextEncoder::new(config.text.clone())?,
            config,
        })
    }

    pub fn to_checkpoint(&self, step: usize, loss_log: Vec<f32>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            step,
            loss_log,
            tensors: self.unet.params().export()?.into_iter().collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DiffusionConfig = serde_json::from_value(ck.config.clone())?;
        let model = Self::new(config, 0, DType::F32, device)?;
        model.unet.import(&ck.tensor_map())?;
        Ok(model)
    }
}
