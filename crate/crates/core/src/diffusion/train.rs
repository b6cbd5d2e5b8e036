use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::{NoisePredictor, UNet};
use crate::autoencoder::{adam, batch_indices, TrainHook};
use crate::error::{Error, Result};
use crate::seed;

/// Epsilon-prediction objective: draws `t ~ U{1..T}` and `eps ~ N(0, I)`
/// per batch item from `seed`, and returns `mean((eps - eps_hat)^2)`.
pub fn training_loss(
    model: &dyn NoisePredictor,
    z0: &Tensor,
    context: &Tensor,
    extra: Option<&Tensor>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let mut r = seed::rng(seed::substream(seed, "t"));
    let ts: Vec<usize> = (0..b).map(|_| r.random_range(1..=sched.num_timesteps())).collect();
    let eps = Tensor::from_vec(
        seed::normal_vec(seed::substream(seed, "eps"), z0.elem_count()),
        z0.shape(),
        z0.device(),
    )?
    .to_dtype(z0.dtype())?;
    let z_t = sched.add_noise_batch(z0, &ts, &eps)?;
    let eps_hat = model.predict(&z_t, &ts, context, extra)?;
    let eps = eps.to_dtype(eps_hat.dtype())?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// One training tuple: an encoded target latent, its caption tokens and,
/// for super-resolution, the low-resolution conditioning latent.
#[derive(Debug, Clone)]
pub struct DiffusionExample {
    pub z0: Tensor,
    pub context: Tensor,
    pub extra: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a caption with the unconditional embedding.
    pub cond_dropout: f64,
}

impl Default for DiffusionTrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
        }
    }
}

pub fn train_denoiser(
    model: &UNet,
    data: &[DiffusionExample],
    uncond: &Tensor,
    opts: &DiffusionTrainOptions,
    sched: &NoiseSchedule,
    seed: u64,
    start_step: usize,
) -> Result<Vec<f32>> {
    train_denoiser_with(model, data, uncond, opts, sched, seed, start_step, None)
}

/// [`train_denoiser`] with a per-step hook; see [`TrainHook`].
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser_with(
    model: &UNet,
    data: &[DiffusionExample],
    uncond: &Tensor,
    opts: &DiffusionTrainOptions,
    sched: &NoiseSchedule,
    seed: u64,
    start_step: usize,
    mut hook: TrainHook,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Data("diffusion training set is empty".into()));
    }
    if opts.batch_size == 0 || !(0.0..=1.0).contains(&opts.cond_dropout) {
        return Err(Error::Config(
            "batch_size must be positive and cond_dropout in [0,1]".into(),
        ));
    }
    let needs_extra = model.in_channels() == 8;
    if data.iter().any(|d| d.extra.is_some() != needs_extra) {
        return Err(Error::Config(format!(
            "a {}-channel denoiser {} conditioning latents",
            model.in_channels(),
            if needs_extra { "requires" } else { "rejects" }
        )));
    }
    let dtype = model.params().dtype();
    let mut opt = adam(model.params().vars(), opts.learning_rate)?;
    let mut log = Vec::with_capacity(opts.steps);
    for step in start_step..start_step + opts.steps {
        let step_seed = seed::indexed(seed, "step", step as u64);
        let idx = batch_indices(data.len(), opts.batch_size, seed::substream(step_seed, "batch"));
        let mut drop = seed::rng(seed::substream(step_seed, "dropout"));
        let z0 = Tensor::stack(&idx.iter().map(|&i| &data[i].z0).collect::<Vec<_>>(), 0)?.to_dtype(dtype)?;
        let ctx: Vec<Tensor> = idx
            .iter()
            .map(|&i| {
                if drop.random::<f64>() < opts.cond_dropout {
                    uncond.clone()
                } else {
                    data[i].context.clone()
                }
            })
            .collect();
        let ctx = Tensor::stack(&ctx, 0)?.to_dtype(dtype)?;
        let extra = if needs_extra {
            let e: Vec<&Tensor> = idx.iter().map(|&i| data[i].extra.as_ref().expect("checked")).collect();
            Some(Tensor::stack(&e, 0)?.to_dtype(dtype)?)
        } else {
            None
        };
        let loss = training_loss(
            model,
            &z0,
            &ctx,
            extra.as_ref(),
            sched,
            seed::substream(step_seed, "loss"),
        )?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("diffusion loss diverged at step {step}: {v}")));
        }
        opt.backward_step(&loss)?;
        log::debug!("diffusion step {step} loss {v:.6}");
        log.push(v as f32);
        if let Some(h) = hook.as_mut() {
            if !h(step, v as f32) {
                break;
            }
        }
    }
    Ok(log)
}
