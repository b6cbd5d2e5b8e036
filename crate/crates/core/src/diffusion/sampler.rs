//! Ancestral (DDPM) and implicit (DDIM) samplers with classifier-free
//! guidance.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::text::TextCondition;
use super::unet::NoisePredictor;
use crate::autoencoder::Latent;
use crate::error::{Error, Result};
use crate::nn::check_finite;
use crate::seed;

/// A noise predictor bound to its conditioning for one sampling run.
pub struct Guided<'a> {
    model: &'a dyn NoisePredictor,
    cond: Tensor,
    uncond: Option<Tensor>,
    extra: Option<Tensor>,
    guidance_scale: f64,
}

impl<'a> Guided<'a> {
    /// `cond` is repeated over a batch of `batch` latents.
    pub fn new(model: &'a dyn NoisePredictor, cond: &TextCondition, batch: usize) -> Result<Self> {
        Ok(Self {
            model,
            cond: cond.tokens_embedding.unsqueeze(0)?.repeat((batch, 1, 1))?,
            uncond: None,
            extra: None,
            guidance_scale: 1.0,
        })
    }

    /// Per-item contexts, B×L×d.
    pub fn from_contexts(model: &'a dyn NoisePredictor, contexts: Tensor) -> Self {
        Self {
            model,
            cond: contexts,
            uncond: None,
            extra: None,
            guidance_scale: 1.0,
        }
    }

    pub fn with_guidance(mut self, uncond: &TextCondition, scale: f64) -> Result<Self> {
        let b = self.cond.dim(0)?;
        self.uncond = Some(uncond.tokens_embedding.unsqueeze(0)?.repeat((b, 1, 1))?);
        self.guidance_scale = scale;
        Ok(self)
    }

    pub fn with_extra(mut self, extra: Option<Tensor>) -> Self {
        self.extra = extra;
        self
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    /// Guided noise estimate `e_u + s * (e_c - e_u)`. A scale of exactly 1
    /// takes the purely conditional path.
    pub fn eps(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let ts = vec![t; z_t.dim(0)?];
        let e_c = self.model.predict(z_t, &ts, &self.cond, self.extra.as_ref())?;
        if self.guidance_scale == 1.0 {
            return Ok(e_c);
        }
        let uncond = self
            .uncond
            .as_ref()
            .ok_or_else(|| Error::Config("guidance scale != 1 requires an unconditional embedding".into()))?;
        let e_u = self.model.predict(z_t, &ts, uncond, self.extra.as_ref())?;
        Ok((&e_u + ((e_c - &e_u)?.affine(self.guidance_scale, 0.0))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM step count (ignored by DDPM, which always walks every timestep).
    pub steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            guidance_scale: 5.0,
        }
    }
}

/// Called with `(timestep, latent)` after every sampler update.
pub type StepHook<'h> = Option<&'h mut dyn FnMut(usize, &Tensor) -> Result<()>>;

fn randn_like(t: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(Tensor::from_vec(seed::normal_vec(seed, t.elem_count()), t.shape(), t.device())?.to_dtype(t.dtype())?)
}

/// Initial latent noise for a sampling run.
pub fn initial_noise(shape: &[usize], seed: u64, like: &Tensor) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Ok(
        Tensor::from_vec(seed::normal_vec(seed::substream(seed, "init"), n), shape, like.device())?
            .to_dtype(like.dtype())?,
    )
}

fn predict_x0(z: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    Ok((z - eps.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?)
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 4 {
        return Err(Error::Shape(format!("sampler shape must be B×4×h×w, got {shape:?}")));
    }
    Ok(())
}

pub fn sample_ddpm(g: &Guided, shape: &[usize], sched: &NoiseSchedule, seed: u64) -> Result<Latent> {
    check_shape(shape)?;
    let z = initial_noise(shape, seed, &g.cond)?;
    sample_ddpm_from(g, z, sched, seed, None)
}

/// Ancestral sampling from a given `z_T`, walking `t = T..1`.
pub fn sample_ddpm_from(
    g: &Guided,
    z_init: Tensor,
    sched: &NoiseSchedule,
    seed: u64,
    mut hook: StepHook,
) -> Result<Latent> {
    let mut z = z_init;
    for t in (1..=sched.num_timesteps()).rev() {
        let eps = g.eps(&z, t)?;
        let (ab, ab_prev, beta) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t));
        let x0 = predict_x0(&z, &eps, ab)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = (x0.affine(c0, 0.0)? + z.affine(ct, 0.0)?)?;
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        z = if t > 1 {
            let noise = randn_like(&mean, seed::indexed(seed, "ddpm", t as u64))?;
            (mean + noise.affine(var.sqrt(), 0.0)?)?
        } else {
            mean
        };
        if let Some(h) = hook.as_mut() {
            h(t, &z)?;
        }
    }
    check_finite(&z, "ddpm sample")?;
    Ok(Latent { z, scale_applied: true })
}

/// Evenly spaced DDIM timesteps `k * T / steps` for `k = 1..=steps`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidInput(format!(
            "ddim steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((1..=steps).map(|k| k * total / steps).collect())
}

pub fn sample_ddim(
    g: &Guided,
    shape: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    steps: usize,
    eta: f64,
) -> Result<Latent> {
    check_shape(shape)?;
    let z = initial_noise(shape, seed, &g.cond)?;
    sample_ddim_from(g, z, sched, seed, steps, eta, None)
}

pub fn sample_ddim_from(
    g: &Guided,
    z_init: Tensor,
    sched: &NoiseSchedule,
    seed: u64,
    steps: usize,
    eta: f64,
    mut hook: StepHook,
) -> Result<Latent> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidInput(format!("eta must be >= 0, got {eta}")));
    }
    let ts = ddim_timesteps(sched.num_timesteps(), steps)?;
    let mut z = z_init;
    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let prev = if k == 0 { 0 } else { ts[k - 1] };
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let eps = g.eps(&z, t)?;
        let x0 = predict_x0(&z, &eps, ab)?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = (x0.affine(ab_prev.sqrt(), 0.0)? + eps.affine(dir, 0.0)?)?;
        if sigma > 0.0 {
            let noise = randn_like(&next, seed::indexed(seed, "ddim", t as u64))?;
            next = (next + noise.affine(sigma, 0.0)?)?;
        }
        z = next;
        if let Some(h) = hook.as_mut() {
            h(t, &z)?;
        }
    }
    check_finite(&z, "ddim sample")?;
    Ok(Latent { z, scale_applied: true })
}

/// Dispatches on the configured sampler.
pub fn sample(g: &Guided, shape: &[usize], sched: &NoiseSchedule, seed: u64, cfg: &SamplerConfig) -> Result<Latent> {
    match cfg.kind {
        SamplerKind::Ddpm => sample_ddpm(g, shape, sched, seed),
        SamplerKind::Ddim => sample_ddim(g, shape, sched, seed, cfg.steps, cfg.eta),
    }
}
