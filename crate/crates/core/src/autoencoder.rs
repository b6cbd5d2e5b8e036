//! Four-channel (RGB + depth) KL-regularised autoencoder.
//!
//! The encoder maps a 4×H×W raster to a diagonal Gaussian over a
//! 4×(H/8)×(W/8) latent; the decoder maps latents back to 4×H×W with a
//! `tanh` output so reconstructions stay in [-1, 1].

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_batched, check_finite, silu, Checkpoint, Conv2d, ParamStore};
use crate::rgbd::{check_divisible, SPATIAL_FACTOR};
use crate::seed;

pub const LATENT_CHANNELS: usize = 4;
pub const IMAGE_CHANNELS: usize = 4;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconWeights {
    pub rgb: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub base_channels: usize,
    /// One entry per ×2 downsampling stage; exactly three stages give ÷8.
    pub channel_multipliers: Vec<usize>,
    pub kl_weight: f64,
    pub recon_weights: ReconWeights,
    /// Multiplier that brings latents to roughly unit variance.
    pub latent_scale: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            kl_weight: 1e-6,
            recon_weights: ReconWeights { rgb: 1.0, depth: 1.0 },
            latent_scale: 1.0,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.channel_multipliers.len();
        if factor != SPATIAL_FACTOR {
            return Err(Error::Config(format!(
                "{} downsampling stages give /{factor}, need /{SPATIAL_FACTOR}",
                self.channel_multipliers.len()
            )));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) || !(self.latent_scale > 0.0) {
            return Err(Error::Config("kl_weight must be >= 0 and latent_scale > 0".into()));
        }
        if !(self.recon_weights.rgb >= 0.0 && self.recon_weights.depth >= 0.0) {
            return Err(Error::Config("reconstruction weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian produced by the encoder.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub logvar: Tensor,
}

#[derive(Debug, Clone)]
pub struct Latent {
    pub z: Tensor,
    pub scale_applied: bool,
}

struct Stage {
    resample: Conv2d,
    residual: Conv2d,
}

pub struct Autoencoder {
    cfg: AeConfig,
    params: ParamStore,
    enc_in: Conv2d,
    enc_stages: Vec<Stage>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<Stage>,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(cfg: AeConfig, init_seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(init_seed, dtype, device);
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_channels).collect();
        let base = cfg.base_channels;

        let enc_in = Conv2d::new(&mut ps, "encoder.conv_in", IMAGE_CHANNELS, base, 3, 1)?;
        let mut enc_stages = Vec::new();
        let mut prev = base;
        for (i, &w) in widths.iter().enumerate() {
            enc_stages.push(Stage {
                resample: Conv2d::new(&mut ps, &format!("encoder.down{i}.conv"), prev, w, 3, 2)?,
                residual: Conv2d::new(&mut ps, &format!("encoder.down{i}.res"), w, w, 3, 1)?,
            });
            prev = w;
        }
        let enc_out = Conv2d::new(&mut ps, "encoder.conv_out", prev, 2 * LATENT_CHANNELS, 3, 1)?;

        let top = *widths.last().expect("validated");
        let dec_in = Conv2d::new(&mut ps, "decoder.conv_in", LATENT_CHANNELS, top, 3, 1)?;
        let mut dec_stages = Vec::new();
        let mut prev = top;
        for (i, &w) in widths.iter().enumerate().rev() {
            dec_stages.push(Stage {
                resample: Conv2d::new(&mut ps, &format!("decoder.up{i}.conv"), prev, w, 3, 1)?,
                residual: Conv2d::new(&mut ps, &format!("decoder.up{i}.res"), w, w, 3, 1)?,
            });
            prev = w;
        }
        let dec_out = Conv2d::new(&mut ps, "decoder.conv_out", prev, IMAGE_CHANNELS, 3, 1)?;

        Ok(Self {
            cfg,
            params: ps,
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_stages,
            dec_out,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_latent_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Numerical(format!("latent scale {scale} is not positive")));
        }
        self.cfg.latent_scale = scale;
        Ok(())
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Encodes a 4×H×W (or batched B×4×H×W) raster; the output keeps the
    /// input's rank.
    pub fn encode(&self, x: &Tensor) -> Result<LatentDistribution> {
        let (xb, unbatched) = as_batched(x)?;
        let (_, c, h, w) = xb.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!("encoder expects 4 channels, got {c}")));
        }
        check_divisible(h, w)?;
        check_finite(&xb, "encoder input")?;
        let mut hdn = self.enc_in.forward(&xb.to_dtype(self.dtype())?)?;
        for s in &self.enc_stages {
            hdn = s.resample.forward(&hdn)?;
            hdn = (&hdn + s.residual.forward(&silu(&hdn)?)?)?;
        }
        let moments = self.enc_out.forward(&silu(&hdn)?)?;
        let mut mean = moments.narrow(1, 0, LATENT_CHANNELS)?;
        let mut logvar = moments
            .narrow(1, LATENT_CHANNELS, LATENT_CHANNELS)?
            .clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        if unbatched {
            mean = mean.squeeze(0)?;
            logvar = logvar.squeeze(0)?;
        }
        Ok(LatentDistribution { mean, logvar })
    }

    /// Reparameterised draw `mean + exp(logvar / 2) * eps` with `eps` seeded
    /// by `seed`, optionally multiplied by the latent scale.
    pub fn sample_latent(&self, dist: &LatentDistribution, seed: u64, apply_scale: bool) -> Result<Latent> {
        let eps = Tensor::from_vec(
            seed::normal_vec(seed, dist.mean.elem_count()),
            dist.mean.shape(),
            self.device(),
        )?
        .to_dtype(dist.mean.dtype())?;
        let z = (&dist.mean + (dist.logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        self.wrap_latent(z, apply_scale)
    }

    /// Uses the distribution mean as the latent.
    pub fn mode_latent(&self, dist: &LatentDistribution, apply_scale: bool) -> Result<Latent> {
        self.wrap_latent(dist.mean.clone(), apply_scale)
    }

    fn wrap_latent(&self, z: Tensor, apply_scale: bool) -> Result<Latent> {
        let z = if apply_scale {
            z.affine(self.cfg.latent_scale, 0.0)?
        } else {
            z
        };
        Ok(Latent {
            z,
            scale_applied: apply_scale,
        })
    }

    pub fn decode(&self, latent: &Latent) -> Result<Tensor> {
        let (zb, unbatched) = as_batched(&latent.z)?;
        if zb.dim(1)? != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "decoder expects {LATENT_CHANNELS} latent channels, got {}",
                zb.dim(1)?
            )));
        }
        check_finite(&zb, "latent")?;
        let zb = zb.to_dtype(self.dtype())?;
        let zb = if latent.scale_applied {
            zb.affine(1.0 / self.cfg.latent_scale, 0.0)?
        } else {
            zb
        };
        let mut hdn = self.dec_in.forward(&zb)?;
        for s in &self.dec_stages {
            let (_, _, h, w) = hdn.dims4()?;
            hdn = silu(&hdn)?.upsample_nearest2d(2 * h, 2 * w)?;
            hdn = s.resample.forward(&hdn)?;
            hdn = (&hdn + s.residual.forward(&silu(&hdn)?)?)?;
        }
        let out = self.dec_out.forward(&silu(&hdn)?)?.tanh()?;
        Ok(if unbatched { out.squeeze(0)? } else { out })
    }

    pub fn to_checkpoint(&self, step: usize, loss_log: Vec<f32>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.cfg)?,
            step,
            loss_log,
            tensors: self.params.export()?.into_iter().collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg: AeConfig = serde_json::from_value(ck.config.clone())?;
        let model = Self::new(cfg, 0, DType::F32, device)?;
        model.params.import(&ck.tensor_map())?;
        Ok(model)
    }
}

/// Loss terms, each a scalar tensor so the total can be back-propagated.
#[derive(Debug, Clone)]
pub struct AeLoss {
    pub recon_rgb: Tensor,
    pub recon_depth: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeLossValues {
    pub recon_rgb: f64,
    pub recon_depth: f64,
    pub kl: f64,
    pub total: f64,
}

impl AeLoss {
    pub fn values(&self) -> Result<AeLossValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(AeLossValues {
            recon_rgb: f(&self.recon_rgb)?,
            recon_depth: f(&self.recon_depth)?,
            kl: f(&self.kl)?,
            total: f(&self.total)?,
        })
    }
}

/// Closed-form KL of N(mean, exp(logvar)) to N(0, 1), averaged per element.
pub fn kl_to_standard_normal(dist: &LatentDistribution) -> Result<Tensor> {
    let var = dist.logvar.exp()?;
    let terms = ((dist.mean.sqr()? + var)? - &dist.logvar)?.affine(0.5, -0.5)?;
    Ok(terms.mean_all()?)
}

/// Weighted per-group mean absolute error plus `kl_weight`-scaled KL.
pub fn ae_loss(x: &Tensor, x_hat: &Tensor, dist: &LatentDistribution, cfg: &AeConfig) -> Result<AeLoss> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    if dist.mean.dims() != dist.logvar.dims() {
        return Err(Error::Shape("mean and logvar shapes differ".into()));
    }
    let (xb, _) = as_batched(x)?;
    let (xh, _) = as_batched(x_hat)?;
    if xb.dim(1)? != IMAGE_CHANNELS {
        return Err(Error::Shape(format!("expected 4 channels, got {}", xb.dim(1)?)));
    }
    let diff = (xh - xb.to_dtype(x_hat.dtype())?)?.abs()?;
    let recon_rgb = diff.narrow(1, 0, 3)?.mean_all()?.affine(cfg.recon_weights.rgb, 0.0)?;
    let recon_depth = diff.narrow(1, 3, 1)?.mean_all()?.affine(cfg.recon_weights.depth, 0.0)?;
    let kl = kl_to_standard_normal(dist)?;
    let total = ((&recon_rgb + &recon_depth)? + kl.affine(cfg.kl_weight, 0.0)?)?;
    Ok(AeLoss {
        recon_rgb,
        recon_depth,
        kl,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
        }
    }
}

pub(crate) fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// Picks `batch` distinct-as-possible indices for one step.
pub(crate) fn batch_indices(n: usize, batch: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut r = seed::rng(seed);
    (0..batch).map(|_| r.random_range(0..n)).collect()
}

/// Runs `opts.steps` optimisation steps on `data` (each 4×H×W) continuing
/// from `start_step`, and returns the per-step total loss.
///
/// Batch composition and reparameterisation noise depend only on
/// `(seed, step)`, so a resumed run draws what an uninterrupted one would.
pub fn train_ae(
    model: &Autoencoder,
    data: &[Tensor],
    opts: &TrainOptions,
    seed: u64,
    start_step: usize,
) -> Result<Vec<f32>> {
    train_ae_with(model, data, opts, seed, start_step, None)
}

/// Called after every optimisation step with `(step, loss)`; returning
/// `false` ends training early.
pub type TrainHook<'h> = Option<&'h mut dyn FnMut(usize, f32) -> bool>;

/// [`train_ae`] with a per-step hook.
pub fn train_ae_with(
    model: &Autoencoder,
    data: &[Tensor],
    opts: &TrainOptions,
    seed: u64,
    start_step: usize,
    mut hook: TrainHook,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Data("autoencoder training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = adam(model.params.vars(), opts.learning_rate)?;
    let mut log = Vec::with_capacity(opts.steps);
    for step in start_step..start_step + opts.steps {
        let idx = batch_indices(data.len(), opts.batch_size, seed::indexed(seed, "batch", step as u64));
        let x = Tensor::stack(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>(), 0)?.to_dtype(model.dtype())?;
        let dist = model.encode(&x)?;
        let z = model.sample_latent(&dist, seed::indexed(seed, "latent", step as u64), false)?;
        let x_hat = model.decode(&z)?;
        let loss = ae_loss(&x, &x_hat, &dist, &model.cfg)?;
        let v = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "autoencoder loss diverged at step {step}: {v}"
            )));
        }
        opt.backward_step(&loss.total)?;
        log::debug!("ae step {step} loss {v:.6}");
        log.push(v as f32);
        if let Some(h) = hook.as_mut() {
            if !h(step, v as f32) {
                break;
            }
        }
    }
    Ok(log)
}

/// `1 / std` of the posterior means over `data`.
pub fn estimate_latent_scale(model: &Autoencoder, data: &[Tensor]) -> Result<f64> {
    let mut vals = Vec::new();
    for x in data {
        let m = model
            .encode(x)?
            .mean
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        vals.extend(m);
    }
    let n = vals.len() as f64;
    if n < 2.0 {
        return Err(Error::Data("not enough latents to estimate a scale".into()));
    }
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Numerical("latents have zero variance".into()));
    }
    Ok(1.0 / var.sqrt())
}
