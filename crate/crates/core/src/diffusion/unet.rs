//! Two-resolution conditional U-Net predicting the noise of a noisy latent.
//!
//! Layout: conv_in → [res + cross-attn] → ↓2 → [res + cross-attn] → mid →
//! ↑2 → concat skip → res → conv_out. Timestep information enters every
//! residual block as an additive bias; the caption enters through
//! cross-attention over its token embeddings. With `in_channels = 8` the
//! low-resolution conditioning latent is concatenated after the noisy
//! latent along the channel axis.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{check_finite, silu, softmax_last, Conv2d, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub context_dim: usize,
    pub base_width: usize,
    /// Levels (0 = full latent resolution, 1 = half) carrying cross-attention.
    pub attn_resolutions: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 4,
            context_dim: 32,
            base_width: 32,
            attn_resolutions: vec![0, 1],
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 4 | 8) {
            return Err(Error::Config(format!(
                "denoiser in_channels must be 4 or 8, got {}",
                self.in_channels
            )));
        }
        if self.out_channels != LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "denoiser out_channels must be {LATENT_CHANNELS}, got {}",
                self.out_channels
            )));
        }
        if self.base_width == 0 || !self.base_width.is_multiple_of(2) || self.context_dim == 0 {
            return Err(Error::Config(
                "base_width must be even and positive, context_dim positive".into(),
            ));
        }
        if self.attn_resolutions.iter().any(|&l| l > 1) {
            return Err(Error::Config("attn_resolutions may only list levels 0 and 1".into()));
        }
        Ok(())
    }
}

/// Anything that predicts noise from `(z_t, t, context, extra)`.
///
/// `z_t` is B×4×h×w, `t` holds one timestep per batch item, `context` is
/// B×L×d. Implementations must enforce their own channel contract.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: &[usize], context: &Tensor, extra: Option<&Tensor>) -> Result<Tensor>;
}

struct ResBlock {
    conv1: Conv2d,
    time: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), in_c, out_c, 3, 1)?,
            time: Linear::new(ps, &format!("{name}.time"), temb, out_c)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), out_c, out_c, 3, 1)?,
            skip: if in_c != out_c {
                Some(Conv2d::new(ps, &format!("{name}.skip"), in_c, out_c, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(x)?)?;
        let bias = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = self.conv2.forward(&silu(&h.broadcast_add(&bias)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    width: usize,
}

impl CrossAttention {
    fn new(ps: &mut ParamStore, name: &str, width: usize, context_dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width)?,
            k: Linear::new(ps, &format!("{name}.k"), context_dim, width)?,
            v: Linear::new(ps, &format!("{name}.v"), context_dim, width)?,
            out: Linear::new(ps, &format!("{name}.out"), width, width)?,
            width,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?; // B×HW×C
        let q = self.q.forward(&seq)?;
        let k = self.k.forward(context)?;
        let v = self.v.forward(context)?;
        let scores = q
            .matmul(&k.t()?.contiguous()?)?
            .affine(1.0 / (self.width as f64).sqrt(), 0.0)?;
        let attn = softmax_last(&scores)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

pub struct UNet {
    cfg: DenoiserConfig,
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res0: ResBlock,
    attn0: Option<CrossAttention>,
    down: Conv2d,
    res1: ResBlock,
    attn1: Option<CrossAttention>,
    mid: ResBlock,
    up: Conv2d,
    res_up: ResBlock,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: DenoiserConfig, init_seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(init_seed, dtype, device);
        let w = cfg.base_width;
        let temb = 2 * w;
        let attn = |ps: &mut ParamStore, level: usize, width: usize| -> Result<Option<CrossAttention>> {
            if cfg.attn_resolutions.contains(&level) {
                Ok(Some(CrossAttention::new(
                    ps,
                    &format!("attn{level}"),
                    width,
                    cfg.context_dim,
                )?))
            } else {
                Ok(None)
            }
        };
        let time1 = Linear::new(&mut ps, "time.lin1", w, temb)?;
        let time2 = Linear::new(&mut ps, "time.lin2", temb, temb)?;
        let conv_in = Conv2d::new(&mut ps, "conv_in", cfg.in_channels, w, 3, 1)?;
        let res0 = ResBlock::new(&mut ps, "res0", w, w, temb)?;
        let attn0 = attn(&mut ps, 0, w)?;
        let down = Conv2d::new(&mut ps, "down", w, 2 * w, 3, 2)?;
        let res1 = ResBlock::new(&mut ps, "res1", 2 * w, 2 * w, temb)?;
        let attn1 = attn(&mut ps, 1, 2 * w)?;
        let mid = ResBlock::new(&mut ps, "mid", 2 * w, 2 * w, temb)?;
        let up = Conv2d::new(&mut ps, "up", 2 * w, w, 3, 1)?;
        let res_up = ResBlock::new(&mut ps, "res_up", 2 * w, w, temb)?;
        let conv_out = Conv2d::new(&mut ps, "conv_out", w, cfg.out_channels, 3, 1)?;
        Ok(Self {
            cfg,
            params: ps,
            time1,
            time2,
            conv_in,
            res0,
            attn0,
            down,
            res1,
            attn1,
            mid,
            up,
            res_up,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn import(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        self.params.import(tensors)
    }

    fn timestep_embedding(&self, t: &[usize]) -> Result<Tensor> {
        let dim = self.cfg.base_width;
        let half = dim / 2;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * ti as f64);
            let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
            data.extend(s);
            data.extend(c);
        }
        Ok(Tensor::from_vec(data, (t.len(), dim), self.params.device())?.to_dtype(self.params.dtype())?)
    }

    /// Checks the conditioning-channel contract and assembles the network
    /// input `[z_t, extra]`.
    fn assemble_input(&self, z_t: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let (_, c, h, w) = z_t.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("noisy latent must have 4 channels, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} must have even spatial dims")));
        }
        match (self.cfg.in_channels, extra) {
            (4, None) => Ok(z_t.clone()),
            (4, Some(_)) => Err(Error::Shape(
                "4-channel denoiser does not accept a conditioning latent".into(),
            )),
            (8, None) => Err(Error::Shape("8-channel denoiser requires a conditioning latent".into())),
            (8, Some(e)) => {
                if e.dims() != z_t.dims() {
                    return Err(Error::Shape(format!(
                        "conditioning latent {:?} must match noisy latent {:?}",
                        e.dims(),
                        z_t.dims()
                    )));
                }
                Ok(Tensor::cat(&[z_t, &e.to_dtype(z_t.dtype())?], 1)?)
            }
            (n, _) => Err(Error::Config(format!("unsupported in_channels {n}"))),
        }
    }

    pub fn forward(&self, z_t: &Tensor, t: &[usize], context: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let dtype = self.params.dtype();
        let z_t = z_t.to_dtype(dtype)?;
        let b = z_t.dim(0)?;
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
        }
        let (cb, _, cd) = context.dims3()?;
        if cb != b || cd != self.cfg.context_dim {
            return Err(Error::Shape(format!(
                "context {:?} incompatible with batch {b} and context_dim {}",
                context.dims(),
                self.cfg.context_dim
            )));
        }
        let context = context.to_dtype(dtype)?;
        let x = self.assemble_input(&z_t, extra)?;

        let temb = self.timestep_embedding(t)?;
        let temb = self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?;

        let mut h0 = self.res0.forward(&self.conv_in.forward(&x)?, &temb)?;
        if let Some(a) = &self.attn0 {
            h0 = a.forward(&h0, &context)?;
        }
        let mut h1 = self.res1.forward(&self.down.forward(&h0)?, &temb)?;
        if let Some(a) = &self.attn1 {
            h1 = a.forward(&h1, &context)?;
        }
        let h1 = self.mid.forward(&h1, &temb)?;
        let (_, _, hh, ww) = h0.dims4()?;
        let up = self.up.forward(&h1.upsample_nearest2d(hh, ww)?)?;
        let h = self.res_up.forward(&Tensor::cat(&[&up, &h0], 1)?, &temb)?;
        Ok(self.conv_out.forward(&silu(&h)?)?)
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, z_t: &Tensor, t: &[usize], context: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        self.forward(z_t, t, context, extra)
    }
}

/// One noise prediction for a single (unbatched or batched) latent with a
/// caption condition; the output has the shape of `z_t`.
pub fn denoise_step(
    model: &dyn NoisePredictor,
    z_t: &Tensor,
    t: usize,
    cond: &super::TextCondition,
    extra: Option<&Tensor>,
) -> Result<Tensor> {
    let unbatched = z_t.rank() == 3;
    let zb = if unbatched { z_t.unsqueeze(0)? } else { z_t.clone() };
    let b = zb.dim(0)?;
    let eb = match extra {
        Some(e) if unbatched => Some(e.unsqueeze(0)?),
        Some(e) => Some(e.clone()),
        None => None,
    };
    let ctx = cond.tokens_embedding.unsqueeze(0)?.repeat((b, 1, 1))?;
    let out = model.predict(&zb, &vec![t; b], &ctx, eb.as_ref())?;
    check_finite(&out, "noise prediction")?;
    Ok(if unbatched { out.squeeze(0)? } else { out })
}
