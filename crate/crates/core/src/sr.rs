//! x4 RGBD super-resolution: low-resolution synthesis with a lightweight
//! blind degradation, the three low-resolution depth strategies, latent
//! conditioning, and end-to-end upscaling.

use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::diffusion::{sample, DiffusionExample, Guided, LatentDiffusion, SamplerConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::imaging::{downscale, gaussian_blur, jpeg_roundtrip, resize, ChwImage, Interp};
use crate::rgbd::{merge_channels, split_channels, RgbdSample};
use crate::seed;

pub const SCALE_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpWeights {
    pub bicubic: f64,
    pub bilinear: f64,
    pub nearest: f64,
}

/// Parameter ranges for the blur → ÷4 resize → noise → JPEG pipeline.
/// Every concrete draw is a function of `seed` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRecipe {
    pub blur_sigma: (f64, f64),
    pub downscale_factor: usize,
    pub interp_weights: InterpWeights,
    /// Standard deviation on the [0,1] intensity scale.
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub seed: u64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self {
            blur_sigma: (0.2, 2.0),
            downscale_factor: SCALE_FACTOR,
            interp_weights: InterpWeights {
                bicubic: 1.0,
                bilinear: 1.0,
                nearest: 1.0,
            },
            noise_sigma: (0.0, 10.0 / 255.0),
            jpeg_quality: (60, 95),
            seed: 0,
        }
    }
}

/// One concrete realisation of a recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawnDegradation {
    pub blur_sigma: f64,
    pub interp: Interp,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
}

impl DegradationRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.downscale_factor != SCALE_FACTOR {
            return Err(Error::Config(format!(
                "downscale factor must be {SCALE_FACTOR}, got {}",
                self.downscale_factor
            )));
        }
        let ordered = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 >= 0.0 && r.0 <= r.1;
        if !ordered(self.blur_sigma) || !ordered(self.noise_sigma) {
            return Err(Error::Config("blur and noise ranges must satisfy 0 <= lo <= hi".into()));
        }
        let (qlo, qhi) = self.jpeg_quality;
        if qlo == 0 || qlo > qhi || qhi > 100 {
            return Err(Error::Config(
                "jpeg quality range must satisfy 1 <= lo <= hi <= 100".into(),
            ));
        }
        let w = self.interp_weights;
        let ws = [w.bicubic, w.bilinear, w.nearest];
        if ws.iter().any(|v| !(*v >= 0.0)) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "interpolation weights must be >= 0 with a positive sum".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn draw(&self) -> Result<DrawnDegradation> {
        self.validate()?;
        let mut r = seed::rng(seed::substream(self.seed, "params"));
        let mut uniform = |(lo, hi): (f64, f64)| if lo == hi { lo } else { r.random_range(lo..hi) };
        let blur_sigma = uniform(self.blur_sigma);
        let noise_sigma = uniform(self.noise_sigma);
        let w = self.interp_weights;
        let total = w.bicubic + w.bilinear + w.nearest;
        let pick = r.random::<f64>() * total;
        let interp = if pick < w.bicubic {
            Interp::Bicubic
        } else if pick < w.bicubic + w.bilinear {
            Interp::Bilinear
        } else {
            Interp::Nearest
        };
        let (qlo, qhi) = self.jpeg_quality;
        let jpeg_quality = r.random_range(qlo..=qhi);
        Ok(DrawnDegradation {
            blur_sigma,
            interp,
            noise_sigma,
            jpeg_quality,
        })
    }
}

/// Degrades a 3×H×W image in [-1,1] to 3×(H/4)×(W/4).
pub fn bsr_degrade(hr_rgb: &ChwImage, recipe: &DegradationRecipe) -> Result<ChwImage> {
    if hr_rgb.channels != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", hr_rgb.channels)));
    }
    if !hr_rgb.height.is_multiple_of(SCALE_FACTOR) || !hr_rgb.width.is_multiple_of(SCALE_FACTOR) {
        return Err(Error::Shape(format!(
            "{}x{} is not divisible by {SCALE_FACTOR}",
            hr_rgb.height, hr_rgb.width
        )));
    }
    let d = recipe.draw()?;
    let unit = hr_rgb.map(|v| (v + 1.0) * 0.5);
    let blurred = gaussian_blur(&unit, d.blur_sigma);
    let mut small = downscale(&blurred, SCALE_FACTOR, d.interp)?;
    if d.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, d.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut r = seed::rng(seed::substream(recipe.seed, "noise"));
        small.data.iter_mut().for_each(|v| *v += normal.sample(&mut r) as f32);
    }
    let small = small.map(|v| v.clamp(0.0, 1.0));
    let jpeg = jpeg_roundtrip(&small, d.jpeg_quality)?;
    Ok(jpeg.map(|v| v * 2.0 - 1.0))
}

/// Maps an RGB image to a single-channel disparity-like map.
pub trait DepthEstimator: Send + Sync {
    fn id(&self) -> String;
    fn estimate(&self, rgb: &ChwImage) -> Result<ChwImage>;
}

/// Channel mean: the identity on grey images, so a grey image that already
/// holds a depth map is returned unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct LumaDepth;

impl DepthEstimator for LumaDepth {
    fn id(&self) -> String {
        "luma".into()
    }

    fn estimate(&self, rgb: &ChwImage) -> Result<ChwImage> {
        let c = rgb.channels as f32;
        Ok(ChwImage::from_fn(1, rgb.height, rgb.width, |_, y, x| {
            (0..rgb.channels).map(|k| rgb.get(k, y, x)).sum::<f32>() / c
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthLrKind {
    /// Depth estimated from the degraded image.
    #[serde(rename = "d")]
    Estimated,
    /// Original high-resolution depth.
    #[serde(rename = "o")]
    Original,
    /// Bicubic ÷4 then ×4.
    #[serde(rename = "b")]
    Bicubic,
}

impl DepthLrKind {
    pub fn letter(self) -> char {
        match self {
            DepthLrKind::Estimated => 'D',
            DepthLrKind::Original => 'O',
            DepthLrKind::Bicubic => 'B',
        }
    }
}

impl std::str::FromStr for DepthLrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d" => Ok(Self::Estimated),
            "o" => Ok(Self::Original),
            "b" => Ok(Self::Bicubic),
            _ => Err(Error::Config(format!(
                "unknown depth strategy {s:?}; expected d, o or b"
            ))),
        }
    }
}

#[derive(Clone)]
pub struct DepthLrStrategy {
    pub kind: DepthLrKind,
    pub estimator: Option<Arc<dyn DepthEstimator>>,
}

impl std::fmt::Debug for DepthLrStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DepthLrStrategy")
            .field("kind", &self.kind)
            .field("estimator", &self.estimator.as_ref().map(|e| e.id()))
            .finish()
    }
}

impl DepthLrStrategy {
    pub fn new(kind: DepthLrKind, estimator: Option<Arc<dyn DepthEstimator>>) -> Result<Self> {
        if kind == DepthLrKind::Estimated && estimator.is_none() {
            return Err(Error::Config("depth strategy D requires a depth estimator".into()));
        }
        Ok(Self { kind, estimator })
    }

    pub fn original() -> Self {
        Self {
            kind: DepthLrKind::Original,
            estimator: None,
        }
    }

    pub fn bicubic() -> Self {
        Self {
            kind: DepthLrKind::Bicubic,
            estimator: None,
        }
    }
}

fn clamp_unit(img: ChwImage) -> ChwImage {
    img.map(|v| v.clamp(-1.0, 1.0))
}

/// Builds the depth map that accompanies the low-resolution image as
/// conditioning. The result always has the high-resolution spatial size.
pub fn make_lr_depth(hr_depth: &ChwImage, lr_rgb: &ChwImage, strategy: &DepthLrStrategy) -> Result<ChwImage> {
    if hr_depth.channels != 1 {
        return Err(Error::Shape(format!(
            "depth must have 1 channel, got {}",
            hr_depth.channels
        )));
    }
    match strategy.kind {
        DepthLrKind::Original => Ok(hr_depth.clone()),
        DepthLrKind::Bicubic => {
            let lr = downscale(hr_depth, SCALE_FACTOR, Interp::Bicubic)?;
            Ok(clamp_unit(resize(
                &lr,
                hr_depth.height,
                hr_depth.width,
                Interp::Bicubic,
            )?))
        }
        DepthLrKind::Estimated => {
            let est = strategy
                .estimator
                .as_ref()
                .ok_or_else(|| Error::Config("depth strategy D requires a depth estimator".into()))?;
            let lr = est.estimate(lr_rgb)?;
            if lr.channels != 1 {
                return Err(Error::Shape("depth estimator must return one channel".into()));
            }
            Ok(clamp_unit(resize(
                &lr,
                hr_depth.height,
                hr_depth.width,
                Interp::Bicubic,
            )?))
        }
    }
}

/// Bicubic ×4 regression baseline.
pub fn bicubic_upscale(lr: &ChwImage) -> Result<ChwImage> {
    Ok(clamp_unit(resize(
        lr,
        lr.height * SCALE_FACTOR,
        lr.width * SCALE_FACTOR,
        Interp::Bicubic,
    )?))
}

/// Upsamples the low-resolution image to the conditioning-depth size,
/// stacks both into four channels and encodes them to a (scaled) latent
/// the size of the high-resolution latent.
pub fn prepare_lr_latent(lr_rgb: &ChwImage, lr_depth_cond: &ChwImage, ae: &Autoencoder) -> Result<Tensor> {
    if lr_rgb.channels != 3 || lr_depth_cond.channels != 1 {
        return Err(Error::Shape("expected 3-channel image and 1-channel depth".into()));
    }
    if (lr_rgb.height * SCALE_FACTOR, lr_rgb.width * SCALE_FACTOR) != (lr_depth_cond.height, lr_depth_cond.width) {
        return Err(Error::Shape(format!(
            "low-resolution image {}x{} is not a quarter of conditioning depth {}x{}",
            lr_rgb.height, lr_rgb.width, lr_depth_cond.height, lr_depth_cond.width
        )));
    }
    let up = bicubic_upscale(lr_rgb)?;
    let x = ChwImage::concat_channels(&[&up, lr_depth_cond])?;
    let dist = ae.encode(&x.to_tensor(&Device::Cpu)?)?;
    Ok(ae.mode_latent(&dist, true)?.z)
}

/// End-to-end x4 RGBD upscaling.
pub fn upscale(
    lr_rgb: &ChwImage,
    lr_depth_cond: &ChwImage,
    caption: &str,
    ae: &Autoencoder,
    diffusion: &LatentDiffusion,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<RgbdSample> {
    if diffusion.unet.in_channels() != 8 {
        return Err(Error::Config(format!(
            "super-resolution needs an 8-channel denoiser, got {}",
            diffusion.unet.in_channels()
        )));
    }
    let extra = prepare_lr_latent(lr_rgb, lr_depth_cond, ae)?;
    let (c, h, w) = extra.dims3()?;
    let cond = diffusion.text.embed(caption)?;
    let g = Guided::new(&diffusion.unet, &cond, 1)?
        .with_guidance(&diffusion.text.unconditional()?, sampler.guidance_scale)?
        .with_extra(Some(extra.unsqueeze(0)?));
    let z = sample(&g, &[1, c, h, w], &diffusion.schedule, seed, sampler)?;
    let x = ae.decode(&z)?.squeeze(0)?;
    let (rgb, depth) = split_channels(&ChwImage::from_tensor(&x)?.map(|v| v.clamp(-1.0, 1.0)))?;
    RgbdSample::new(rgb, depth, caption, "upscaled")
}

/// The low-resolution pair derived from one high-resolution sample.
#[derive(Debug, Clone)]
pub struct LrPair {
    pub lr_rgb: ChwImage,
    pub lr_depth_cond: ChwImage,
}

pub fn make_lr_pair(hr: &RgbdSample, recipe: &DegradationRecipe, strategy: &DepthLrStrategy) -> Result<LrPair> {
    let lr_rgb = bsr_degrade(&hr.rgb, recipe)?;
    let lr_depth_cond = make_lr_depth(&hr.depth, &lr_rgb, strategy)?;
    Ok(LrPair { lr_rgb, lr_depth_cond })
}

/// Training tuples for the super-resolution denoiser: the HR latent as the
/// target and the LR latent as the concatenated condition. Sample `i` is
/// degraded with seed `indexed(seed, "degrade", i)`.
pub fn sr_training_examples(
    samples: &[RgbdSample],
    ae: &Autoencoder,
    text: &dyn TextEncoder,
    recipe: &DegradationRecipe,
    strategy: &DepthLrStrategy,
    seed: u64,
) -> Result<(Vec<DiffusionExample>, Vec<LrPair>)> {
    let mut examples = Vec::with_capacity(samples.len());
    let mut pairs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let pair = make_lr_pair(s, &recipe.with_seed(seed::indexed(seed, "degrade", i as u64)), strategy)?;
        let extra = prepare_lr_latent(&pair.lr_rgb, &pair.lr_depth_cond, ae)?;
        let z0 = ae
            .mode_latent(&ae.encode(&merge_channels(s)?.to_tensor(&Device::Cpu)?)?, true)?
            .z;
        examples.push(DiffusionExample {
            z0,
            context: text.embed(&s.caption)?.tokens_embedding,
            extra: Some(extra),
        });
        pairs.push(pair);
    }
    Ok((examples, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate(seed: u64) -> DegradationRecipe {
        DegradationRecipe {
            blur_sigma: (0.0, 0.0),
            interp_weights: InterpWeights {
                bicubic: 1.0,
                bilinear: 0.0,
                nearest: 0.0,
            },
            noise_sigma: (0.0, 0.0),
            jpeg_quality: (100, 100),
            seed,
            ..Default::default()
        }
    }

    fn textured(h: usize, w: usize, s: u64) -> ChwImage {
        let n = seed::normal_vec(s, 3 * h * w);
        ChwImage::new(3, h, w, n.iter().map(|v| (v * 0.4).clamp(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn degenerate_pipeline_keeps_constants() {
        let v = 2.0 * 100.0 / 255.0 - 1.0;
        let img = ChwImage::filled(3, 512, 512, v);
        let out = bsr_degrade(&img, &degenerate(3)).unwrap();
        assert_eq!(out.shape(), (3, 128, 128));
        // 2/255 on the [0,1] scale is 4/255 on [-1,1]
        assert!(out.data.iter().all(|x| (x - v).abs() <= 4.0 / 255.0 + 1e-6));
    }

    #[test]
    fn degradation_is_seeded() {
        let img = textured(64, 64, 1);
        let r = DegradationRecipe {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(bsr_degrade(&img, &r).unwrap(), bsr_degrade(&img, &r).unwrap());
        assert_ne!(
            bsr_degrade(&img, &r).unwrap(),
            bsr_degrade(&img, &r.with_seed(43)).unwrap()
        );
        assert!(bsr_degrade(&textured(30, 64, 1), &r).is_err());
    }

    #[test]
    fn recipe_validation() {
        let bad = DegradationRecipe {
            downscale_factor: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DegradationRecipe {
            blur_sigma: (2.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DegradationRecipe {
            jpeg_quality: (0, 10),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let d = DegradationRecipe::default().with_seed(9).draw().unwrap();
        assert!((0.2..2.0).contains(&d.blur_sigma));
        assert!((60..=95).contains(&d.jpeg_quality));
    }

    #[test]
    fn depth_strategies() {
        let ramp = ChwImage::from_fn(1, 64, 64, |_, _, x| -0.8 + 1.6 * x as f32 / 63.0);
        let lr = textured(16, 16, 2);
        let o = make_lr_depth(&ramp, &lr, &DepthLrStrategy::original()).unwrap();
        assert_eq!(o, ramp);

        let flat = ChwImage::filled(1, 64, 64, 0.3);
        let b = make_lr_depth(&flat, &lr, &DepthLrStrategy::bicubic()).unwrap();
        assert!(b.data.iter().all(|v| (v - 0.3).abs() < 1e-6));

        let b = make_lr_depth(&ramp, &lr, &DepthLrStrategy::bicubic()).unwrap();
        for y in 6..58 {
            for x in 6..58 {
                assert!((b.get(0, y, x) - ramp.get(0, y, x)).abs() < 1e-3);
            }
        }

        assert!(DepthLrStrategy::new(DepthLrKind::Estimated, None).is_err());
        let bad = DepthLrStrategy {
            kind: DepthLrKind::Estimated,
            estimator: None,
        };
        assert!(matches!(make_lr_depth(&ramp, &lr, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn estimated_with_identity_matches_bicubic() {
        let depth = ChwImage::from_fn(1, 64, 64, |_, y, x| {
            ((x as f32 * 0.1).sin() * (y as f32 * 0.07).cos()) * 0.8
        });
        let lr_depth = downscale(&depth, 4, Interp::Bicubic).unwrap();
        let grey = ChwImage::concat_channels(&[&lr_depth, &lr_depth, &lr_depth]).unwrap();
        let d = DepthLrStrategy::new(DepthLrKind::Estimated, Some(Arc::new(LumaDepth))).unwrap();
        let a = make_lr_depth(&depth, &grey, &d).unwrap();
        let b = make_lr_depth(&depth, &grey, &DepthLrStrategy::bicubic()).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| (p - q).abs() < 1e-6));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("B".parse::<DepthLrKind>().unwrap(), DepthLrKind::Bicubic);
        assert_eq!("o".parse::<DepthLrKind>().unwrap().letter(), 'O');
        assert!("x".parse::<DepthLrKind>().is_err());
    }
}
