//! Equirectangular panoramas: HDR tone-mapping, wrap-around rolls, caption
//! prefixes, seam measurement, dataset preparation and text-to-pano
//! sampling.

use std::path::Path;

use candle_core::Device;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::diffusion::{sample, DiffusionExample, Guided, LatentDiffusion, SamplerConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::imaging::{resize, ChwImage, Interp};
use crate::rgbd::{merge_channels, split_channels, RgbdSample, SPATIAL_FACTOR};
use crate::seed;
use crate::sr::DepthEstimator;

pub const PANO_PREFIX: &str = "360 view of ";
pub const PANORAMIC_PREFIX: &str = "panoramic view of ";
pub const PANO_PREFIX_PROB: f64 = 0.70;
pub const PANORAMIC_PREFIX_PROB: f64 = 0.04;

/// An RGBD sample with a 2:1 aspect whose left and right edges are
/// adjacent longitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub rgbd: RgbdSample,
}

impl Panorama {
    pub fn new(rgbd: RgbdSample) -> Result<Self> {
        rgbd.validate()?;
        if rgbd.width() != 2 * rgbd.height() {
            return Err(Error::Shape(format!(
                "panorama must be 2:1, got {}x{}",
                rgbd.height(),
                rgbd.width()
            )));
        }
        Ok(Self { rgbd })
    }

    pub fn wraps_horizontally(&self) -> bool {
        true
    }

    pub fn height(&self) -> usize {
        self.rgbd.height()
    }

    pub fn width(&self) -> usize {
        self.rgbd.width()
    }
}

/// `v ↦ clamp((exposure·v)^(1/gamma), 0, 1)` mapped to [-1,1].
pub fn tonemap_hdr(hdr: &ChwImage, exposure: f64, gamma: f64) -> Result<ChwImage> {
    if !(exposure > 0.0 && exposure.is_finite() && gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "exposure and gamma must be positive, got {exposure} and {gamma}"
        )));
    }
    if let Some(v) = hdr.data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "radiance must be finite and non-negative, found {v}"
        )));
    }
    let inv = 1.0 / gamma;
    Ok(hdr.map(|v| ((exposure * v as f64).powf(inv).min(1.0) * 2.0 - 1.0) as f32))
}

/// Column shift applied by a roll of `fraction` turns.
pub fn roll_shift(width: usize, fraction: f64) -> usize {
    if width == 0 {
        return 0;
    }
    let f = fraction.rem_euclid(1.0);
    ((f * width as f64).round() as usize) % width
}

/// Circularly shifts columns right by `shift`.
pub fn roll_columns(img: &ChwImage, shift: usize) -> ChwImage {
    let w = img.width;
    if w == 0 {
        return img.clone();
    }
    let s = shift % w;
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            let row = &img.data[(c * img.height + y) * w..][..w];
            let dst = &mut out.data[(c * img.height + y) * w..][..w];
            dst[s..].copy_from_slice(&row[..w - s]);
            dst[..s].copy_from_slice(&row[w - s..]);
        }
    }
    out
}

/// Horizontal roll by `round(fraction·W)` columns, applied to RGB and depth.
pub fn roll_pano(p: &Panorama, fraction: f64) -> Panorama {
    let s = roll_shift(p.width(), fraction);
    let mut rgbd = p.rgbd.clone();
    rgbd.rgb = roll_columns(&p.rgbd.rgb, s);
    rgbd.depth = roll_columns(&p.rgbd.depth, s);
    Panorama { rgbd }
}

fn column_pair_mad(x: &ChwImage, a: usize, b: usize, acc: &mut f64) {
    for c in 0..x.channels {
        for y in 0..x.height {
            *acc += (x.get(c, y, a) as f64 - x.get(c, y, b) as f64).abs();
        }
    }
}

/// Mean absolute difference between the last and first columns over all
/// four channels. This is the raw wrap-around difference and moves with
/// rolls.
pub fn edge_difference(p: &Panorama) -> f64 {
    let w = p.width();
    let mut acc = 0.0;
    column_pair_mad(&p.rgbd.rgb, w - 1, 0, &mut acc);
    column_pair_mad(&p.rgbd.depth, w - 1, 0, &mut acc);
    acc / (4 * p.height()) as f64
}

/// Largest mean absolute difference between circularly adjacent columns,
/// over all four channels. The wrap pair `(W-1, 0)` is one of the pairs, so
/// a hard seam dominates, and a roll only permutes the pairs, so the value
/// is exactly roll invariant.
pub fn seam_discontinuity(p: &Panorama) -> f64 {
    let (h, w) = (p.height(), p.width());
    let n = (4 * h) as f64;
    (0..w)
        .map(|x| {
            let mut acc = 0.0;
            column_pair_mad(&p.rgbd.rgb, x, (x + 1) % w, &mut acc);
            column_pair_mad(&p.rgbd.depth, x, (x + 1) % w, &mut acc);
            acc / n
        })
        .fold(0.0, f64::max)
}

fn has_pano_prefix(caption: &str) -> bool {
    let lower = caption.trim_start().to_lowercase();
    lower.starts_with(PANO_PREFIX.trim_end()) || lower.starts_with(PANORAMIC_PREFIX.trim_end())
}

/// Prefixes a caption with "360 view of " (p = 0.70) or "panoramic view of "
/// (p = 0.04), deterministically per `(raw, seed)`. Captions that already
/// carry either prefix are returned unchanged.
pub fn make_pano_caption(raw: &str, seed: u64) -> Result<String> {
    if raw.trim().is_empty() {
        return Err(Error::InvalidInput("caption is empty".into()));
    }
    if has_pano_prefix(raw) {
        return Ok(raw.to_string());
    }
    let u: f64 = seed::rng(seed::substream(seed, &format!("caption:{raw}"))).random();
    Ok(if u < PANO_PREFIX_PROB {
        format!("{PANO_PREFIX}{raw}")
    } else if u < PANO_PREFIX_PROB + PANORAMIC_PREFIX_PROB {
        format!("{PANORAMIC_PREFIX}{raw}")
    } else {
        raw.to_string()
    })
}

/// Reads a Radiance `.hdr` file into a 3×H×W radiance image.
pub fn load_hdr(path: &Path) -> Result<ChwImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ChwImage::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c]
    }))
}

/// Writes a 3×H×W radiance image as Radiance `.hdr`.
pub fn save_hdr(img: &ChwImage, path: &Path) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "hdr output needs 3 channels, got {}",
            img.channels
        )));
    }
    crate::rgbd::ensure_parent(path)?;
    let buf = image::Rgb32FImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| img.get(c, y as usize, x as usize).max(0.0)))
    });
    image::DynamicImage::ImageRgb32F(buf)
        .save(path)
        .map_err(|e| Error::image(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanoPrepConfig {
    /// Output height; width is twice this.
    pub height: usize,
    pub augmentations: usize,
    /// Exposure is drawn log-uniformly from this range.
    pub exposure: (f64, f64),
    pub gamma: f64,
    /// Roll the first augmentation too; when false it keeps the original
    /// framing.
    pub roll_first: bool,
}

impl Default for PanoPrepConfig {
    fn default() -> Self {
        Self {
            height: 64,
            augmentations: 4,
            exposure: (0.7, 1.4),
            gamma: 2.2,
            roll_first: false,
        }
    }
}

impl PanoPrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || !self.height.is_multiple_of(SPATIAL_FACTOR) {
            return Err(Error::Config(format!(
                "pano height must be a positive multiple of {SPATIAL_FACTOR}, got {}",
                self.height
            )));
        }
        if self.augmentations == 0 {
            return Err(Error::Config("augmentations must be >= 1".into()));
        }
        let (lo, hi) = self.exposure;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(
                "exposure range must satisfy 0 < lo <= hi and gamma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters used for one augmented panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoAugmentation {
    pub id: String,
    pub source: String,
    pub exposure: f64,
    pub gamma: f64,
    pub roll_fraction: f64,
    pub roll_shift: usize,
    pub caption: String,
}

/// Produces `cfg.augmentations` tone-mapped, rolled, captioned panoramas
/// from one HDR radiance map. Depth comes from `estimator` run on the
/// tone-mapped image.
pub fn augment_hdr(
    hdr: &ChwImage,
    source_id: &str,
    raw_caption: &str,
    estimator: &dyn DepthEstimator,
    cfg: &PanoPrepConfig,
    seed: u64,
) -> Result<Vec<(Panorama, PanoAugmentation)>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, 2 * cfg.height);
    let radiance = resize(hdr, h, w, Interp::Bilinear)?.map(|v| v.max(0.0));
    let mut out = Vec::with_capacity(cfg.augmentations);
    for j in 0..cfg.augmentations {
        let s = seed::indexed(seed, "aug", j as u64);
        let mut r = seed::rng(s);
        let (lo, hi) = cfg.exposure;
        let exposure = if lo == hi {
            lo
        } else {
            (r.random_range(lo.ln()..hi.ln())).exp()
        };
        let roll_fraction = if j == 0 && !cfg.roll_first {
            0.0
        } else {
            r.random::<f64>()
        };
        let rgb = tonemap_hdr(&radiance, exposure, cfg.gamma)?;
        let depth = estimator.estimate(&rgb)?;
        let id = format!("{source_id}_a{j:02}");
        let caption = make_pano_caption(raw_caption, seed::substream(s, "caption"))?;
        let pano = Panorama::new(RgbdSample::new(rgb, depth, caption.clone(), id.clone())?)?;
        let rolled = roll_pano(&pano, roll_fraction);
        out.push((
            rolled,
            PanoAugmentation {
                id,
                source: source_id.to_string(),
                exposure,
                gamma: cfg.gamma,
                roll_fraction,
                roll_shift: roll_shift(w, roll_fraction),
                caption,
            },
        ));
    }
    Ok(out)
}

/// Training tuples for the panorama denoiser.
pub fn pano_training_examples(
    panos: &[RgbdSample],
    ae: &Autoencoder,
    text: &dyn TextEncoder,
) -> Result<Vec<DiffusionExample>> {
    panos
        .iter()
        .map(|s| {
            let x = merge_channels(s)?.to_tensor(&Device::Cpu)?;
            Ok(DiffusionExample {
                z0: ae.mode_latent(&ae.encode(&x)?, true)?.z,
                context: text.embed(&s.caption)?.tokens_embedding,
                extra: None,
            })
        })
        .collect()
}

/// Text-to-panorama RGBD generation at `height × 2·height`.
pub fn sample_pano(
    prompt: &str,
    height: usize,
    ae: &Autoencoder,
    diffusion: &LatentDiffusion,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Panorama> {
    if diffusion.unet.in_channels() != 4 {
        return Err(Error::Config(format!(
            "panorama sampling needs a 4-channel denoiser, got {}",
            diffusion.unet.in_channels()
        )));
    }
    if height == 0 || !height.is_multiple_of(SPATIAL_FACTOR) {
        return Err(Error::Config(format!(
            "height must be a multiple of {SPATIAL_FACTOR}, got {height}"
        )));
    }
    let (lh, lw) = (height / SPATIAL_FACTOR, 2 * height / SPATIAL_FACTOR);
    let cond = diffusion.text.embed(prompt)?;
    let g = Guided::new(&diffusion.unet, &cond, 1)?
        .with_guidance(&diffusion.text.unconditional()?, sampler.guidance_scale)?;
    let z = sample(&g, &[1, 4, lh, lw], &diffusion.schedule, seed, sampler)?;
    let x = ae.decode(&z)?.squeeze(0)?;
    let (rgb, depth) = split_channels(&ChwImage::from_tensor(&x)?.map(|v| v.clamp(-1.0, 1.0)))?;
    Panorama::new(RgbdSample::new(rgb, depth, prompt, "pano")?)
}
