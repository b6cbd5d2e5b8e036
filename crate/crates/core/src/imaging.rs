//! Planar float images and the resampling / filtering primitives the
//! degradation and evaluation paths are built on.

use candle_core::{DType, Device, Tensor};
use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Channel-major (C×H×W) float raster.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChwImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ChwImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies out a subset of channels.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<ChwImage> {
        if range.end > self.channels || range.is_empty() {
            return Err(Error::Shape(format!(
                "channel range {range:?} out of {} channels",
                self.channels
            )));
        }
        let n = self.height * self.width;
        Ok(ChwImage {
            channels: range.len(),
            height: self.height,
            width: self.width,
            data: self.data[range.start * n..range.end * n].to_vec(),
        })
    }

    /// Stacks images with identical spatial size along the channel axis.
    pub fn concat_channels(parts: &[&ChwImage]) -> Result<ChwImage> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "spatial mismatch {}x{} vs {h}x{w}",
                    p.height, p.width
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        ChwImage::new(channels, h, w, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ChwImage {
        ChwImage {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<ChwImage> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        ChwImage::new(c, h, w, data)
    }
}

/// Interpolation kernels available to [`resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bicubic,
    Bilinear,
    Nearest,
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample taps (source index, weight) along one axis.
fn axis_taps(n_in: usize, n_out: usize, mode: Interp) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            match mode {
                Interp::Nearest => {
                    let i = ((o as f64 + 0.5) * scale).floor() as isize;
                    vec![(clamp(i), 1.0)]
                }
                Interp::Bilinear => {
                    let i0 = src.floor();
                    let f = src - i0;
                    let i0 = i0 as isize;
                    vec![(clamp(i0), 1.0 - f), (clamp(i0 + 1), f)]
                }
                Interp::Bicubic => {
                    let i0 = src.floor();
                    let f = src - i0;
                    let i0 = i0 as isize;
                    (-1..=2).map(|k| (clamp(i0 + k), cubic_weight(f - k as f64))).collect()
                }
            }
        })
        .collect()
}

/// Separable resampling to `(out_h, out_w)`.
///
/// Sample positions follow the pixel-centre convention
/// `src = (dst + 0.5) * in / out - 0.5` with edge replication and no
/// anti-aliasing prefilter, so linear ramps survive bicubic resizing exactly
/// away from the borders.
pub fn resize(img: &ChwImage, out_h: usize, out_w: usize, mode: Interp) -> Result<ChwImage> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::Shape("resize with an empty extent".into()));
    }
    let xt = axis_taps(img.width, out_w, mode);
    let yt = axis_taps(img.height, out_h, mode);
    let mut out = ChwImage::filled(img.channels, out_h, out_w, 0.0);
    let mut tmp = vec![0f64; img.height * out_w];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..img.height {
            let row = &plane[y * img.width..(y + 1) * img.width];
            for (x, taps) in xt.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(i, w)| row[i] as f64 * w).sum();
            }
        }
        for (y, taps) in yt.iter().enumerate() {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, w)| tmp[i * out_w + x] * w).sum();
                out.set(c, y, x, v as f32);
            }
        }
    }
    Ok(out)
}

/// Integer-factor upscale/downscale helpers.
pub fn downscale(img: &ChwImage, factor: usize, mode: Interp) -> Result<ChwImage> {
    if factor == 0 || !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "{}x{} is not divisible by {factor}",
            img.height, img.width
        )));
    }
    resize(img, img.height / factor, img.width / factor, mode)
}

pub fn upscale(img: &ChwImage, factor: usize, mode: Interp) -> Result<ChwImage> {
    resize(img, img.height * factor, img.width * factor, mode)
}

/// Normalised 1-D Gaussian taps with radius ceil(3σ).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &ChwImage, sigma: f64) -> ChwImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = img.clone();
    let mut tmp = vec![0f64; img.height * img.width];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    let xx = (x + j as isize - r).clamp(0, w - 1);
                    acc += kw * plane[(y * w + xx) as usize] as f64;
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    let yy = (y + j as isize - r).clamp(0, h - 1);
                    acc += kw * tmp[(yy * w + x) as usize];
                }
                out.set(c, y as usize, x as usize, acc as f32);
            }
        }
    }
    out
}

/// Encodes a 3-channel image in [0,1] as baseline JPEG at `quality` and
/// decodes it again.
pub fn jpeg_roundtrip(img: &ChwImage, quality: u8) -> Result<ChwImage> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "jpeg round trip needs 3 channels, got {}",
            img.channels
        )));
    }
    let rgb = to_rgb8(img, |v| v);
    let mut buf = Vec::new();
    let q = quality.clamp(1, 100);
    JpegEncoder::new_with_quality(&mut buf, q)
        .encode_image(&rgb)
        .map_err(|e| Error::image("<jpeg>", e))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::image("<jpeg>", e))?
        .to_rgb8();
    Ok(from_rgb8(&decoded, |v| v))
}

/// Quantises a 3-channel image to 8 bits after mapping each value through
/// `to_unit` (which must land in [0,1]).
pub(crate) fn to_rgb8(img: &ChwImage, to_unit: impl Fn(f32) -> f32) -> RgbImage {
    let (w, h) = (img.width as u32, img.height as u32);
    RgbImage::from_fn(w, h, |x, y| {
        let px = |c| {
            let v = to_unit(img.get(c, y as usize, x as usize)).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub(crate) fn from_rgb8(img: &RgbImage, from_unit: impl Fn(f32) -> f32) -> ChwImage {
    let (w, h) = img.dimensions();
    ChwImage::from_fn(3, h as usize, w as usize, |c, y, x| {
        from_unit(img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ChwImage {
        ChwImage::from_fn(1, h, w, |_, _, x| 0.01 * x as f32 - 0.3)
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for i in 0..10 {
            let f = i as f64 / 10.0;
            let s: f64 = (-1..=2).map(|k| cubic_weight(f - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_preserves_ramp_interior() {
        let img = ramp(16, 64);
        let down = downscale(&img, 4, Interp::Bicubic).unwrap();
        // downsampling taps never touch the border, so the small ramp is exact
        for x in 0..16 {
            let expect = 0.01 * (4.0 * x as f32 + 1.5) - 0.3;
            assert!((down.get(0, 2, x) - expect).abs() < 1e-5);
        }
        let up = upscale(&down, 4, Interp::Bicubic).unwrap();
        for x in 6..58 {
            assert!((up.get(0, 5, x) - img.get(0, 5, x)).abs() < 1e-5, "x={x}");
        }
    }

    #[test]
    fn resize_constant_is_constant() {
        let img = ChwImage::filled(2, 12, 20, 0.25);
        for mode in [Interp::Bicubic, Interp::Bilinear, Interp::Nearest] {
            let r = resize(&img, 7, 31, mode).unwrap();
            assert!(r.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn nearest_downscale_picks_centres() {
        let img = ChwImage::from_fn(1, 8, 8, |_, y, x| (y * 8 + x) as f32);
        let d = downscale(&img, 4, Interp::Nearest).unwrap();
        assert_eq!(d.get(0, 0, 0), (2 * 8 + 2) as f32);
        assert_eq!(d.get(0, 1, 1), (6 * 8 + 6) as f32);
    }

    #[test]
    fn blur_keeps_constants_and_mass() {
        let img = ChwImage::filled(1, 9, 9, 0.7);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.data.iter().all(|v| (v - 0.7).abs() < 1e-6));
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn jpeg_constant_survives_quality_100() {
        let v = 100.0 / 255.0;
        let img = ChwImage::filled(3, 16, 16, v);
        let out = jpeg_roundtrip(&img, 100).unwrap();
        assert!(out.data.iter().all(|x| (x - v).abs() <= 2.0 / 255.0));
    }

    #[test]
    fn downscale_rejects_indivisible() {
        assert!(downscale(&ChwImage::filled(1, 10, 8, 0.0), 4, Interp::Bicubic).is_err());
    }
}
