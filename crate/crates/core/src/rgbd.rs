//! RGBD samples, dataset manifests and raster I/O.
//!
//! Colour is stored as 8-bit RGB, depth as a single-channel integer raster
//! holding normalised disparity (16 bits unless stated otherwise). In memory
//! both are mapped linearly onto [-1, 1].

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{from_rgb8, to_rgb8, ChwImage};

/// Spatial downsampling factor of the autoencoder; sample sizes must be
/// multiples of it.
pub const SPATIAL_FACTOR: usize = 8;

pub const DEFAULT_DEPTH_BITS: u8 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub rgb: ChwImage,
    pub depth: ChwImage,
    pub caption: String,
    pub id: String,
    pub source_depth_bits: u8,
}

impl RgbdSample {
    pub fn new(rgb: ChwImage, depth: ChwImage, caption: impl Into<String>, id: impl Into<String>) -> Result<Self> {
        let s = Self {
            rgb,
            depth,
            caption: caption.into(),
            id: id.into(),
            source_depth_bits: DEFAULT_DEPTH_BITS,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb.channels != 3 || self.depth.channels != 1 {
            return Err(Error::Shape(format!(
                "expected 3 rgb + 1 depth channels, got {} + {}",
                self.rgb.channels, self.depth.channels
            )));
        }
        if (self.rgb.height, self.rgb.width) != (self.depth.height, self.depth.width) {
            return Err(Error::Shape(format!(
                "rgb {}x{} and depth {}x{} differ",
                self.rgb.height, self.rgb.width, self.depth.height, self.depth.width
            )));
        }
        check_divisible(self.rgb.height, self.rgb.width)?;
        let in_range = |img: &ChwImage| img.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v));
        if !in_range(&self.rgb) || !in_range(&self.depth) {
            return Err(Error::InvalidInput(format!(
                "sample {} has values outside [-1,1] or non-finite",
                self.id
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SPATIAL_FACTOR) || !w.is_multiple_of(SPATIAL_FACTOR) {
        return Err(Error::Shape(format!(
            "resolution {h}x{w} is not a positive multiple of {SPATIAL_FACTOR}"
        )));
    }
    Ok(())
}

/// `[0,255]` → `[-1,1]`.
pub fn rgb_from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

pub fn rgb_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

/// `[0, 2^bits - 1]` → `[-1,1]`.
pub fn depth_from_int(v: u32, bits: u8) -> f32 {
    let max = ((1u64 << bits) - 1) as f64;
    (v as f64 / max * 2.0 - 1.0) as f32
}

pub fn depth_to_int(v: f32, bits: u8) -> u32 {
    let max = ((1u64 << bits) - 1) as f64;
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 0.5 * max).round() as u32
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::image(path, e))
}

pub fn load_rgb(path: &Path) -> Result<ChwImage> {
    match open(path)? {
        DynamicImage::ImageRgb8(img) => Ok(from_rgb8(&img, |u| u * 2.0 - 1.0)),
        other => Err(Error::Data(format!(
            "{}: expected 8-bit 3-channel image, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn load_depth(path: &Path, bits: u8) -> Result<ChwImage> {
    if !(1..=16).contains(&bits) {
        return Err(Error::InvalidInput(format!("unsupported depth bit depth {bits}")));
    }
    let max = (1u32 << bits) - 1;
    let (w, h, raw): (u32, u32, Vec<u32>) = match open(path)? {
        DynamicImage::ImageLuma16(img) => (img.width(), img.height(), img.pixels().map(|p| p[0] as u32).collect()),
        DynamicImage::ImageLuma8(img) if bits <= 8 => {
            (img.width(), img.height(), img.pixels().map(|p| p[0] as u32).collect())
        }
        other => {
            return Err(Error::Data(format!(
                "{}: expected single-channel {bits}-bit depth raster, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    if let Some(bad) = raw.iter().find(|&&v| v > max) {
        return Err(Error::Data(format!(
            "{}: depth value {bad} exceeds {bits}-bit range",
            path.display()
        )));
    }
    let data = raw.into_iter().map(|v| depth_from_int(v, bits)).collect();
    ChwImage::new(1, h as usize, w as usize, data)
}

/// Loads and validates an RGBD pair. The id defaults to the RGB file stem.
pub fn load_rgbd(rgb_path: &Path, depth_path: &Path, bits: u8) -> Result<RgbdSample> {
    let rgb = load_rgb(rgb_path)?;
    let depth = load_depth(depth_path, bits)?;
    let id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut s = RgbdSample {
        rgb,
        depth,
        caption: String::new(),
        id,
        source_depth_bits: bits,
    };
    s.validate()?;
    s.source_depth_bits = bits;
    Ok(s)
}

pub fn save_rgb(img: &ChwImage, path: &Path) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("rgb save needs 3 channels, got {}", img.channels)));
    }
    ensure_parent(path)?;
    to_rgb8(img, |v| (v + 1.0) * 0.5)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub fn save_depth(img: &ChwImage, path: &Path, bits: u8) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Shape(format!(
            "depth save needs 1 channel, got {}",
            img.channels
        )));
    }
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([depth_to_int(img.get(0, y as usize, x as usize), bits) as u16])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(())
}

/// Concatenates a sample into one 4×H×W raster ordered [R, G, B, D].
pub fn merge_channels(sample: &RgbdSample) -> Result<ChwImage> {
    ChwImage::concat_channels(&[&sample.rgb, &sample.depth])
}

/// Inverse of [`merge_channels`].
pub fn split_channels(x: &ChwImage) -> Result<(ChwImage, ChwImage)> {
    if x.channels != 4 {
        return Err(Error::Shape(format!("expected 4 channels, got {}", x.channels)));
    }
    Ok((x.select_channels(0..3)?, x.select_channels(3..4)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub caption: String,
    /// Full-resolution depth kept alongside low-resolution inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_depth_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format: String,
    version: u32,
    resolution: (usize, usize),
    split: Split,
}

const MANIFEST_FORMAT: &str = "rgbd-manifest";
const MANIFEST_VERSION: u32 = 1;

/// A JSON-lines manifest: one header record, then one record per sample.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub resolution: (usize, usize),
    pub split: Split,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(resolution: (usize, usize), split: Split, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries: Vec::new(),
            resolution,
            split,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.check_unique()?;
        let mut out = serde_json::to_string(&ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            resolution: self.resolution,
            split: self.split,
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Data("manifest is empty".into()))?)
                .map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let entries = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest record {}: {e}", i + 1))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let m = Self {
            entries,
            resolution: header.resolution,
            split: header.split,
            base_dir: base_dir.into(),
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.rgb_path, &e.depth_path].into_iter().chain(e.hr_depth_path.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "manifest entry {}: missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_entry(&self, e: &ManifestEntry, bits: u8) -> Result<RgbdSample> {
        let mut s = load_rgbd(&self.resolve(&e.rgb_path), &self.resolve(&e.depth_path), bits)?;
        if (s.height(), s.width()) != self.resolution {
            return Err(Error::Data(format!(
                "entry {} is {}x{}, manifest says {}x{}",
                e.id,
                s.height(),
                s.width(),
                self.resolution.0,
                self.resolution.1
            )));
        }
        s.id = e.id.clone();
        s.caption = e.caption.clone();
        Ok(s)
    }

    pub fn load_all(&self, bits: u8) -> Result<Vec<RgbdSample>> {
        self.check_paths()?;
        self.entries.iter().map(|e| self.load_entry(e, bits)).collect()
    }
}

/// Writes a sample's rasters to `<dir>/<id>_rgb.png` / `<dir>/<id>_depth.png`
/// and returns the manifest entry with paths relative to `dir`.
pub fn write_sample(sample: &RgbdSample, dir: &Path) -> Result<ManifestEntry> {
    let rgb_rel = PathBuf::from(format!("{}_rgb.png", sample.id));
    let depth_rel = PathBuf::from(format!("{}_depth.png", sample.id));
    save_rgb(&sample.rgb, &dir.join(&rgb_rel))?;
    save_depth(&sample.depth, &dir.join(&depth_rel), sample.source_depth_bits)?;
    Ok(ManifestEntry {
        id: sample.id.clone(),
        rgb_path: rgb_rel,
        depth_path: depth_rel,
        caption: sample.caption.clone(),
        hr_depth_path: None,
    })
}
