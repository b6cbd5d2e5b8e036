//! Subcommand implementations. Each one validates everything it can
//! before creating its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use rgbd_diffusion::autoencoder::{estimate_latent_scale, train_ae, Autoencoder};
use rgbd_diffusion::diffusion::{train_denoiser, LatentDiffusion, TextEncoder};
use rgbd_diffusion::eval::{evaluate_run, EvalConfig};
use rgbd_diffusion::imaging::{downscale, ChwImage, Interp};
use rgbd_diffusion::nn::Checkpoint;
use rgbd_diffusion::pano::{augment_hdr, load_hdr, pano_training_examples, sample_pano, seam_discontinuity, Panorama};
use rgbd_diffusion::rgbd::{
    load_depth, load_rgb, merge_channels, write_sample, DatasetManifest, ManifestEntry, RgbdSample, Split,
};
use rgbd_diffusion::seed;
use rgbd_diffusion::sr::{
    make_lr_depth, sr_training_examples, upscale, DepthEstimator, DepthLrKind, DepthLrStrategy, LumaDepth, SCALE_FACTOR,
};
use rgbd_diffusion::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const AE_CHECKPOINT: &str = "ae.safetensors";
pub const DENOISER_CHECKPOINT: &str = "denoiser.safetensors";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn estimator(name: &str) -> Result<Option<Arc<dyn DepthEstimator>>> {
    match name {
        "luma" => Ok(Some(Arc::new(LumaDepth))),
        "none" => Ok(None),
        other => Err(Error::Config(format!(
            "unknown depth estimator {other:?}; available: luma, none"
        ))),
    }
}

fn strategy(cfg: &RunConfig) -> Result<DepthLrStrategy> {
    let est = if cfg.sr.depth_lr == DepthLrKind::Estimated {
        estimator(&cfg.sr.depth_estimator)?
    } else {
        None
    };
    DepthLrStrategy::new(cfg.sr.depth_lr, est)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Data(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

pub fn load_ae(path: &Path) -> Result<Autoencoder> {
    require_file(path, "autoencoder checkpoint")?;
    Autoencoder::from_checkpoint(&Checkpoint::load(path)?, &Device::Cpu)
}

pub fn load_denoiser(path: &Path) -> Result<LatentDiffusion> {
    require_file(path, "denoiser checkpoint")?;
    LatentDiffusion::from_checkpoint(&Checkpoint::load(path)?, &Device::Cpu)
}

#[derive(Serialize)]
struct LossLog<'a> {
    kind: &'a str,
    start_step: usize,
    end_step: usize,
    losses: &'a [f32],
}

fn caption_for(hdr: &Path) -> Result<String> {
    let side = hdr.with_extension("txt");
    if side.is_file() {
        let text = fs::read_to_string(&side).map_err(io_err(&side))?;
        let t = text.trim();
        if !t.is_empty() {
            return Ok(t.to_string());
        }
    }
    let stem = hdr.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    Ok(stem.replace(['_', '-'], " "))
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))
}

/// Tone-maps, rolls and captions every `.hdr` in `hdr_dir`.
pub fn prepare_pano(cfg: &RunConfig, hdr_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let est = estimator(&cfg.sr.depth_estimator)?
        .ok_or_else(|| Error::Config("panorama preparation needs a depth estimator".into()))?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(hdr_dir)
        .map_err(io_err(hdr_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("hdr"))
        })
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Data(format!("no .hdr files in {}", hdr_dir.display())));
    }
    let n_val = (inputs.len() as f64 * cfg.pano.val_fraction).round() as usize;
    let n_train = inputs.len() - n_val;
    let prep = &cfg.pano.prep;
    let res = (prep.height, 2 * prep.height);
    let mut train = DatasetManifest::new(res, Split::Train, out);
    let mut val = DatasetManifest::new(res, Split::Val, out);
    let mut log = Vec::new();
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let images = out.join("images");
    for (i, path) in inputs.iter().enumerate() {
        let stem = stem_of(path)?;
        let hdr = load_hdr(path)?;
        let caption = caption_for(path)?;
        log::info!("{stem}: {}x{} hdr, caption {caption:?}", hdr.height, hdr.width);
        let items = augment_hdr(
            &hdr,
            &stem,
            &caption,
            est.as_ref(),
            prep,
            seed::substream(cfg.seed, &format!("hdr:{stem}")),
        )?;
        for (pano, aug) in items {
            let mut entry = write_sample(&pano.rgbd, &images)?;
            entry.rgb_path = Path::new("images").join(&entry.rgb_path);
            entry.depth_path = Path::new("images").join(&entry.depth_path);
            if i < n_train { &mut train } else { &mut val }.entries.push(entry);
            log.push(aug);
        }
    }
    let mut written = vec![out.join("train.jsonl")];
    train.write(&written[0])?;
    if !val.is_empty() {
        written.push(out.join("val.jsonl"));
        val.write(&written[1])?;
    }
    write_jsonl(&out.join("augmentations.jsonl"), &log)?;
    Ok(written)
}

fn load_samples(cfg: &RunConfig, manifest: &Path) -> Result<Vec<RgbdSample>> {
    let m = DatasetManifest::read(manifest)?;
    if m.is_empty() {
        return Err(Error::Data(format!("manifest {} has no entries", manifest.display())));
    }
    m.load_all(cfg.depth_bits)
}

fn resume_checkpoint(resume: Option<&Path>, kind: &str) -> Result<Option<Checkpoint>> {
    match resume {
        Some(p) => {
            require_file(p, "resume checkpoint")?;
            let ck = Checkpoint::load(p)?;
            ck.expect_kind(kind)?;
            Ok(Some(ck))
        }
        None => Ok(None),
    }
}

pub fn train_autoencoder(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let resumed = resume_checkpoint(resume, rgbd_diffusion::autoencoder::CHECKPOINT_KIND)?;
    let samples = load_samples(cfg, manifest)?;
    let data = samples
        .iter()
        .map(|s| merge_channels(s)?.to_tensor(&Device::Cpu))
        .collect::<Result<Vec<_>>>()?;
    let (mut model, start, mut log) = match &resumed {
        Some(ck) => (
            Autoencoder::from_checkpoint(ck, &Device::Cpu)?,
            ck.step,
            ck.loss_log.clone(),
        ),
        None => (
            Autoencoder::new(
                cfg.autoencoder.clone(),
                seed::substream(cfg.seed, "init"),
                DType::F32,
                &Device::Cpu,
            )?,
            0,
            Vec::new(),
        ),
    };
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let losses = train_ae(&model, &data, &cfg.ae_train, seed::substream(cfg.seed, "data"), start)?;
    let scale = estimate_latent_scale(&model, &data)?;
    model.set_latent_scale(scale)?;
    let end = start + losses.len();
    log::info!(
        "autoencoder: steps {start}..{end}, last loss {:?}, latent scale {scale:.4}",
        losses.last()
    );
    write_json(
        &out.join("ae_loss.json"),
        &LossLog {
            kind: "ae",
            start_step: start,
            end_step: end,
            losses: &losses,
        },
    )?;
    log.extend(&losses);
    let path = out.join(AE_CHECKPOINT);
    model.to_checkpoint(end, log)?.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionKind {
    Pano,
    Sr,
}

impl DiffusionKind {
    fn channels(self) -> usize {
        match self {
            DiffusionKind::Pano => 4,
            DiffusionKind::Sr => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DiffusionKind::Pano => "diffusion-pano",
            DiffusionKind::Sr => "diffusion-sr",
        }
    }
}

fn check_channels(kind: DiffusionKind, in_channels: usize) -> Result<()> {
    if in_channels != kind.channels() {
        return Err(Error::Config(format!(
            "{} needs diffusion.denoiser.in_channels = {}, got {in_channels}",
            kind.name(),
            kind.channels()
        )));
    }
    Ok(())
}

pub fn train_diffusion(
    cfg: &RunConfig,
    kind: DiffusionKind,
    manifest: &Path,
    ae_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let resumed = resume_checkpoint(resume, rgbd_diffusion::diffusion::CHECKPOINT_KIND)?;
    let (model, start, mut log) = match &resumed {
        Some(ck) => (
            LatentDiffusion::from_checkpoint(ck, &Device::Cpu)?,
            ck.step,
            ck.loss_log.clone(),
        ),
        None => {
            check_channels(kind, cfg.diffusion.denoiser.in_channels)?;
            (
                LatentDiffusion::new(
                    cfg.diffusion.clone(),
                    seed::substream(cfg.seed, "init"),
                    DType::F32,
                    &Device::Cpu,
                )?,
                0,
                Vec::new(),
            )
        }
    };
    check_channels(kind, model.unet.in_channels())?;
    let strat = if kind == DiffusionKind::Sr {
        Some(strategy(cfg)?)
    } else {
        None
    };
    let ae = load_ae(ae_path)?;
    let samples = load_samples(cfg, manifest)?;
    let examples = match kind {
        DiffusionKind::Pano => {
            for s in &samples {
                Panorama::new(s.clone())?;
            }
            pano_training_examples(&samples, &ae, &model.text)?
        }
        DiffusionKind::Sr => {
            let strat = strat.expect("set for sr");
            sr_training_examples(
                &samples,
                &ae,
                &model.text,
                &cfg.degradation,
                &strat,
                seed::substream(cfg.seed, "degrade"),
            )?
            .0
        }
    };
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let uncond = model.text.unconditional()?.tokens_embedding;
    let losses = train_denoiser(
        &model.unet,
        &examples,
        &uncond,
        &cfg.diffusion_train,
        &model.schedule,
        seed::substream(cfg.seed, "data"),
        start,
    )?;
    let end = start + losses.len();
    log::info!("{}: steps {start}..{end}, last loss {:?}", kind.name(), losses.last());
    write_json(
        &out.join("denoiser_loss.json"),
        &LossLog {
            kind: kind.name(),
            start_step: start,
            end_step: end,
            losses: &losses,
        },
    )?;
    log.extend(&losses);
    let path = out.join(DENOISER_CHECKPOINT);
    model.to_checkpoint(end, log)?.save(&path)?;
    Ok(path)
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    prompt: &'a str,
    seed: u64,
    sampler: &'a rgbd_diffusion::diffusion::SamplerConfig,
    height: usize,
    width: usize,
    seam_discontinuity: f64,
    rgb: String,
    depth: String,
}

pub fn sample_panoramas(
    cfg: &RunConfig,
    prompts: &[String],
    ae_path: &Path,
    den_path: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if prompts.is_empty() {
        return Err(Error::Config("at least one prompt is required".into()));
    }
    let ae = load_ae(ae_path)?;
    let diffusion = load_denoiser(den_path)?;
    check_channels(DiffusionKind::Pano, diffusion.unet.in_channels())?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    // one noise seed for every prompt so outputs differ only by conditioning
    let s = seed::substream(cfg.seed, "sampler");
    let mut written = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let mut pano = sample_pano(prompt, cfg.pano.sample_height, &ae, &diffusion, &cfg.sampler, s)?;
        let name = format!("pano_{i:03}");
        pano.rgbd.id = name.clone();
        pano.rgbd.source_depth_bits = cfg.depth_bits;
        let entry = write_sample(&pano.rgbd, out)?;
        let meta_path = out.join(format!("{name}.json"));
        write_json(
            &meta_path,
            &SampleMeta {
                prompt,
                seed: s,
                sampler: &cfg.sampler,
                height: pano.height(),
                width: pano.width(),
                seam_discontinuity: seam_discontinuity(&pano),
                rgb: entry.rgb_path.display().to_string(),
                depth: entry.depth_path.display().to_string(),
            },
        )?;
        written.push(meta_path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct DegradeRecord {
    id: String,
    seed: u64,
    blur_sigma: f64,
    interp: Interp,
    noise_sigma: f64,
    jpeg_quality: u8,
}

/// Writes low-resolution RGB (degraded) and depth (bicubic ÷4) for every
/// entry, keeping a pointer to the full-resolution depth.
pub fn degrade(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PathBuf> {
    let m = DatasetManifest::read(manifest)?;
    if m.is_empty() {
        return Err(Error::Data(format!("manifest {} has no entries", manifest.display())));
    }
    m.check_paths()?;
    let (h, w) = m.resolution;
    if h % (SCALE_FACTOR * 8) != 0 || w % (SCALE_FACTOR * 8) != 0 {
        return Err(Error::Data(format!(
            "{h}x{w} cannot be reduced x{SCALE_FACTOR} to a multiple of 8"
        )));
    }
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let mut lr = DatasetManifest::new((h / SCALE_FACTOR, w / SCALE_FACTOR), m.split, out);
    let mut records = Vec::new();
    for e in &m.entries {
        let hr = m.load_entry(e, cfg.depth_bits)?;
        let s = seed::substream(cfg.seed, &format!("degrade:{}", e.id));
        let recipe = cfg.degradation.with_seed(s);
        let drawn = recipe.draw()?;
        let lr_rgb = rgbd_diffusion::sr::bsr_degrade(&hr.rgb, &recipe)?;
        let lr_depth = downscale(&hr.depth, SCALE_FACTOR, Interp::Bicubic)?.map(|v| v.clamp(-1.0, 1.0));
        let mut sample = RgbdSample::new(lr_rgb, lr_depth, hr.caption.clone(), hr.id.clone())?;
        sample.source_depth_bits = cfg.depth_bits;
        let mut entry = write_sample(&sample, out)?;
        let hr_depth = m.resolve(&e.depth_path);
        entry.hr_depth_path = Some(fs::canonicalize(&hr_depth).map_err(io_err(&hr_depth))?);
        lr.entries.push(entry);
        records.push(DegradeRecord {
            id: e.id.clone(),
            seed: s,
            blur_sigma: drawn.blur_sigma,
            interp: drawn.interp,
            noise_sigma: drawn.noise_sigma,
            jpeg_quality: drawn.jpeg_quality,
        });
    }
    let path = out.join("lr.jsonl");
    lr.write(&path)?;
    write_jsonl(&out.join("degradations.jsonl"), &records)?;
    Ok(path)
}

#[derive(Serialize)]
struct UpscaleMeta<'a> {
    id: &'a str,
    caption: &'a str,
    strategy: char,
    depth_estimator: Option<String>,
    seed: u64,
    sampler: &'a rgbd_diffusion::diffusion::SamplerConfig,
    input_size: (usize, usize),
    output_size: (usize, usize),
}

fn conditioning_depth(
    m: &DatasetManifest,
    e: &ManifestEntry,
    lr_rgb: &ChwImage,
    strat: &DepthLrStrategy,
    bits: u8,
) -> Result<ChwImage> {
    let hr_size = (lr_rgb.height * SCALE_FACTOR, lr_rgb.width * SCALE_FACTOR);
    let hr_depth = match (&e.hr_depth_path, strat.kind) {
        (Some(p), _) => load_depth(&m.resolve(p), bits)?,
        (None, DepthLrKind::Estimated) => ChwImage::filled(1, hr_size.0, hr_size.1, 0.0),
        (None, k) => {
            return Err(Error::Data(format!(
                "entry {} has no hr_depth_path, required by strategy {}",
                e.id,
                k.letter()
            )))
        }
    };
    if (hr_depth.height, hr_depth.width) != hr_size {
        return Err(Error::Data(format!(
            "entry {}: full-resolution depth is not 4x the input",
            e.id
        )));
    }
    make_lr_depth(&hr_depth, lr_rgb, strat)
}

pub fn upscale_manifest(
    cfg: &RunConfig,
    manifest: &Path,
    ae_path: &Path,
    den_path: &Path,
    out: &Path,
) -> Result<PathBuf> {
    let strat = strategy(cfg)?;
    let m = DatasetManifest::read(manifest)?;
    if m.is_empty() {
        return Err(Error::Data(format!("manifest {} has no entries", manifest.display())));
    }
    m.check_paths()?;
    let ae = load_ae(ae_path)?;
    let diffusion = load_denoiser(den_path)?;
    check_channels(DiffusionKind::Sr, diffusion.unet.in_channels())?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let mut hr = DatasetManifest::new(
        (m.resolution.0 * SCALE_FACTOR, m.resolution.1 * SCALE_FACTOR),
        m.split,
        out,
    );
    for e in &m.entries {
        let lr_rgb = load_rgb(&m.resolve(&e.rgb_path))?;
        let cond = conditioning_depth(&m, e, &lr_rgb, &strat, cfg.depth_bits)?;
        let s = seed::substream(cfg.seed, &format!("upscale:{}", e.id));
        log::info!("upscaling {} ({}x{})", e.id, lr_rgb.height, lr_rgb.width);
        let mut sample = upscale(&lr_rgb, &cond, &e.caption, &ae, &diffusion, &cfg.sampler, s)?;
        sample.id = e.id.clone();
        sample.source_depth_bits = cfg.depth_bits;
        hr.entries.push(write_sample(&sample, out)?);
        write_json(
            &out.join(format!("{}.json", e.id)),
            &UpscaleMeta {
                id: &e.id,
                caption: &e.caption,
                strategy: strat.kind.letter(),
                depth_estimator: strat.estimator.as_ref().map(|x| x.id()),
                seed: s,
                sampler: &cfg.sampler,
                input_size: (lr_rgb.height, lr_rgb.width),
                output_size: (sample.height(), sample.width()),
            },
        )?;
    }
    let path = out.join("upscaled.jsonl");
    hr.write(&path)?;
    Ok(path)
}

pub fn evaluate(cfg: &RunConfig, generated: &Path, reference: &Path, report: &Path) -> Result<PathBuf> {
    let eval: &EvalConfig = &cfg.eval;
    let g = DatasetManifest::read(generated)?;
    let r = DatasetManifest::read(reference)?;
    let rep = evaluate_run(&g, &r, eval)?;
    let dir = report
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    create_dir(dir)?;
    cfg.write_resolved(dir)?;
    rep.write(report)?;
    Ok(report.to_path_buf())
}
