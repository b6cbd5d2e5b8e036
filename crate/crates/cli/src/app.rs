//! Argument parsing, config resolution and exit-code mapping.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rgbd_diffusion::eval::Metric;
use rgbd_diffusion::sr::DepthLrKind;
use rgbd_diffusion::{Error, Result};

use crate::commands::{self, DiffusionKind};
use crate::config::{RunConfig, OUTPUT_ROOT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rgbd", version, about = "RGBD latent diffusion toolkit")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the root seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to $RGBD_OUTPUT_ROOT/<command> or runs/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a directory of equirectangular HDRs into an RGBD panorama dataset.
    PreparePano {
        #[arg(long)]
        hdr_dir: PathBuf,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        augmentations: Option<usize>,
    },
    /// Build a low-resolution copy of a manifest for super-resolution.
    Degrade {
        #[arg(long)]
        manifest: PathBuf,
    },
    #[command(subcommand)]
    Train(TrainCommand),
    /// Sample panoramas from prompts.
    SamplePano {
        #[arg(long = "prompt", required = true)]
        prompts: Vec<String>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        height: Option<usize>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Upscale a low-resolution manifest by 4x.
    Upscale {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        /// Depth conditioning strategy: d (estimated), o (original), b (bicubic).
        #[arg(long)]
        strategy: Option<DepthLrKind>,
        #[arg(long)]
        depth_estimator: Option<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Compare generated and reference manifests and write a JSON report.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<Metric>>,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        n_points: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Train the RGBD autoencoder.
    Ae(TrainArgs),
    /// Train the panorama denoiser (4 latent channels).
    DiffusionPano(TrainDiffusionArgs),
    /// Train the super-resolution denoiser (8 latent channels).
    DiffusionSr(TrainDiffusionArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint; step numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDiffusionArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    #[arg(long)]
    pub ae: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ae: PathBuf,
    #[arg(long)]
    pub denoiser: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.steps {
            cfg.sampler.steps = s;
        }
        if let Some(g) = self.guidance {
            cfg.sampler.guidance_scale = g;
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PreparePano { .. } => "prepare-pano",
            Command::Degrade { .. } => "degrade",
            Command::Train(TrainCommand::Ae(_)) => "train-ae",
            Command::Train(TrainCommand::DiffusionPano(_)) => "train-diffusion-pano",
            Command::Train(TrainCommand::DiffusionSr(_)) => "train-diffusion-sr",
            Command::SamplePano { .. } => "sample-pano",
            Command::Upscale { .. } => "upscale",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Json(_)
        | Error::Checkpoint(_)
        | Error::Shape(_) => EXIT_DATA,
        Error::Numerical(_) | Error::Candle(_) => EXIT_NUMERICAL,
    }
}

fn output_dir(cli_out: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

/// Loads the config and folds command-line overrides into it.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.eval.seed = s;
    }
    match &cli.command {
        Command::PreparePano {
            height, augmentations, ..
        } => {
            if let Some(h) = height {
                cfg.pano.prep.height = *h;
            }
            if let Some(a) = augmentations {
                cfg.pano.prep.augmentations = *a;
            }
        }
        Command::Train(t) => {
            let steps = match t {
                TrainCommand::Ae(a) => a.steps,
                TrainCommand::DiffusionPano(a) | TrainCommand::DiffusionSr(a) => a.common.steps,
            };
            if let Some(s) = steps {
                match t {
                    TrainCommand::Ae(_) => cfg.ae_train.steps = s,
                    _ => cfg.diffusion_train.steps = s,
                }
            }
        }
        Command::SamplePano { height, sampler, .. } => {
            if let Some(h) = height {
                cfg.pano.sample_height = *h;
            }
            sampler.apply(&mut cfg);
        }
        Command::Upscale {
            strategy,
            depth_estimator,
            sampler,
            ..
        } => {
            if let Some(s) = strategy {
                cfg.sr.depth_lr = *s;
            }
            if let Some(d) = depth_estimator {
                cfg.sr.depth_estimator = d.clone();
            }
            sampler.apply(&mut cfg);
        }
        Command::Evaluate {
            metrics,
            percentile,
            n_points,
            ..
        } => {
            if let Some(m) = metrics {
                cfg.eval.metrics = m.clone();
            }
            if let Some(p) = percentile {
                cfg.eval.percentile = *p;
            }
            if let Some(n) = n_points {
                cfg.eval.n_points = *n;
            }
        }
        Command::Degrade { .. } => {}
    }
    cfg.eval.depth_bits = cfg.depth_bits;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command and returns the paths it reports.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(cli)?;
    let out = output_dir(cli.out.as_deref(), cli.command.name());
    match &cli.command {
        Command::PreparePano { hdr_dir, .. } => commands::prepare_pano(&cfg, hdr_dir, &out),
        Command::Degrade { manifest } => Ok(vec![commands::degrade(&cfg, manifest, &out)?]),
        Command::Train(TrainCommand::Ae(a)) => Ok(vec![commands::train_autoencoder(
            &cfg,
            &a.manifest,
            &out,
            a.resume.as_deref(),
        )?]),
        Command::Train(TrainCommand::DiffusionPano(a)) => Ok(vec![commands::train_diffusion(
            &cfg,
            DiffusionKind::Pano,
            &a.common.manifest,
            &a.ae,
            &out,
            a.common.resume.as_deref(),
        )?]),
        Command::Train(TrainCommand::DiffusionSr(a)) => Ok(vec![commands::train_diffusion(
            &cfg,
            DiffusionKind::Sr,
            &a.common.manifest,
            &a.ae,
            &out,
            a.common.resume.as_deref(),
        )?]),
        Command::SamplePano { prompts, models, .. } => {
            commands::sample_panoramas(&cfg, prompts, &models.ae, &models.denoiser, &out)
        }
        Command::Upscale { manifest, models, .. } => Ok(vec![commands::upscale_manifest(
            &cfg,
            manifest,
            &models.ae,
            &models.denoiser,
            &out,
        )?]),
        Command::Evaluate {
            generated, reference, ..
        } => {
            let report = match &cli.out {
                Some(p) if p.extension().is_some_and(|e| e == "json") => p.clone(),
                _ => out.join("report.json"),
            };
            Ok(vec![commands::evaluate(&cfg, generated, reference, &report)?])
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
