//! Whole-run evaluation over two id-aligned manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::depth::{evaluate_depth, DepthEvalReport, DEFAULT_EPS, DEFAULT_N_POINTS, DEFAULT_PERCENTILE};
use super::metrics::{
    clip_similarity, frechet_distance, inception_score, mean_std, psnr_images, ssim, FeatureStats, SsimParams,
};
use super::providers::{
    Classifier, FeatureExtractor, HashedClipLike, ImageTextEmbedder, ProjectionClassifier, RandomProjection,
};
use crate::error::{Error, Result};
use crate::imaging::ChwImage;
use crate::rgbd::{DatasetManifest, RgbdSample, DEFAULT_DEPTH_BITS};

pub const REPORT_FORMAT: &str = "rgbd-eval-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Fid,
    Is,
    Clip,
    Mare,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Psnr,
        Metric::Ssim,
        Metric::Fid,
        Metric::Is,
        Metric::Clip,
        Metric::Mare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Fid => "fid",
            Metric::Is => "is",
            Metric::Clip => "clip",
            Metric::Mare => "mare",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Settings of the built-in projection providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub seed: u64,
    pub thumbnail: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub temperature: f64,
    pub embed_dim: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            thumbnail: 16,
            feature_dim: 16,
            num_classes: 10,
            temperature: 0.25,
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub percentile: f64,
    pub n_points: usize,
    pub seed: u64,
    pub eps: f64,
    pub is_splits: usize,
    pub ssim: SsimParams,
    pub depth_bits: u8,
    pub providers: ProviderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            percentile: DEFAULT_PERCENTILE,
            n_points: DEFAULT_N_POINTS,
            seed: 0,
            eps: DEFAULT_EPS,
            is_splits: 10,
            ssim: SsimParams::default(),
            depth_bits: DEFAULT_DEPTH_BITS,
            providers: ProviderConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics selected".into()));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Config(format!(
                "percentile must be in [0, 100], got {}",
                self.percentile
            )));
        }
        if self.n_points < 2 || self.is_splits == 0 || !(self.eps > 0.0) {
            return Err(Error::Config(
                "n_points >= 2, is_splits >= 1 and eps > 0 are required".into(),
            ));
        }
        Ok(())
    }
}

/// Serialises non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum F {
            N(f64),
            S(String),
        }
        match F::deserialize(d)? {
            F::N(v) => Ok(v),
            F::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad float {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(with = "json_float")]
    pub value: f64,
    /// Spread across samples (or across splits for IS); `nan` when
    /// undefined.
    #[serde(with = "json_float")]
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub seed: u64,
    pub providers: BTreeMap<String, String>,
    pub config: EvalConfig,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub depth: Option<DepthEvalReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::rgbd::ensure_parent(path)?;
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn summarize(values: &[f64]) -> MetricSummary {
    let count = values.len();
    if values.iter().any(|v| v.is_infinite()) {
        let all = values.iter().all(|v| *v == f64::INFINITY);
        let value = if values.contains(&f64::NEG_INFINITY) {
            f64::NAN
        } else {
            f64::INFINITY
        };
        return MetricSummary {
            value,
            std: if all { 0.0 } else { f64::NAN },
            count,
        };
    }
    let (value, std) = mean_std(values);
    MetricSummary { value, std, count }
}

fn to_unit(rgb: &ChwImage) -> ChwImage {
    rgb.map(|v| (v + 1.0) * 0.5)
}

fn to_disparity(depth: &ChwImage) -> ChwImage {
    depth.map(|v| (v + 1.0) * 0.5)
}

/// Providers used by [`evaluate_samples`].
pub struct Providers {
    pub features: Box<dyn FeatureExtractor>,
    pub classifier: Box<dyn Classifier>,
    pub embedder: Box<dyn ImageTextEmbedder>,
}

impl Providers {
    pub fn projection(cfg: &ProviderConfig) -> Result<Self> {
        Ok(Self {
            features: Box::new(RandomProjection::new(cfg.feature_dim, cfg.thumbnail, cfg.seed)?),
            classifier: Box::new(ProjectionClassifier::new(
                cfg.num_classes,
                cfg.thumbnail,
                cfg.seed ^ 1,
                cfg.temperature,
            )?),
            embedder: Box::new(HashedClipLike::new(cfg.embed_dim, cfg.thumbnail, cfg.seed ^ 2)?),
        })
    }
}

/// Computes the selected metrics over id-aligned sample sets. Samples are
/// processed in id order, so the result does not depend on input order.
pub fn evaluate_samples(
    generated: &[RgbdSample],
    reference: &[RgbdSample],
    cfg: &EvalConfig,
    providers: &Providers,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut gen: Vec<&RgbdSample> = generated.iter().collect();
    let mut refs: Vec<&RgbdSample> = reference.iter().collect();
    gen.sort_by(|a, b| a.id.cmp(&b.id));
    refs.sort_by(|a, b| a.id.cmp(&b.id));
    let gen_ids: Vec<&str> = gen.iter().map(|s| s.id.as_str()).collect();
    let ref_ids: Vec<&str> = refs.iter().map(|s| s.id.as_str()).collect();
    if gen_ids != ref_ids {
        let missing: Vec<&&str> = gen_ids.iter().filter(|i| !ref_ids.contains(i)).take(5).collect();
        return Err(Error::Data(format!(
            "generated and reference ids differ ({} vs {} samples; e.g. unmatched {missing:?})",
            gen_ids.len(),
            ref_ids.len()
        )));
    }
    if gen_ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("duplicate sample ids".into()));
    }
    if gen.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut metrics = BTreeMap::new();
    let mut depth = None;
    let mut selected = cfg.metrics.clone();
    selected.sort();
    selected.dedup();
    for m in selected {
        match m {
            Metric::Psnr => {
                let v = gen
                    .iter()
                    .zip(&refs)
                    .map(|(g, r)| psnr_images(&to_unit(&g.rgb), &to_unit(&r.rgb), 1.0))
                    .collect::<Result<Vec<_>>>()?;
                metrics.insert(m.name().to_string(), summarize(&v));
            }
            Metric::Ssim => {
                let v = gen
                    .iter()
                    .zip(&refs)
                    .map(|(g, r)| ssim(&to_unit(&g.rgb), &to_unit(&r.rgb), &cfg.ssim))
                    .collect::<Result<Vec<_>>>()?;
                metrics.insert(m.name().to_string(), summarize(&v));
            }
            Metric::Fid => {
                let fg = gen
                    .iter()
                    .map(|s| providers.features.features(&s.rgb))
                    .collect::<Result<Vec<_>>>()?;
                let fr = refs
                    .iter()
                    .map(|s| providers.features.features(&s.rgb))
                    .collect::<Result<Vec<_>>>()?;
                let d = frechet_distance(&FeatureStats::from_features(&fg)?, &FeatureStats::from_features(&fr)?)?;
                metrics.insert(
                    m.name().to_string(),
                    MetricSummary {
                        value: d,
                        std: f64::NAN,
                        count: gen.len(),
                    },
                );
            }
            Metric::Is => {
                let probs = gen
                    .iter()
                    .map(|s| providers.classifier.probabilities(&s.rgb))
                    .collect::<Result<Vec<_>>>()?;
                let (value, std) = inception_score(&probs, cfg.is_splits.min(probs.len()))?;
                metrics.insert(
                    m.name().to_string(),
                    MetricSummary {
                        value,
                        std,
                        count: gen.len(),
                    },
                );
            }
            Metric::Clip => {
                let v = gen
                    .iter()
                    .map(|s| {
                        clip_similarity(
                            &providers.embedder.embed_image(&s.rgb)?,
                            &providers.embedder.embed_text(&s.caption)?,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                metrics.insert(m.name().to_string(), summarize(&v));
            }
            Metric::Mare => {
                let items: Vec<(String, ChwImage, ChwImage)> = gen
                    .iter()
                    .zip(&refs)
                    .map(|(g, r)| (g.id.clone(), to_disparity(&g.depth), to_disparity(&r.depth)))
                    .collect();
                let rep = evaluate_depth(&items, cfg.n_points, cfg.percentile, cfg.seed, cfg.eps)?;
                metrics.insert(
                    m.name().to_string(),
                    MetricSummary {
                        value: rep.mare_mean,
                        std: rep.mare_std,
                        count: items.len(),
                    },
                );
                metrics.insert(
                    format!("mare_p{}", cfg.percentile),
                    MetricSummary {
                        value: rep.mare_filtered_mean,
                        std: rep.mare_filtered_std,
                        count: rep.kept,
                    },
                );
                depth = Some(rep);
            }
        }
    }
    let providers_ids = BTreeMap::from([
        ("features".to_string(), providers.features.id()),
        ("classifier".to_string(), providers.classifier.id()),
        ("embedder".to_string(), providers.embedder.id()),
    ]);
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        n_samples: gen.len(),
        seed: cfg.seed,
        providers: providers_ids,
        config: cfg.clone(),
        metrics,
        depth,
    })
}

/// Loads both manifests and evaluates them with the built-in providers.
pub fn evaluate_run(generated: &DatasetManifest, reference: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let providers = Providers::projection(&cfg.providers)?;
    let gen = generated.load_all(cfg.depth_bits)?;
    let refs = reference.load_all(cfg.depth_bits)?;
    evaluate_samples(&gen, &refs, cfg, &providers)
}
