//! Quantitative evaluation: PSNR, SSIM, Fréchet distance, Inception Score,
//! CLIP-style similarity and the disparity-space depth protocol.

pub mod depth;
pub mod metrics;
pub mod providers;
pub mod run;

pub use depth::{
    aggregate_depth_eval, aligned_relative_error, evaluate_depth, fit_scale_shift, mare, percentile, DepthAggregate,
    DepthEvalReport, MareResult,
};
pub use metrics::{
    clip_similarity, frechet_distance, inception_score, mean_std, psnr, psnr_from_mse, psnr_images, sqrtm_psd, ssim,
    ssim_taps, FeatureStats, SsimParams,
};
pub use providers::{
    Classifier, FeatureExtractor, HashedClipLike, ImageTextEmbedder, ProjectionClassifier, RandomProjection,
};
pub use run::{
    evaluate_run, evaluate_samples, EvalConfig, EvalReport, Metric, MetricSummary, ProviderConfig, Providers,
};
