//! Image-quality and distribution metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ChwImage;

/// Negative eigenvalues down to `-EIG_TOLERANCE` are treated as zero.
pub const EIG_TOLERANCE: f64 = 1e-6;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::InvalidInput("empty input".into()));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    same_len(a.len(), b.len())?;
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr_images(a: &ChwImage, b: &ChwImage, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    psnr(&a.data, &b.data, peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Normalised Gaussian taps of exactly `window` length.
pub fn ssim_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|j| k[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with a Gaussian window over all fully-contained window
/// positions, averaged over channels.
pub fn ssim(a: &ChwImage, b: &ChwImage, params: &SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if params.window == 0 || params.window > a.height || params.window > a.width {
        return Err(Error::InvalidInput(format!(
            "ssim window {} does not fit a {}x{} image",
            params.window, a.height, a.width
        )));
    }
    let k = ssim_taps(params.window, params.sigma);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    for c in 0..a.channels {
        let pa: Vec<f64> = a.plane(c).iter().map(|v| *v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|v| *v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / a.channels as f64)
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "sigma {:?} does not match d = {d}",
                sigma.shape()
            )));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-9 * scale {
            return Err(Error::InvalidInput("sigma is not symmetric".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// Mean and unbiased covariance of `rows` (N ≥ 2 feature vectors).
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 feature vectors, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature vectors must share a positive dimension".into()));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax().max(1.0);
    let eig = SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if !v.is_finite() || *v < -EIG_TOLERANCE * scale {
            return Err(Error::Numerical(format!(
                "matrix square root of a non-PSD matrix (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`. The trace of the product root
/// is taken from the symmetric form `Σ1^{1/2} Σ2 Σ1^{1/2}`, which has the
/// same eigenvalues.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            s1.dim(),
            s2.dim()
        )));
    }
    let r1 = sqrtm_psd(&s1.sigma)?;
    let inner = &r1 * &s2.sigma * &r1;
    let tr_cross = sqrtm_psd(&inner)?.trace();
    let diff = (&s1.mu - &s2.mu).norm_squared();
    let d = diff + s1.sigma.trace() + s2.sigma.trace() - 2.0 * tr_cross;
    let scale = (s1.sigma.trace() + s2.sigma.trace() + diff).max(1.0);
    if d < -EIG_TOLERANCE * scale {
        return Err(Error::Numerical(format!("negative Frechet distance {d}")));
    }
    Ok(d.max(0.0))
}

/// Mean and population standard deviation over `splits` contiguous splits
/// of `exp(E_x KL(p(y|x) ‖ p(y)))`.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if n == 0 || splits == 0 || splits > n {
        return Err(Error::InvalidInput(format!(
            "need 1 <= splits <= N, got splits={splits}, N={n}"
        )));
    }
    let k = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k || k == 0 {
            return Err(Error::Shape(format!("row {i} has {} classes, expected {k}", row.len())));
        }
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let m = part.len() as f64;
            let marginal: Vec<f64> = (0..k).map(|j| part.iter().map(|r| r[j]).sum::<f64>() / m).collect();
            let kl: f64 = part
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p.ln() - q.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            kl.exp()
        })
        .collect();
    Ok(mean_std(&scores))
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `100 · cos(image_emb, text_emb)`.
pub fn clip_similarity(image_emb: &[f64], text_emb: &[f64]) -> Result<f64> {
    same_len(image_emb.len(), text_emb.len())?;
    let na = image_emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = text_emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("zero embedding vector".into()));
    }
    let dot: f64 = image_emb.iter().zip(text_emb).map(|(a, b)| a * b).sum();
    Ok(100.0 * (dot / (na * nb)).clamp(-1.0, 1.0))
}
