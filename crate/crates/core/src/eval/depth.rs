//! Disparity-space depth protocol: per-sample scale/shift alignment on
//! randomly sampled pixels, MARE, and percentile outlier filtering.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use crate::error::{Error, Result};
use crate::imaging::ChwImage;
use crate::seed;

pub const DEFAULT_N_POINTS: usize = 500;
pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const DEFAULT_EPS: f64 = 1e-3;

/// Least-squares `(s, t)` minimising `Σ (s·pred + t − ref)²`, solved from
/// the centred normal equations.
pub fn fit_scale_shift(pred: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            pred.len(),
            reference.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "scale/shift fit needs >= 2 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mp = pred.iter().sum::<f64>() / nf;
    let mr = reference.iter().sum::<f64>() / nf;
    let (mut spp, mut spr) = (0.0, 0.0);
    for (p, r) in pred.iter().zip(reference) {
        spp += (p - mp) * (p - mp);
        spr += (p - mp) * (r - mr);
    }
    let magnitude = pred.iter().map(|p| p * p).sum::<f64>() / nf;
    if !(spp / nf > 1e-12 * magnitude.max(1e-300)) {
        return Err(Error::Numerical(
            "prediction is constant; scale is not identifiable".into(),
        ));
    }
    let s = spr / spp;
    Ok((s, mr - s * mp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MareResult {
    pub value: f64,
    pub scale: f64,
    pub shift: f64,
}

fn check_maps(pred: &ChwImage, reference: &ChwImage) -> Result<()> {
    if pred.shape() != reference.shape() || pred.channels != 1 {
        return Err(Error::Shape(format!(
            "depth maps must be 1×H×W and equal in shape: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

/// Mean over all pixels of `|s·pred + t − ref| / max(|ref|, eps)` with
/// `(s, t)` fit on `n_points` distinct pixels drawn from `seed`.
pub fn mare(pred: &ChwImage, reference: &ChwImage, n_points: usize, seed: u64, eps: f64) -> Result<MareResult> {
    check_maps(pred, reference)?;
    let total = pred.data.len();
    if n_points < 2 || n_points > total {
        return Err(Error::InvalidInput(format!(
            "n_points must be in 2..={total}, got {n_points}"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut r = seed::rng(seed::substream(seed, "mare-points"));
    let mut idx = index::sample(&mut r, total, n_points).into_vec();
    idx.sort_unstable();
    let p: Vec<f64> = idx.iter().map(|&i| pred.data[i] as f64).collect();
    let q: Vec<f64> = idx.iter().map(|&i| reference.data[i] as f64).collect();
    let (scale, shift) = fit_scale_shift(&p, &q)?;
    if !scale.is_finite() || !shift.is_finite() {
        return Err(Error::Numerical(format!("non-finite alignment ({scale}, {shift})")));
    }
    let value = aligned_relative_error(pred, reference, scale, shift, eps)?;
    Ok(MareResult { value, scale, shift })
}

/// Mean over all pixels of `|scale·pred + shift − ref| / max(|ref|, eps)`.
pub fn aligned_relative_error(pred: &ChwImage, reference: &ChwImage, scale: f64, shift: f64, eps: f64) -> Result<f64> {
    check_maps(pred, reference)?;
    Ok(pred
        .data
        .iter()
        .zip(&reference.data)
        .map(|(p, r)| (scale * *p as f64 + shift - *r as f64).abs() / (*r as f64).abs().max(eps))
        .sum::<f64>()
        / pred.data.len() as f64)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of `v`.
pub fn percentile(v: &[f64], q: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty vector".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidInput(format!("percentile must be in [0, 100], got {q}")));
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAggregate {
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub filtered_mean: f64,
    pub filtered_std: f64,
    pub kept: usize,
}

/// Statistics over all samples and over those at or below the
/// `percentile`-th error.
pub fn aggregate_depth_eval(per_sample: &[f64], percentile_q: f64) -> Result<DepthAggregate> {
    if per_sample.is_empty() {
        return Err(Error::InvalidInput("no per-sample errors to aggregate".into()));
    }
    let threshold = percentile(per_sample, percentile_q)?;
    let kept: Vec<f64> = per_sample.iter().copied().filter(|v| *v <= threshold).collect();
    let (mean, std) = mean_std(per_sample);
    let (filtered_mean, filtered_std) = mean_std(&kept);
    Ok(DepthAggregate {
        mean,
        std,
        threshold,
        // dropping values above a threshold cannot raise the mean; the min
        // guards against summation-order rounding
        filtered_mean: filtered_mean.min(mean),
        filtered_std,
        kept: kept.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalReport {
    pub ids: Vec<String>,
    pub per_sample_mare: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mare_mean: f64,
    pub mare_std: f64,
    pub mare_filtered_mean: f64,
    pub mare_filtered_std: f64,
    pub percentile: f64,
    pub threshold: f64,
    pub kept: usize,
    pub n_points: usize,
    pub seed: u64,
}

/// Runs the protocol over aligned `(id, pred, ref)` triples. The point
/// sample of each item is seeded from `(seed, id)`, so results do not
/// depend on ordering.
pub fn evaluate_depth(
    items: &[(String, ChwImage, ChwImage)],
    n_points: usize,
    percentile_q: f64,
    seed: u64,
    eps: f64,
) -> Result<DepthEvalReport> {
    let mut per = Vec::with_capacity(items.len());
    for (id, pred, reference) in items {
        per.push(mare(
            pred,
            reference,
            n_points,
            seed::substream(seed, &format!("sample:{id}")),
            eps,
        )?);
    }
    let agg = aggregate_depth_eval(&per.iter().map(|m| m.value).collect::<Vec<_>>(), percentile_q)?;
    Ok(DepthEvalReport {
        ids: items.iter().map(|i| i.0.clone()).collect(),
        per_sample_mare: per.iter().map(|m| m.value).collect(),
        scale: per.iter().map(|m| m.scale).collect(),
        shift: per.iter().map(|m| m.shift).collect(),
        mare_mean: agg.mean,
        mare_std: agg.std,
        mare_filtered_mean: agg.filtered_mean,
        mare_filtered_std: agg.filtered_std,
        percentile: percentile_q,
        threshold: agg.threshold,
        kept: agg.kept,
        n_points,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_examples() {
        let r = [0.1, 0.5, 0.9, 1.3];
        let (s, t) = fit_scale_shift(&r, &r).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && t.abs() < 1e-12);
        let p: Vec<f64> = r.iter().map(|v| 2.0 * v + 3.0).collect();
        let (s, t) = fit_scale_shift(&p, &r).unwrap();
        assert!((s - 0.5).abs() < 1e-12 && (t + 1.5).abs() < 1e-12);
        assert!(fit_scale_shift(&[2.0, 2.0, 2.0], &r[..3]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let mut v = vec![0.1; 9];
        v.push(10.0);
        let a = aggregate_depth_eval(&v, 90.0).unwrap();
        assert!((a.filtered_mean - 0.1).abs() < 1e-12);
        assert_eq!(a.kept, 9);
        let same = aggregate_depth_eval(&[0.3; 5], 90.0).unwrap();
        assert_eq!(same.filtered_mean, same.mean);
        assert!(aggregate_depth_eval(&[], 90.0).is_err());
    }

    #[test]
    fn percentile_matches_linear_rule() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&[5.0], 90.0).unwrap(), 5.0);
        assert!((percentile(&[0.0, 10.0], 90.0).unwrap() - 9.0).abs() < 1e-12);
    }
}
