//! Pluggable feature, classifier and embedding providers, plus fixed
//! random-projection defaults used when no pretrained network is wired in.

use crate::error::{Error, Result};
use crate::imaging::{resize, ChwImage, Interp};
use crate::seed;

/// Image → feature vector for Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn features(&self, rgb: &ChwImage) -> Result<Vec<f64>>;
}

/// Image → class probabilities for the Inception Score.
pub trait Classifier: Send + Sync {
    fn id(&self) -> String;
    fn probabilities(&self, rgb: &ChwImage) -> Result<Vec<f64>>;
}

/// Joint image/text embedding space.
pub trait ImageTextEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn embed_image(&self, rgb: &ChwImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Bilinear thumbnail of the RGB channels followed by a fixed Gaussian
/// projection.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    dim: usize,
    side: usize,
    seed: u64,
    weights: Vec<f64>,
}

impl RandomProjection {
    pub fn new(dim: usize, side: usize, seed: u64) -> Result<Self> {
        if dim == 0 || side == 0 {
            return Err(Error::Config("projection needs dim >= 1 and side >= 1".into()));
        }
        let n = 3 * side * side;
        let norm = 1.0 / (n as f64).sqrt();
        let weights = seed::normal_vec_f64(seed::substream(seed, "projection"), dim * n)
            .into_iter()
            .map(|v| v * norm)
            .collect();
        Ok(Self {
            dim,
            side,
            seed,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn project(&self, rgb: &ChwImage) -> Result<Vec<f64>> {
        if rgb.channels != 3 {
            return Err(Error::Shape(format!(
                "expected an RGB image, got {} channels",
                rgb.channels
            )));
        }
        let thumb = resize(rgb, self.side, self.side, Interp::Bilinear)?;
        let n = thumb.data.len();
        Ok(self
            .weights
            .chunks(n)
            .map(|row| row.iter().zip(&thumb.data).map(|(w, x)| w * *x as f64).sum())
            .collect())
    }
}

impl FeatureExtractor for RandomProjection {
    fn id(&self) -> String {
        format!("randproj-d{}-s{}-{}", self.dim, self.side, self.seed)
    }

    fn features(&self, rgb: &ChwImage) -> Result<Vec<f64>> {
        self.project(rgb)
    }
}

/// Softmax over a random projection; `dim` is the class count.
#[derive(Debug, Clone)]
pub struct ProjectionClassifier {
    proj: RandomProjection,
    temperature: f64,
}

impl ProjectionClassifier {
    pub fn new(classes: usize, side: usize, seed: u64, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(Self {
            proj: RandomProjection::new(classes, side, seed)?,
            temperature,
        })
    }
}

impl Classifier for ProjectionClassifier {
    fn id(&self) -> String {
        format!("softmax-{}-t{}", self.proj.id(), self.temperature)
    }

    fn probabilities(&self, rgb: &ChwImage) -> Result<Vec<f64>> {
        let logits: Vec<f64> = self.proj.project(rgb)?.iter().map(|v| v / self.temperature).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.iter().map(|v| v / s).collect())
    }
}

/// Image side via [`RandomProjection`], text side as a sum of hashed word
/// vectors. Only useful for plumbing and determinism checks.
#[derive(Debug, Clone)]
pub struct HashedClipLike {
    proj: RandomProjection,
}

impl HashedClipLike {
    pub fn new(dim: usize, side: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            proj: RandomProjection::new(dim, side, seed)?,
        })
    }
}

impl ImageTextEmbedder for HashedClipLike {
    fn id(&self) -> String {
        format!("hashclip-{}", self.proj.id())
    }

    fn embed_image(&self, rgb: &ChwImage) -> Result<Vec<f64>> {
        self.proj.project(rgb)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            words.push("<empty>".into());
        }
        let d = self.proj.dim();
        let mut acc = vec![0.0; d];
        for w in &words {
            let v = seed::normal_vec_f64(seed::substream(self.proj.seed, &format!("word:{w}")), d);
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn providers_are_deterministic_and_normalised() {
        let img = ChwImage::from_fn(3, 16, 16, |c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        let p = RandomProjection::new(8, 8, 1).unwrap();
        assert_eq!(
            p.features(&img).unwrap(),
            RandomProjection::new(8, 8, 1).unwrap().features(&img).unwrap()
        );
        let c = ProjectionClassifier::new(5, 8, 2, 0.5).unwrap();
        let probs = c.probabilities(&img).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e = HashedClipLike::new(8, 8, 3).unwrap();
        assert_eq!(e.embed_text("A room").unwrap(), e.embed_text("a  room").unwrap());
        assert!(e.embed_text("").unwrap().iter().any(|v| *v != 0.0));
    }
}
