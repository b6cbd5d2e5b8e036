use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }
}

/// Variance-preserving forward process tables, indexed by timestep
/// `t = 1..=T`. Index 0 is the noiseless extension (`alpha_bar(0) = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_min` to `beta_max` over `t` steps.
pub fn make_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas = (0..t)
        .map(|i| {
            if t == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must be non-empty and inside (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.num_timesteps() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside 0..={}",
                self.num_timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
        }
        let ab = self.alpha_bar(t);
        Ok((z0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
    }

    /// Batched forward process with one timestep per leading-axis item.
    pub fn add_noise_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() || z0.dim(0)? != ts.len() {
            return Err(Error::Shape("batched add_noise shape mismatch".into()));
        }
        let rows = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| self.add_noise(&z0.get(i)?, t, &eps.get(i)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }
}
