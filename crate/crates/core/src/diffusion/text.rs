//! Text conditioning.
//!
//! Real deployments would plug a pretrained text encoder in behind
//! [`TextEncoder`]; the default [`HashTextEncoder`] derives a fixed random
//! vector per token from a seeded hash, which is deterministic, needs no
//! weights, and still separates distinct captions.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Token embeddings consumed by the denoiser's cross-attention.
#[derive(Debug, Clone)]
pub struct TextCondition {
    /// L×context_dim.
    pub tokens_embedding: Tensor,
    pub provider_id: String,
}

pub trait TextEncoder: Send + Sync {
    fn id(&self) -> String;
    fn context_dim(&self) -> usize;
    fn embed(&self, caption: &str) -> Result<TextCondition>;

    /// Embedding used as the unconditional branch of guidance.
    fn unconditional(&self) -> Result<TextCondition> {
        self.embed("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub context_dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            context_dim: 32,
            max_tokens: 8,
            seed: 0x7e47,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    cfg: TextEncoderConfig,
}

const BOS: &str = "<bos>";
const PAD: &str = "<pad>";

impl HashTextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        if cfg.context_dim == 0 || cfg.max_tokens < 2 {
            return Err(Error::Config(
                "text encoder needs context_dim >= 1 and max_tokens >= 2".into(),
            ));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn tokenize(&self, caption: &str) -> Vec<String> {
        let mut toks = vec![BOS.to_string()];
        toks.extend(
            caption
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| w.to_lowercase())
                .take(self.cfg.max_tokens - 1),
        );
        toks.resize(self.cfg.max_tokens, PAD.to_string());
        toks
    }

    fn token_vector(&self, token: &str, position: usize) -> Vec<f32> {
        let d = self.cfg.context_dim;
        let tok = seed::normal_vec(seed::substream(self.cfg.seed, &format!("tok:{token}")), d);
        let pos = seed::normal_vec(seed::indexed(self.cfg.seed, "pos", position as u64), d);
        tok.iter().zip(&pos).map(|(t, p)| t + 0.1 * p).collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn id(&self) -> String {
        format!(
            "hash-v1-d{}-l{}-s{}",
            self.cfg.context_dim, self.cfg.max_tokens, self.cfg.seed
        )
    }

    fn context_dim(&self) -> usize {
        self.cfg.context_dim
    }

    fn embed(&self, caption: &str) -> Result<TextCondition> {
        let data: Vec<f32> = self
            .tokenize(caption)
            .iter()
            .enumerate()
            .flat_map(|(i, t)| self.token_vector(t, i))
            .collect();
        Ok(TextCondition {
            tokens_embedding: Tensor::from_vec(data, (self.cfg.max_tokens, self.cfg.context_dim), &Device::Cpu)?,
            provider_id: self.id(),
        })
    }
}

/// Convenience wrapper matching the single-call embedding operation.
pub fn embed_text(caption: &str, provider: &dyn TextEncoder) -> Result<TextCondition> {
    provider.embed(caption)
}
