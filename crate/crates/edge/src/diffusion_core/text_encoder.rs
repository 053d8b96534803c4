use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EdgeError, Result};
use crate::nn::{Embedding, Param, ParamSet};

/// Conditioning vector batch produced by the text encoder.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    pub y: Array2<f64>,
}

impl ConditionEmbedding {
    pub fn validate(&self) -> Result<()> {
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(EdgeError::Validation(
                "non-finite condition embedding".into(),
            ));
        }
        Ok(())
    }
}

/// Bag-of-token-embeddings with mean pooling. Tokens are hashed into a
/// fixed bucket table so unseen words embed deterministically without a
/// corpus-dependent vocabulary.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub emb: Embedding,
    pub buckets: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub buckets: usize,
    pub dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            buckets: 512,
            dim: 32,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl TextEncoder {
    pub fn new<R: Rng>(cfg: &TextEncoderConfig, rng: &mut R) -> Self {
        TextEncoder {
            emb: Embedding::new(cfg.buckets, cfg.dim, rng),
            buckets: cfg.buckets,
        }
    }

    pub fn dim(&self) -> usize {
        self.emb.dim
    }

    fn token_ids(&self, caption: &str) -> Result<Vec<usize>> {
        if caption.trim().is_empty() {
            return Err(EdgeError::Validation("empty caption".into()));
        }
        Ok(tokenize(caption)
            .iter()
            .map(|t| (fnv1a(t.as_bytes()) % self.buckets as u64) as usize)
            .collect())
    }

    /// Deterministic embedding of a caption batch, one row per caption.
    pub fn encode(&self, captions: &[&str]) -> Result<ConditionEmbedding> {
        let mut y = Array2::zeros((captions.len(), self.dim()));
        for (i, cap) in captions.iter().enumerate() {
            let ids = self.token_ids(cap)?;
            y.row_mut(i).assign(&self.emb.mean_pool(&ids));
        }
        let out = ConditionEmbedding { y };
        out.validate()?;
        Ok(out)
    }

    /// Accumulate gradients of the embedding table given dL/dy.
    pub fn backward(&mut self, captions: &[&str], dy: &ArrayView2<f64>) -> Result<()> {
        for (i, cap) in captions.iter().enumerate() {
            let ids = self.token_ids(cap)?;
            self.emb.backward_mean_pool(&ids, dy, i);
        }
        Ok(())
    }
}

impl ParamSet for TextEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.emb.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.emb.visit_mut(prefix, f);
    }
}
