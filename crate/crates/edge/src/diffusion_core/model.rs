use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{CodecMode, LatentCodec};
use super::predictor::{NoisePredictor, PredictorConfig};
use super::sampler;
use super::schedule::NoiseSchedule;
use super::text_encoder::{ConditionEmbedding, TextEncoder, TextEncoderConfig};
use crate::error::{EdgeError, Result};
use crate::nn::{join_name, Linear, Param, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub text_buckets: usize,
    pub t_count: usize,
    pub codec: CodecMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            latent_channels: 4,
            hidden: 16,
            cond_dim: 32,
            time_dim: 16,
            text_buckets: 512,
            t_count: 100,
            codec: CodecMode::Identity,
        }
    }
}

/// The full generative model: codec, text conditioning encoder, noise
/// predictor, schedule, and the pooling projection that maps denoised
/// latents into the text-embedding space.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub cfg: ModelConfig,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub text: TextEncoder,
    pub predictor: NoisePredictor,
    pub proj: Linear,
}

impl DiffusionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = LatentCodec::new(cfg.codec, cfg.latent_channels, &mut rng);
        let (lat_c, _, _) = codec.latent_shape(cfg.image_size);
        let text = TextEncoder::new(
            &TextEncoderConfig {
                buckets: cfg.text_buckets,
                dim: cfg.cond_dim,
            },
            &mut rng,
        );
        let predictor = NoisePredictor::new(
            PredictorConfig {
                latent_channels: lat_c,
                hidden: cfg.hidden,
                cond_dim: cfg.cond_dim,
                time_dim: cfg.time_dim,
            },
            &mut rng,
        );
        let proj = Linear::new(lat_c, cfg.cond_dim, &mut rng);
        DiffusionModel {
            schedule: NoiseSchedule::cosine(cfg.t_count),
            cfg,
            codec,
            text,
            predictor,
            proj,
        }
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.codec.latent_shape(self.cfg.image_size)
    }

    pub fn encode_text(&self, captions: &[&str]) -> Result<ConditionEmbedding> {
        self.text.encode(captions)
    }

    /// Mean-pool a spatial latent batch to per-channel features.
    pub fn pool_latents(&self, z: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = z.dim();
        let mut out = Array2::zeros((n, c));
        for bi in 0..n {
            for ch in 0..c {
                out[[bi, ch]] =
                    z.index_axis(Axis(0), bi).index_axis(Axis(0), ch).sum() / (h * w) as f64;
            }
        }
        out
    }

    /// Pool and project a denoised latent batch to raw image embeddings
    /// comparable with text embeddings.
    pub fn image_embedding_raw(&self, z: &Array4<f64>) -> Array2<f64> {
        self.proj.forward(&self.pool_latents(z).view())
    }

    /// Conditional sampling; deterministic given the RNG.
    pub fn sample<R: Rng>(
        &self,
        y: &ConditionEmbedding,
        steps: usize,
        rng: &mut R,
    ) -> Result<Array4<f64>> {
        let (_, h, w) = self.latent_shape();
        sampler::sample(
            &self.predictor,
            &y.y,
            &self.schedule,
            steps,
            (h, w),
            self.codec.latent_range(),
            rng,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = self.to_checkpoint();
        let json = serde_json::to_string(&ckpt)
            .map_err(|e| EdgeError::Config(format!("checkpoint serialization: {e}")))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| EdgeError::Write {
                path: path.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(path, json).map_err(|e| EdgeError::Write {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EdgeError::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| EdgeError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::from_checkpoint(ckpt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = BTreeMap::new();
        self.visit("", &mut |name: &str, p: &Param| {
            params.insert(
                name.to_string(),
                ParamData {
                    shape: p.v.shape().to_vec(),
                    data: p.v.iter().copied().collect(),
                },
            );
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg,
            schedule: self.schedule.clone(),
            params,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(EdgeError::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.schedule.validate()?;
        let mut model = DiffusionModel::new(ckpt.config, 0);
        model.schedule = ckpt.schedule;
        let params = ckpt.params;
        let mut missing = Vec::new();
        model.visit_mut("", &mut |name: &str, p: &mut Param| {
            match params.get(name) {
                Some(pd) if pd.shape == p.v.shape() => {
                    p.v = ndarray::ArrayD::from_shape_vec(IxDyn(&pd.shape), pd.data.clone())
                        .expect("checked shape");
                }
                _ => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(EdgeError::Config(format!(
                "checkpoint missing or misshaped parameters: {missing:?}"
            )));
        }
        Ok(model)
    }
}

impl ParamSet for DiffusionModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.codec.visit(&join_name(prefix, "codec"), f);
        self.text.visit(&join_name(prefix, "text"), f);
        self.predictor.visit(&join_name(prefix, "predictor"), f);
        self.proj.visit(&join_name(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.codec.visit_mut(&join_name(prefix, "codec"), f);
        self.text.visit_mut(&join_name(prefix, "text"), f);
        self.predictor.visit_mut(&join_name(prefix, "predictor"), f);
        self.proj.visit_mut(&join_name(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model: every parameter tensor keyed by stable name, plus
/// the schedule and configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub params: BTreeMap<String, ParamData>,
}
