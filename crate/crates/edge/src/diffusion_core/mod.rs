//! Tiny conditional latent-diffusion machinery: noise schedule, forward
//! noising, conditional noise predictor, denoised-latent reconstruction,
//! and ancestral sampling.

mod codec;
mod model;
mod predictor;
mod sampler;
mod schedule;
mod text_encoder;

pub use codec::{CodecMode, LatentCodec, TinyAutoencoder};
pub use model::{Checkpoint, DiffusionModel, ModelConfig, ParamData, CHECKPOINT_VERSION};
pub use predictor::{NoisePredictor, PredictorCache, PredictorConfig};
pub use sampler::sample;
pub use schedule::{forward_noise, reconstruct_latent, LatentBatch, NoiseSchedule};
pub use text_encoder::{tokenize, ConditionEmbedding, TextEncoder, TextEncoderConfig};
