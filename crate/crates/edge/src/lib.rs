//! Desk-scale generative vision-language dataset distillation.
//!
//! Pipeline: fine-tune a tiny conditional latent-diffusion model with a
//! combined contrastive + diversity objective, synthesize a small distilled
//! image-text dataset with multi-caption expansion, and evaluate it by
//! training a dual-encoder retrieval model.

pub mod caption_synthesis;
pub mod config;
pub mod dataset_io;
pub mod diffusion_core;
pub mod distiller;
pub mod edge_losses;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod retrieval_eval;

pub use error::{EdgeError, Result};
