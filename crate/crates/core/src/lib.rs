//! # lethe-core
//!
//! Building blocks for sampling small classifiers that have forgotten
//! selected classes:
//!
//! - `data`: IDX image datasets (MNIST and the 4-class subset) and synthetic
//!   fixtures.
//! - `zoo`: trains many main-network runs and persists checkpoints annotated
//!   with per-class losses under pivot/bin saving policies.
//! - `codec`: converts flat parameter vectors to and from the token sequence
//!   consumed by the diffusion transformer, plus scalar frequency features.
//! - `diffusion`: the diffusion-transformer weight generator (two conditioning
//!   variants), DDPM schedule, training loop, and the saved-model archive.
//! - `sampler`: loss prompts, candidate sampling, and best-model selection for
//!   a forget request.
//! - `evalkit`: unlearning and generative-quality metrics, retrained
//!   baselines, and report assembly.

pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod sampler;
pub mod zoo;

pub use error::{Error, Result};
