//! The diffusion hypernetwork: DDPM schedule, transformer model, and the
//! training loop that fits it to a checkpoint zoo.
//!
//! [`schedule`] holds the noising process and the generic sampling loop;
//! [`params`] and [`blocks`] are the flat-parameter autograd layer the
//! model is built from; [`dit`] assembles the two model variants;
//! [`train`] draws training pairs from a zoo and runs optimization;
//! [`archive`] persists a trained model to a single file.

pub mod archive;
pub mod blocks;
pub mod dit;
pub mod params;
pub mod schedule;
pub mod train;

pub use archive::{load_model, save_model, LoadedModel, TrainMeta};
pub use dit::{CondBatch, DiT, DiTConfig, SeqLayout, Variant};
pub use schedule::{DDPMSchedule, ScheduleKind};
pub use train::{train_dit, TrainOutcome, TrainerConfig};
