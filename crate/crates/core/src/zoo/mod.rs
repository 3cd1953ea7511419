//! Checkpoint-zoo collection: many small classifier training runs whose
//! intermediate parameter snapshots, annotated with per-class losses, become
//! the training corpus for the weight-space diffusion model.
//!
//! - [`net`]: the classifier itself (flat-parameter MLP forward/backward,
//!   per-class evaluation, hidden-unit permutation symmetry).
//! - [`collect`]: seeded training runs with probabilistic checkpointing under
//!   accuracy-threshold and loss-bin policies, plus class-deletion runs.
//! - [`store`]: the append-friendly binary run-file format.
//! - [`manifest`]: the zoo index with by-run train/test splits.
//! - [`stats`]: loss histograms, summaries, and histogram-targeted resampling.

pub mod collect;
pub mod manifest;
pub mod net;
pub mod stats;
pub mod store;

pub use collect::{
    run_training, train_forgetting_run, train_forgetting_run_with_plan, train_main_run,
    EvalEvent, ForgettingPlan, RunKind, RunRecord, ZooConfig,
};
pub use manifest::{
    build_manifest, load_manifest, load_zoo, save_manifest, LoadedRun, ManifestConfig, RunEntry,
    Split, Zoo, ZooManifest,
};
pub use net::{eval_class_losses, forward_logits, permute_hidden_units, Activation, MainNetSpec};
pub use stats::{
    bin_index, rebalance_zoo, zoo_stats, ClassLossTable, RebalanceOutcome, RebalanceTarget,
    Summary, ZooStatsReport,
};
pub use store::{read_run_file, read_run_header, write_run_file, RunHeader};

use serde::{Deserialize, Serialize};

/// One saved training snapshot: flattened parameters plus the per-class
/// losses/accuracies measured at save time and run provenance.
///
/// Parameters and losses are held in the 32-bit form they are persisted in, so
/// a checkpoint read back from disk is bit-identical to the one saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Vec<f32>,
    /// Per-class mean cross-entropy on the evaluation split, clamped to the
    /// configured cap for conditioning stability.
    pub class_losses: Vec<f32>,
    /// The same losses before clamping.
    pub raw_class_losses: Vec<f32>,
    pub class_accuracies: Vec<f32>,
    pub run_id: String,
    /// Optimizer-step index; strictly increasing within a run.
    pub step: u64,
    pub epoch: u32,
    pub is_forgetting_phase: bool,
    pub deleted_classes: Vec<usize>,
    /// Classes undersampled for this run, with the fraction of examples kept.
    pub undersampled_classes: Vec<(usize, f32)>,
}

impl Checkpoint {
    /// Parameters widened to f64 for network evaluation.
    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&p| p as f64).collect()
    }

    /// Clamped losses widened to f64 for conditioning.
    pub fn losses_f64(&self) -> Vec<f64> {
        self.class_losses.iter().map(|&l| l as f64).collect()
    }
}
