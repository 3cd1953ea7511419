//! Evaluation toolkit: how good is a sampled "unlearned" classifier?
//!
//! The yardstick throughout is a model retrained from scratch without the
//! forgotten classes ([`retrain_baseline`]). Candidates are compared to it
//! along three axes:
//!
//! * utility — pooled accuracy on retained- and forgotten-class test
//!   examples ([`report`]);
//! * behavioral similarity — prediction overlap, cross-model confusion,
//!   and a softmax-distribution agreement score built on Jensen-Shannon
//!   divergence ([`metrics`]);
//! * privacy — an entropy-feature membership inference attack whose score
//!   on the forgotten examples should move toward the retrained model's
//!   ([`mia`]).
//!
//! [`full_report`] bundles all of it into one serializable, validated
//! report object.

pub mod baseline;
pub mod metrics;
pub mod mia;
pub mod report;

pub use baseline::{retrain_baseline, RetrainConfig};
pub use metrics::{
    cross_confusion, entropy, jsd, pearson, predictions_overlap, prompt_alignment,
    unlearning_score, R2Outcome,
};
pub use mia::{fit_logistic_1d, mia_score, row_entropies, LogisticFit};
pub use report::{
    evaluate_candidate, full_report, AveragedEval, CandidateEval, EvalInputs, EvalReport,
    ModelSummary,
};
