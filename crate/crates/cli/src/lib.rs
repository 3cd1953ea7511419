//! Orchestration layer for the loss-conditioned weight-generation
//! pipeline: experiment configs, content-hash stage caching, the
//! append-only run ledger, and plot-data emission. The `lethe` binary
//! is a thin argument-parsing shell over this crate.

pub mod config;
pub mod hashing;
pub mod ledger;
pub mod pipeline;
pub mod plots;
pub mod stages;

/// Serializes tests that touch process-global environment variables.
#[cfg(test)]
pub(crate) fn test_env_lock() -> &'static std::sync::Mutex<()> {
    static LOCK: std::sync::OnceLock<std::sync::Mutex<()>> = std::sync::OnceLock::new();
    LOCK.get_or_init(|| std::sync::Mutex::new(()))
}
