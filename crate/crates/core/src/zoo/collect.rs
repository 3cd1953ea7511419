//! Seeded training runs that harvest checkpoints for the zoo.
//!
//! A run trains the main network by plain SGD and, at random steps (probability
//! `beta`), evaluates per-class losses on the held-out split. A snapshot is
//! saved when the pivot classes clear the accuracy threshold `gamma` and the
//! loss-bin combination it falls into still has room; saving stops at the
//! per-run budget. Forgetting runs additionally delete a random subset of
//! non-pivot classes from the training stream at a trigger step; during that
//! phase the bin policy still applies but the pivot gate does not, so the
//! high-loss region the deletions create is actually collected.
//!
//! Randomness is split across independent ChaCha streams (init, undersampling,
//! shuffles, save coins, deletion plan) so that runs differing in one choice —
//! e.g. a forgetting run whose deletion set came up empty — stay bit-identical
//! everywhere else.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::zoo::net::{self, MainNetSpec};
use crate::zoo::Checkpoint;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const STREAM_INIT: u64 = 0;
const STREAM_UNDERSAMPLE: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_COIN: u64 = 3;
const STREAM_PLAN: u64 = 4;

/// Checkpoint-collection policy and main-network training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    /// Classes that must stay above `gamma` for a snapshot to be saved.
    pub pivot_classes: Vec<usize>,
    /// Pivot accuracy threshold, on a 0–100 scale.
    pub gamma: f64,
    /// Per-step probability of evaluating and attempting a save.
    pub beta: f64,
    /// Equal-width loss bins per non-pivot class over `[0, loss_cap]`.
    pub bins_per_class: usize,
    /// Saved checkpoints allowed per bin combination.
    pub max_per_bin: usize,
    /// Per-class losses are clamped here at save time; raw values kept too.
    pub loss_cap: f64,
    pub max_checkpoints_per_run: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Keep-rate range for undersampled classes.
    pub undersample_min_rate: f64,
    pub undersample_max_rate: f64,
    /// Share of runs the orchestrator turns into forgetting runs.
    pub forgetting_run_fraction: f64,
    /// Deletion-trigger window as fractions of the run's total steps.
    pub trigger_window: (f64, f64),
}

impl Default for ZooConfig {
    fn default() -> Self {
        ZooConfig {
            pivot_classes: vec![0, 1],
            gamma: 80.0,
            beta: 0.1,
            bins_per_class: 10,
            max_per_bin: 3,
            loss_cap: 5.0,
            max_checkpoints_per_run: 150,
            epochs: 25,
            batch_size: 64,
            learning_rate: 0.1,
            undersample_min_rate: 0.05,
            undersample_max_rate: 0.5,
            forgetting_run_fraction: 0.3,
            trigger_window: (0.2, 0.8),
        }
    }
}

impl ZooConfig {
    pub fn validate(&self, spec: &MainNetSpec) -> Result<()> {
        let m = spec.num_classes;
        if self.pivot_classes.iter().any(|&c| c >= m) {
            return Err(Error::config("pivot class out of range"));
        }
        if !(0.0..=100.0).contains(&self.gamma) {
            return Err(Error::config("gamma must be in [0, 100]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta must be in [0, 1]"));
        }
        if self.bins_per_class == 0 || self.loss_cap <= 0.0 {
            return Err(Error::config("need at least one bin over a positive loss range"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(0.0 < self.undersample_min_rate
            && self.undersample_min_rate <= self.undersample_max_rate
            && self.undersample_max_rate <= 1.0)
        {
            return Err(Error::config("undersample rates must satisfy 0 < min <= max <= 1"));
        }
        let (lo, hi) = self.trigger_window;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("trigger window must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }

    /// Non-pivot classes in ascending order.
    pub fn non_pivots(&self, m: usize) -> Vec<usize> {
        (0..m).filter(|c| !self.pivot_classes.contains(c)).collect()
    }

    /// Bin index of one clamped loss value.
    pub fn bin_of(&self, clamped_loss: f64) -> usize {
        crate::zoo::stats::bin_index(clamped_loss, self.loss_cap, self.bins_per_class)
    }

    /// Combination-bin key over the non-pivot classes' clamped losses.
    pub fn bin_key(&self, clamped_losses: &[f64], non_pivots: &[usize]) -> u64 {
        non_pivots.iter().fold(0u64, |key, &c| {
            key * self.bins_per_class as u64 + self.bin_of(clamped_losses[c]) as u64
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Main,
    Forgetting,
}

/// When and what a forgetting run deletes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgettingPlan {
    /// Deletion applies to every optimizer step at or after this index.
    pub trigger_step: u64,
    pub deleted_classes: Vec<usize>,
}

/// One loss evaluation during a run and the save decision it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEvent {
    pub step: u64,
    pub epoch: u32,
    pub in_forgetting_phase: bool,
    pub raw_losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub saved: bool,
}

/// Everything one run produced, checkpoints in step order.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub kind: RunKind,
    pub spec: MainNetSpec,
    pub undersampled_classes: Vec<(usize, f32)>,
    pub plan: Option<ForgettingPlan>,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    /// Every beta-triggered evaluation, for auditing the save policy.
    pub eval_trace: Vec<EvalEvent>,
    pub zero_checkpoints_warning: bool,
    pub checkpoints: Vec<Checkpoint>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Picks the classes to undersample (a proper, non-empty subset of the
/// non-pivots when one exists) and a keep-rate for each.
fn draw_undersampling(
    config: &ZooConfig,
    non_pivots: &[usize],
    rng: &mut ChaCha20Rng,
) -> Vec<(usize, f32)> {
    if non_pivots.len() < 2 {
        return Vec::new();
    }
    let size = rng.gen_range(1..non_pivots.len());
    let mut pool = non_pivots.to_vec();
    pool.shuffle(rng);
    let mut chosen: Vec<usize> = pool[..size].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|c| {
            let rate = rng.gen_range(config.undersample_min_rate..=config.undersample_max_rate);
            (c, rate as f32)
        })
        .collect()
}

/// Training-set indices after undersampling: full classes untouched,
/// undersampled classes keep a shuffled `ceil(rate * n)` subset.
fn active_indices(
    train: &Dataset,
    undersampled: &[(usize, f32)],
    rng: &mut ChaCha20Rng,
) -> Vec<u32> {
    let rates: HashMap<usize, f32> = undersampled.iter().cloned().collect();
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); train.num_classes];
    for (i, &label) in train.labels.iter().enumerate() {
        by_class[label as usize].push(i as u32);
    }
    let mut active = Vec::with_capacity(train.len());
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if let Some(&rate) = rates.get(&class) {
            idx.shuffle(rng);
            let keep = ((rate as f64) * idx.len() as f64).ceil() as usize;
            idx.truncate(keep.max(1));
            idx.sort_unstable();
        }
        active.extend(idx);
    }
    active
}

fn draw_plan(
    config: &ZooConfig,
    non_pivots: &[usize],
    total_steps: u64,
    rng: &mut ChaCha20Rng,
) -> ForgettingPlan {
    let (lo, hi) = config.trigger_window;
    let lo_step = (lo * total_steps as f64).floor() as u64;
    let hi_step = ((hi * total_steps as f64).ceil() as u64).min(total_steps.saturating_sub(1));
    let trigger_step = if hi_step > lo_step {
        rng.gen_range(lo_step..=hi_step)
    } else {
        lo_step
    };
    let size = rng.gen_range(1..=non_pivots.len());
    let mut pool = non_pivots.to_vec();
    pool.shuffle(rng);
    let mut deleted: Vec<usize> = pool[..size].to_vec();
    deleted.sort_unstable();
    ForgettingPlan {
        trigger_step,
        deleted_classes: deleted,
    }
}

/// Trains one run: plain SGD over the (possibly undersampled, possibly
/// deletion-filtered) training stream, saving checkpoints per policy.
pub fn run_training(
    config: &ZooConfig,
    spec: &MainNetSpec,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    kind: RunKind,
    forced_plan: Option<ForgettingPlan>,
) -> Result<RunRecord> {
    config.validate(spec)?;
    spec.validate()?;
    if train.input_dim() != spec.input_dim || test.input_dim() != spec.input_dim {
        return Err(Error::structural("dataset feature width does not match spec"));
    }
    let m = spec.num_classes;
    let non_pivots = config.non_pivots(m);

    let mut init_rng = stream_rng(seed, STREAM_INIT);
    let mut under_rng = stream_rng(seed, STREAM_UNDERSAMPLE);
    let mut shuffle_rng = stream_rng(seed, STREAM_SHUFFLE);
    let mut coin_rng = stream_rng(seed, STREAM_COIN);
    let mut plan_rng = stream_rng(seed, STREAM_PLAN);

    let mut params = net::init_params(spec, &mut init_rng);
    let undersampled = draw_undersampling(config, &non_pivots, &mut under_rng);
    let active = active_indices(train, &undersampled, &mut under_rng);
    if active.is_empty() {
        return Err(Error::config("training stream is empty"));
    }
    let steps_per_epoch = (active.len() as u64).div_ceil(config.batch_size as u64);
    let total_steps = steps_per_epoch * config.epochs as u64;

    let plan = match (kind, forced_plan) {
        (RunKind::Main, _) => None,
        (RunKind::Forgetting, Some(plan)) => {
            if plan.trigger_step >= total_steps {
                return Err(Error::config(format!(
                    "trigger step {} is past the run's {total_steps} steps",
                    plan.trigger_step
                )));
            }
            if plan.deleted_classes.iter().any(|c| config.pivot_classes.contains(c)) {
                return Err(Error::config("pivot classes can never be deleted"));
            }
            if plan.deleted_classes.iter().any(|&c| c >= m) {
                return Err(Error::config("deleted class out of range"));
            }
            Some(plan)
        }
        (RunKind::Forgetting, None) => {
            if non_pivots.is_empty() {
                return Err(Error::config("forgetting run needs at least one non-pivot class"));
            }
            Some(draw_plan(config, &non_pivots, total_steps, &mut plan_rng))
        }
    };
    let run_id = match kind {
        RunKind::Main => format!("main-{seed:016x}"),
        RunKind::Forgetting => format!("forget-{seed:016x}"),
    };

    let deleted: Vec<usize> = plan.as_ref().map(|p| p.deleted_classes.clone()).unwrap_or_default();
    let trigger = plan.as_ref().map(|p| p.trigger_step);
    let mut grad = vec![0.0; params.len()];
    let mut bins: HashMap<u64, usize> = HashMap::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut eval_trace: Vec<EvalEvent> = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let mut order = active.clone();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            // An empty deletion set means the run never actually enters the
            // forgetting phase, keeping it step-for-step identical to a main run.
            let in_forgetting =
                !deleted.is_empty() && trigger.map_or(false, |t| step >= t);
            let batch_idx: Vec<u32> = if in_forgetting {
                chunk
                    .iter()
                    .copied()
                    .filter(|&i| !deleted.contains(&(train.labels[i as usize] as usize)))
                    .collect()
            } else {
                chunk.to_vec()
            };
            if batch_idx.is_empty() {
                continue;
            }
            let mut x = Array2::zeros((batch_idx.len(), spec.input_dim));
            let mut y = Vec::with_capacity(batch_idx.len());
            for (row, &i) in batch_idx.iter().enumerate() {
                x.row_mut(row).assign(&train.features.row(i as usize));
                y.push(train.labels[i as usize]);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            net::ce_loss_and_grad(&params, spec, x.view(), &y, &mut grad)?;
            net::sgd_step(&mut params, &grad, config.learning_rate);
            step += 1;

            // The coin is drawn every step so the RNG stream stays aligned
            // even after the budget is exhausted.
            let coin: f64 = coin_rng.gen();
            if coin >= config.beta || checkpoints.len() >= config.max_checkpoints_per_run {
                continue;
            }
            // Evaluate the exact f32 values that would be persisted, so
            // stored losses reproduce from stored params.
            let params32: Vec<f32> = params.iter().map(|&p| p as f32).collect();
            let params64: Vec<f64> = params32.iter().map(|&p| p as f64).collect();
            let (raw_losses, accs) = net::eval_class_losses(&params64, spec, test)?;
            let clamped: Vec<f64> = raw_losses.iter().map(|&l| l.min(config.loss_cap)).collect();
            let pivots_ok = config
                .pivot_classes
                .iter()
                .all(|&c| accs[c] * 100.0 >= config.gamma);
            let key = config.bin_key(&clamped, &non_pivots);
            let bin_count = bins.entry(key).or_insert(0);
            let bin_ok = *bin_count < config.max_per_bin;
            let save = bin_ok && (in_forgetting || pivots_ok);
            eval_trace.push(EvalEvent {
                step,
                epoch: epoch as u32,
                in_forgetting_phase: in_forgetting,
                raw_losses: raw_losses.clone(),
                accuracies: accs.clone(),
                saved: save,
            });
            if save {
                *bin_count += 1;
                checkpoints.push(Checkpoint {
                    params: params32,
                    class_losses: clamped.iter().map(|&l| l as f32).collect(),
                    raw_class_losses: raw_losses.iter().map(|&l| l as f32).collect(),
                    class_accuracies: accs.iter().map(|&a| a as f32).collect(),
                    run_id: run_id.clone(),
                    step,
                    epoch: epoch as u32,
                    is_forgetting_phase: in_forgetting,
                    deleted_classes: deleted.clone(),
                    undersampled_classes: undersampled.clone(),
                });
            }
        }
    }

    Ok(RunRecord {
        run_id,
        seed,
        kind,
        spec: spec.clone(),
        undersampled_classes: undersampled,
        plan,
        steps_per_epoch,
        total_steps,
        zero_checkpoints_warning: checkpoints.is_empty(),
        eval_trace,
        checkpoints,
    })
}

/// A plain collection run: SGD plus the gamma/bin save policy.
pub fn train_main_run(
    config: &ZooConfig,
    spec: &MainNetSpec,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<RunRecord> {
    run_training(config, spec, train, test, seed, RunKind::Main, None)
}

/// A run that deletes a randomly drawn non-pivot class subset at a random
/// trigger step inside the configured window.
pub fn train_forgetting_run(
    config: &ZooConfig,
    spec: &MainNetSpec,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<RunRecord> {
    run_training(config, spec, train, test, seed, RunKind::Forgetting, None)
}

/// A forgetting run with an explicit deletion plan (used by tests and the
/// trigger-validation path).
pub fn train_forgetting_run_with_plan(
    config: &ZooConfig,
    spec: &MainNetSpec,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    plan: ForgettingPlan,
) -> Result<RunRecord> {
    run_training(config, spec, train, test, seed, RunKind::Forgetting, Some(plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_spec() -> MainNetSpec {
        MainNetSpec::new(8, vec![4], 4).unwrap()
    }

    fn toy_data() -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let train = gaussian_blobs(&mut rng, 60, 8, 4, 0.25);
        let test = gaussian_blobs(&mut rng, 25, 8, 4, 0.25);
        (train, test)
    }

    fn toy_config() -> ZooConfig {
        ZooConfig {
            pivot_classes: vec![0, 1],
            gamma: 60.0,
            beta: 0.5,
            bins_per_class: 10,
            max_per_bin: 5,
            loss_cap: 5.0,
            max_checkpoints_per_run: 40,
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.2,
            ..ZooConfig::default()
        }
    }

    #[test]
    fn beta_zero_saves_nothing() {
        let (train, test) = toy_data();
        let config = ZooConfig {
            beta: 0.0,
            ..toy_config()
        };
        let rec = train_main_run(&config, &toy_spec(), &train, &test, 1).unwrap();
        assert_eq!(rec.checkpoints.len(), 0);
        assert!(rec.zero_checkpoints_warning);
        assert_eq!(rec.total_steps, rec.steps_per_epoch * 8);
    }

    #[test]
    fn budget_and_step_ordering_hold() {
        let (train, test) = toy_data();
        let config = toy_config();
        let rec = train_main_run(&config, &toy_spec(), &train, &test, 2).unwrap();
        assert!(rec.checkpoints.len() <= config.max_checkpoints_per_run);
        assert!(!rec.checkpoints.is_empty());
        for pair in rec.checkpoints.windows(2) {
            assert!(pair[0].step < pair[1].step);
        }
    }

    #[test]
    fn single_bin_unit_capacity_saves_exactly_once() {
        let (train, test) = toy_data();
        let config = ZooConfig {
            bins_per_class: 1,
            max_per_bin: 1,
            gamma: 0.0,
            ..toy_config()
        };
        let rec = train_main_run(&config, &toy_spec(), &train, &test, 3).unwrap();
        assert_eq!(rec.checkpoints.len(), 1);
        // Replay the recorded trace: with one always-full bin, only the first
        // passing evaluation may save.
        let first_saved = rec.eval_trace.iter().position(|e| e.saved).unwrap();
        assert!(rec.eval_trace[first_saved + 1..].iter().all(|e| !e.saved));
    }

    #[test]
    fn save_policy_matches_trace_replay() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let rec = train_main_run(&config, &spec, &train, &test, 4).unwrap();
        let non_pivots = config.non_pivots(spec.num_classes);
        // Independent re-enumeration of every save decision from the trace.
        let mut bins: HashMap<u64, usize> = HashMap::new();
        let mut budget = config.max_checkpoints_per_run;
        for event in &rec.eval_trace {
            let clamped: Vec<f64> = event
                .raw_losses
                .iter()
                .map(|&l| l.min(config.loss_cap))
                .collect();
            let pivots_ok = config
                .pivot_classes
                .iter()
                .all(|&c| event.accuracies[c] * 100.0 >= config.gamma);
            let key = config.bin_key(&clamped, &non_pivots);
            let count = bins.entry(key).or_insert(0);
            let expect = budget > 0
                && *count < config.max_per_bin
                && (event.in_forgetting_phase || pivots_ok);
            assert_eq!(event.saved, expect, "step {}", event.step);
            if expect {
                *count += 1;
                budget -= 1;
            }
        }
        assert_eq!(
            rec.checkpoints.len(),
            rec.eval_trace.iter().filter(|e| e.saved).count()
        );
    }

    #[test]
    fn saved_checkpoints_respect_bin_capacity_and_gamma() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let rec = train_main_run(&config, &spec, &train, &test, 5).unwrap();
        let non_pivots = config.non_pivots(spec.num_classes);
        let mut bins: HashMap<u64, usize> = HashMap::new();
        for ck in &rec.checkpoints {
            let clamped: Vec<f64> = ck.class_losses.iter().map(|&l| l as f64).collect();
            *bins.entry(config.bin_key(&clamped, &non_pivots)).or_insert(0) += 1;
            if !ck.is_forgetting_phase {
                for &c in &config.pivot_classes {
                    assert!(ck.class_accuracies[c] as f64 * 100.0 >= config.gamma);
                }
            }
        }
        assert!(bins.values().all(|&c| c <= config.max_per_bin));
    }

    #[test]
    fn empty_deletion_matches_main_run_bitwise() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let main = train_main_run(&config, &spec, &train, &test, 6).unwrap();
        let plan = ForgettingPlan {
            trigger_step: 10,
            deleted_classes: vec![],
        };
        let forget =
            train_forgetting_run_with_plan(&config, &spec, &train, &test, 6, plan).unwrap();
        assert_eq!(main.checkpoints.len(), forget.checkpoints.len());
        for (a, b) in main.checkpoints.iter().zip(&forget.checkpoints) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.class_losses, b.class_losses);
            assert_eq!(a.step, b.step);
            assert_eq!(a.epoch, b.epoch);
            assert!(!b.is_forgetting_phase);
        }
    }

    #[test]
    fn trigger_zero_flags_everything() {
        let (train, test) = toy_data();
        let config = ZooConfig {
            gamma: 0.0,
            ..toy_config()
        };
        let spec = toy_spec();
        let plan = ForgettingPlan {
            trigger_step: 0,
            deleted_classes: vec![2],
        };
        let rec = train_forgetting_run_with_plan(&config, &spec, &train, &test, 7, plan).unwrap();
        assert!(!rec.checkpoints.is_empty());
        assert!(rec.checkpoints.iter().all(|c| c.is_forgetting_phase));
        assert!(rec.checkpoints.iter().all(|c| c.deleted_classes == vec![2]));
    }

    #[test]
    fn trigger_past_end_is_config_error() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let plan = ForgettingPlan {
            trigger_step: 1_000_000,
            deleted_classes: vec![2],
        };
        assert!(matches!(
            train_forgetting_run_with_plan(&config, &spec, &train, &test, 8, plan),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deleting_pivots_is_rejected() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let plan = ForgettingPlan {
            trigger_step: 5,
            deleted_classes: vec![0],
        };
        assert!(train_forgetting_run_with_plan(&config, &spec, &train, &test, 9, plan).is_err());
    }

    #[test]
    fn deleted_class_loss_trends_upward() {
        let (train, test) = toy_data();
        let config = ZooConfig {
            beta: 0.9,
            max_per_bin: 100,
            max_checkpoints_per_run: 1000,
            epochs: 12,
            ..toy_config()
        };
        let spec = toy_spec();
        let rec = train_main_run(&config, &spec, &train, &test, 10).unwrap();
        let trigger = rec.total_steps / 3;
        let plan = ForgettingPlan {
            trigger_step: trigger,
            deleted_classes: vec![2],
        };
        let rec = train_forgetting_run_with_plan(&config, &spec, &train, &test, 10, plan).unwrap();
        // Post-trigger class-2 losses from the trace, smoothed with a 5-point
        // moving average, should never fall below their value at the trigger.
        let post: Vec<f64> = rec
            .eval_trace
            .iter()
            .filter(|e| e.step >= trigger)
            .map(|e| e.raw_losses[2])
            .collect();
        assert!(post.len() >= 10, "need enough post-trigger evaluations");
        let smoothed: Vec<f64> = post
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        let base = smoothed[0];
        for &v in &smoothed {
            assert!(
                v >= base - 1e-6,
                "class-2 loss fell back below its trigger level: {v} < {base}"
            );
        }
        assert!(
            *smoothed.last().unwrap() > base,
            "deleted-class loss never rose"
        );
    }

    #[test]
    fn forgetting_phase_skips_gamma_gate() {
        let (train, test) = toy_data();
        // gamma = 100 means the gate can essentially never pass, so any saved
        // checkpoint must come from the forgetting phase.
        let config = ZooConfig {
            gamma: 100.0,
            beta: 0.9,
            max_per_bin: 100,
            max_checkpoints_per_run: 1000,
            ..toy_config()
        };
        let spec = toy_spec();
        let plan = ForgettingPlan {
            trigger_step: 5,
            deleted_classes: vec![2, 3],
        };
        let rec = train_forgetting_run_with_plan(&config, &spec, &train, &test, 11, plan).unwrap();
        assert!(!rec.checkpoints.is_empty());
        assert!(rec.checkpoints.iter().all(|c| c.is_forgetting_phase));
    }

    #[test]
    fn run_is_deterministic_given_seed() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let a = train_main_run(&config, &spec, &train, &test, 12).unwrap();
        let b = train_main_run(&config, &spec, &train, &test, 12).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn stored_losses_reproduce_from_stored_params() {
        let (train, test) = toy_data();
        let config = toy_config();
        let spec = toy_spec();
        let rec = train_main_run(&config, &spec, &train, &test, 13).unwrap();
        for ck in rec.checkpoints.iter().take(5) {
            let (raw, accs) = net::eval_class_losses(&ck.params_f64(), &spec, &test).unwrap();
            for (c, &stored) in ck.raw_class_losses.iter().enumerate() {
                assert!(
                    (raw[c] - stored as f64).abs() < 1e-6,
                    "class {c}: {} vs {}",
                    raw[c],
                    stored
                );
            }
            for (c, &stored) in ck.class_accuracies.iter().enumerate() {
                assert!((accs[c] - stored as f64).abs() < 1e-6);
            }
        }
    }
}
