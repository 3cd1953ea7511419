//! Training loop: draws checkpoint pairs from a zoo, noises the future
//! parameters, and fits the transformer with AdamW plus an EMA copy.
//!
//! Variant 1 trains on ordered pairs from one run (current θ at an earlier
//! step, future θ* at a later step) with the current/target losses and
//! their deltas as conditioning. Variant 2 trains on single checkpoints
//! conditioned on their own losses. Both apply hidden-unit permutation
//! augmentation with one shared permutation per sample, multiplying the
//! effective zoo size without changing any represented function.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dit::{CondBatch, DiT, Variant};
use super::params::{ema_update, AdamW};
use crate::codec::tokenize;
use crate::error::{Error, Result};
use crate::zoo::manifest::{Split, Zoo};
use crate::zoo::net::{permute_hidden_units, random_permutations};

/// Knobs of the optimization loop itself; model and optimizer
/// hyperparameters live in [`super::dit::DiTConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Hard cap on optimization steps.
    pub max_steps: usize,
    /// Steps per disjoint window when smoothing the learning curve.
    pub plateau_window: usize,
    /// Consecutive windows with relative improvement below
    /// `plateau_tol` before training stops early.
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    /// Never stop before this many steps.
    pub min_steps: usize,
    /// Apply hidden-unit permutation augmentation.
    pub augment: bool,
    pub seed: u64,
    /// Steps between progress log lines (0 = quiet).
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            max_steps: 3000,
            plateau_window: 20,
            plateau_patience: 5,
            plateau_tol: 0.005,
            min_steps: 200,
            augment: true,
            seed: 0,
            log_every: 100,
        }
    }
}

/// What one training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Per-step training loss.
    pub curve: Vec<f64>,
    /// Means over disjoint `plateau_window`-step windows of `curve`.
    pub window_means: Vec<f64>,
    pub steps_run: usize,
    /// True when training stopped on the plateau rule rather than the
    /// step cap.
    pub plateau_reached: bool,
}

/// One assembled training batch, ready for the forward pass.
pub struct AssembledBatch {
    /// Noised future tokens, `[batch, entry_count]`.
    pub xt: Array2<f64>,
    /// Clean future tokens (the prediction target).
    pub x0: Array2<f64>,
    /// Clean current tokens (variant 1 only).
    pub context: Option<Array2<f64>>,
    pub cond: CondBatch,
}

/// Draws training samples from the zoo's training split.
pub struct PairSampler<'z> {
    zoo: &'z Zoo,
    /// Train-split run indices eligible for the variant.
    eligible: Vec<u32>,
    variant: Variant,
}

impl<'z> PairSampler<'z> {
    pub fn new(zoo: &'z Zoo, variant: Variant) -> Result<PairSampler<'z>> {
        let min_ckpts = match variant {
            Variant::V1 => 2,
            Variant::V2 => 1,
        };
        let eligible: Vec<u32> = zoo
            .split_run_indices(Split::Train)
            .into_iter()
            .filter(|&ri| zoo.runs[ri].checkpoints.len() >= min_ckpts)
            .map(|ri| ri as u32)
            .collect();
        if eligible.is_empty() {
            return Err(Error::config(format!(
                "no training run has the {min_ckpts}+ checkpoints this variant needs"
            )));
        }
        Ok(PairSampler {
            zoo,
            eligible,
            variant,
        })
    }

    /// Returns (current, future) checkpoint refs; variant 2 repeats one
    /// checkpoint in both slots.
    pub fn draw(&self, rng: &mut ChaCha20Rng) -> (u32, u32, u32, u32) {
        match self.variant {
            Variant::V1 => {
                let ri = *self.eligible.choose(rng).unwrap();
                let n = self.zoo.runs[ri as usize].checkpoints.len();
                let a = rng.gen_range(0..n);
                let b = loop {
                    let c = rng.gen_range(0..n);
                    if c != a {
                        break c;
                    }
                };
                // Checkpoints are stored in save order, so index order is
                // step order.
                let (lo, hi) = (a.min(b) as u32, a.max(b) as u32);
                (ri, lo, ri, hi)
            }
            Variant::V2 => {
                if let Some(pool) = &self.zoo.manifest.pool {
                    let &(ri, ci) = pool.choose(rng).unwrap();
                    (ri, ci, ri, ci)
                } else {
                    let ri = *self.eligible.choose(rng).unwrap();
                    let n = self.zoo.runs[ri as usize].checkpoints.len();
                    let ci = rng.gen_range(0..n) as u32;
                    (ri, ci, ri, ci)
                }
            }
        }
    }
}

fn clamp_losses(losses: &[f32], cap: f64) -> Vec<f64> {
    losses.iter().map(|&l| (l as f64).min(cap)).collect()
}

/// Draws, augments, tokenizes, and noises one batch.
pub fn assemble_batch(
    dit: &DiT,
    sampler: &PairSampler<'_>,
    rng: &mut ChaCha20Rng,
    batch_size: usize,
) -> Result<AssembledBatch> {
    assemble_batch_with(dit, sampler, rng, batch_size, true)
}

/// `assemble_batch` with augmentation switchable (off for replay tests).
pub fn assemble_batch_with(
    dit: &DiT,
    sampler: &PairSampler<'_>,
    rng: &mut ChaCha20Rng,
    batch_size: usize,
    augment: bool,
) -> Result<AssembledBatch> {
    let e = dit.entry_count();
    let m = dit.config.num_classes;
    let v1 = dit.config.variant == Variant::V1;
    let mut xt = Array2::zeros((batch_size, e));
    let mut x0 = Array2::zeros((batch_size, e));
    let mut context = if v1 { Some(Array2::zeros((batch_size, e))) } else { None };
    let mut t_vec = Vec::with_capacity(batch_size);
    let mut target_losses = Array2::zeros((batch_size, m));
    let mut current_losses = if v1 { Some(Array2::zeros((batch_size, m))) } else { None };
    let normal = Normal::new(0.0, 1.0).unwrap();

    for bi in 0..batch_size {
        let (cri, cci, fri, fci) = sampler.draw(rng);
        let cur = sampler.zoo.checkpoint(cri, cci);
        let fut = sampler.zoo.checkpoint(fri, fci);
        let mut cur_params = cur.params_f64();
        let mut fut_params = fut.params_f64();
        if augment {
            let perms = random_permutations(&dit.spec, rng);
            cur_params = permute_hidden_units(&cur_params, &dit.spec, &perms)?;
            fut_params = permute_hidden_units(&fut_params, &dit.spec, &perms)?;
        }
        let fut_tokens = tokenize(&fut_params, &dit.layout, &dit.stats)?.flatten();
        let t = rng.gen_range(1..=dit.config.diffusion_steps);
        let noise: Vec<f64> = (0..e).map(|_| normal.sample(rng)).collect();
        let noised = dit.schedule.q_sample(&fut_tokens, t, &noise)?;
        xt.row_mut(bi).assign(&ndarray::ArrayView1::from(&noised[..]));
        x0.row_mut(bi).assign(&ndarray::ArrayView1::from(&fut_tokens[..]));
        t_vec.push(t);
        let fl = clamp_losses(&fut.class_losses, dit.config.loss_clamp);
        for c in 0..m {
            target_losses[[bi, c]] = fl[c];
        }
        if let (Some(ctx), Some(cl)) = (context.as_mut(), current_losses.as_mut()) {
            let cur_tokens = tokenize(&cur_params, &dit.layout, &dit.stats)?.flatten();
            ctx.row_mut(bi).assign(&ndarray::ArrayView1::from(&cur_tokens[..]));
            let c_losses = clamp_losses(&cur.class_losses, dit.config.loss_clamp);
            for c in 0..m {
                cl[[bi, c]] = c_losses[c];
            }
        }
    }
    Ok(AssembledBatch {
        xt,
        x0,
        context,
        cond: CondBatch {
            t: t_vec,
            target_losses,
            current_losses,
        },
    })
}

/// Mean squared error over all entries (padding included).
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    (pred - target).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Forward, backward, optimizer step, EMA update. Returns the batch loss.
pub fn training_step(
    dit: &mut DiT,
    opt: &mut AdamW,
    grads: &mut [f64],
    batch: &AssembledBatch,
) -> Result<f64> {
    let (pred, cache) = dit.forward(&dit.params, &batch.xt, batch.context.as_ref(), &batch.cond)?;
    let loss = mse(&pred, &batch.x0);
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite training loss {loss}; batch stats: xt [{:.3e}, {:.3e}], x0 [{:.3e}, {:.3e}], t {:?}",
            batch.xt.iter().cloned().fold(f64::INFINITY, f64::min),
            batch.xt.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            batch.x0.iter().cloned().fold(f64::INFINITY, f64::min),
            batch.x0.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            batch.cond.t,
        )));
    }
    let n = (pred.nrows() * pred.ncols()) as f64;
    let dpred = (&pred - &batch.x0).mapv(|v| 2.0 * v / n);
    grads.iter_mut().for_each(|g| *g = 0.0);
    dit.backward(&dit.params, grads, &cache, &dpred)?;
    let ranges = dit.schema.decay_ranges();
    opt.step(&mut dit.params, grads, &ranges);
    ema_update(&mut dit.ema, &dit.params, dit.config.ema_decay);
    Ok(loss)
}

/// Means over disjoint `window`-step chunks (trailing partial chunk
/// dropped).
pub fn disjoint_window_means(curve: &[f64], window: usize) -> Vec<f64> {
    curve
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Index of the first window after which `patience` consecutive windows
/// improved by less than `tol` relative, if any.
pub fn detect_plateau(means: &[f64], tol: f64, patience: usize) -> Option<usize> {
    let mut stale = 0;
    for i in 1..means.len() {
        let improvement = (means[i - 1] - means[i]) / means[i - 1].abs().max(f64::MIN_POSITIVE);
        if improvement < tol {
            stale += 1;
            if stale >= patience {
                return Some(i);
            }
        } else {
            stale = 0;
        }
    }
    None
}

/// Runs the full optimization loop on the zoo's training split.
pub fn train_dit(dit: &mut DiT, zoo: &Zoo, tcfg: &TrainerConfig) -> Result<TrainOutcome> {
    if zoo.manifest.spec != dit.spec {
        return Err(Error::structural(
            "zoo and model were built for different network architectures",
        ));
    }
    let sampler = PairSampler::new(zoo, dit.config.variant)?;
    let mut opt = AdamW::new(
        dit.schema.len,
        dit.config.learning_rate,
        dit.config.weight_decay,
        dit.config.adam_beta1,
        dit.config.adam_beta2,
    );
    let mut grads = vec![0.0; dit.schema.len];
    let mut rng = ChaCha20Rng::seed_from_u64(tcfg.seed);
    let mut curve = Vec::with_capacity(tcfg.max_steps);
    let mut plateau_reached = false;

    for step in 1..=tcfg.max_steps {
        let batch = assemble_batch_with(
            dit,
            &sampler,
            &mut rng,
            dit.config.batch_size,
            tcfg.augment,
        )?;
        let loss = training_step(dit, &mut opt, &mut grads, &batch)?;
        curve.push(loss);
        if tcfg.log_every > 0 && step % tcfg.log_every == 0 {
            let w = tcfg.plateau_window.min(step);
            let recent: f64 = curve[step - w..].iter().sum::<f64>() / w as f64;
            log::info!("step {step}: loss {loss:.6} (last-{w} mean {recent:.6})");
        }
        if step >= tcfg.min_steps && step % tcfg.plateau_window == 0 {
            let means = disjoint_window_means(&curve, tcfg.plateau_window);
            if detect_plateau(&means, tcfg.plateau_tol, tcfg.plateau_patience).is_some() {
                plateau_reached = true;
                break;
            }
        }
    }
    let window_means = disjoint_window_means(&curve, tcfg.plateau_window);
    Ok(TrainOutcome {
        steps_run: curve.len(),
        curve,
        window_means,
        plateau_reached,
    })
}
