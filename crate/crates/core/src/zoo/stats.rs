//! Zoo summaries and histogram-targeted resampling.
//!
//! The summaries feed two consumers: human-readable reports (loss coverage,
//! pivot-accuracy health) and the sampler, which prompts the hypernetwork
//! with per-class loss extremes and quantiles observed in the training split.

use crate::error::{Error, Result};
use crate::zoo::manifest::{Split, Zoo, ZooManifest};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Equal-width bin of a clamped loss over `[0, cap]`; the top bin absorbs
/// the cap itself.
pub fn bin_index(loss: f64, cap: f64, bins: usize) -> usize {
    let width = cap / bins as f64;
    ((loss.max(0.0) / width) as usize).min(bins - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn over(values: impl Iterator<Item = f64>) -> Summary {
        let mut n = 0usize;
        let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for v in values {
            n += 1;
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        if n == 0 {
            Summary {
                min: 0.0,
                mean: 0.0,
                max: 0.0,
            }
        } else {
            Summary {
                min,
                mean: sum / n as f64,
                max,
            }
        }
    }
}

/// Deterministic description of a zoo's contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooStatsReport {
    pub total_runs: usize,
    pub train_runs: usize,
    pub test_runs: usize,
    pub total_checkpoints: usize,
    pub per_run_counts: Vec<(String, usize)>,
    /// Clamped-loss histograms per class over the training split.
    pub per_class_loss_histograms: Vec<Vec<u64>>,
    pub per_class_loss: Vec<Summary>,
    /// Summary of `min(acc over pivot classes)` across all checkpoints.
    pub pivot_accuracy: Summary,
    pub forgetting_checkpoint_fraction: f64,
}

/// Summarizes a loaded zoo; histograms cover only the training split so they
/// describe what the hypernetwork will actually see.
pub fn zoo_stats(zoo: &Zoo, pivot_classes: &[usize]) -> ZooStatsReport {
    let m = zoo.manifest.spec.num_classes;
    let bins = zoo.manifest.bins_per_class;
    let cap = zoo.manifest.loss_cap;
    let mut hist = vec![vec![0u64; bins]; m];
    let mut losses: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut pivot_mins = Vec::new();
    let mut forgetting = 0usize;
    let mut total = 0usize;
    for (run, entry) in zoo.runs.iter().zip(&zoo.manifest.runs) {
        for ck in &run.checkpoints {
            total += 1;
            if ck.is_forgetting_phase {
                forgetting += 1;
            }
            if entry.split == Split::Train {
                for (c, &l) in ck.class_losses.iter().enumerate() {
                    hist[c][bin_index(l as f64, cap, bins)] += 1;
                    losses[c].push(l as f64);
                }
            }
            if !pivot_classes.is_empty() {
                let min_acc = pivot_classes
                    .iter()
                    .map(|&c| ck.class_accuracies[c] as f64)
                    .fold(f64::INFINITY, f64::min);
                pivot_mins.push(min_acc);
            }
        }
    }
    ZooStatsReport {
        total_runs: zoo.runs.len(),
        train_runs: zoo.split_run_indices(Split::Train).len(),
        test_runs: zoo.split_run_indices(Split::Test).len(),
        total_checkpoints: total,
        per_run_counts: zoo
            .manifest
            .runs
            .iter()
            .map(|r| (r.run_id.clone(), r.n_checkpoints))
            .collect(),
        per_class_loss_histograms: hist,
        per_class_loss: losses.iter().map(|l| Summary::over(l.iter().copied())).collect(),
        pivot_accuracy: Summary::over(pivot_mins.into_iter()),
        forgetting_checkpoint_fraction: if total == 0 {
            0.0
        } else {
            forgetting as f64 / total as f64
        },
    }
}

/// Sorted clamped losses per class over the training split, for quantile
/// queries when building prompts.
#[derive(Debug, Clone)]
pub struct ClassLossTable {
    /// `sorted[c]` is ascending.
    pub sorted: Vec<Vec<f64>>,
}

impl ClassLossTable {
    pub fn from_zoo(zoo: &Zoo) -> Result<ClassLossTable> {
        let m = zoo.manifest.spec.num_classes;
        let mut sorted: Vec<Vec<f64>> = vec![Vec::new(); m];
        for (run_idx, ck_idx) in zoo.checkpoint_refs(Split::Train) {
            let ck = zoo.checkpoint(run_idx, ck_idx);
            for (c, &l) in ck.class_losses.iter().enumerate() {
                sorted[c].push(l as f64);
            }
        }
        if sorted.iter().any(|v| v.is_empty()) {
            return Err(Error::config("zoo training split is empty"));
        }
        for v in &mut sorted {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        Ok(ClassLossTable { sorted })
    }

    pub fn min(&self, class: usize) -> f64 {
        self.sorted[class][0]
    }

    pub fn max(&self, class: usize) -> f64 {
        *self.sorted[class].last().unwrap()
    }

    /// Linear-interpolation quantile, `q` in `[0, 1]`.
    pub fn quantile(&self, class: usize, q: f64) -> f64 {
        let v = &self.sorted[class];
        if v.len() == 1 {
            return v[0];
        }
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        v[lo] + (v[hi] - v[lo]) * frac
    }

    pub fn median(&self, class: usize) -> f64 {
        self.quantile(class, 0.5)
    }
}

/// Desired loss histogram for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceTarget {
    pub class_index: usize,
    /// Relative weight per bin; normalized internally.
    pub bin_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RebalanceOutcome {
    /// The input manifest with `pool` replaced by the resampled multiset.
    pub manifest: ZooManifest,
    /// Bins the target wanted but no checkpoint can serve.
    pub unreachable_bins: Vec<usize>,
    /// Histogram of the resampled pool for the target class.
    pub achieved_histogram: Vec<u64>,
    /// Total-variation distance between the achieved histogram and the
    /// (normalized) requested target.
    pub tv_distance: f64,
}

/// Resamples the training-split checkpoint pool (repetition allowed) so the
/// target class's loss histogram tracks `target`, best-effort when some bins
/// have no source checkpoints.
pub fn rebalance_zoo(
    zoo: &Zoo,
    target: &RebalanceTarget,
    n_samples: Option<usize>,
    seed: u64,
) -> Result<RebalanceOutcome> {
    let bins = zoo.manifest.bins_per_class;
    let cap = zoo.manifest.loss_cap;
    let m = zoo.manifest.spec.num_classes;
    if target.class_index >= m {
        return Err(Error::config("rebalance class out of range"));
    }
    if target.bin_weights.len() != bins {
        return Err(Error::config(format!(
            "target has {} weights, manifest uses {bins} bins",
            target.bin_weights.len()
        )));
    }
    if target.bin_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::config("bin weights must be finite and nonnegative"));
    }
    let weight_sum: f64 = target.bin_weights.iter().sum();
    if weight_sum <= 0.0 {
        return Err(Error::config("target weights sum to zero"));
    }

    // Group training-split checkpoints by the target class's bin.
    let mut groups: Vec<Vec<(u32, u32)>> = vec![Vec::new(); bins];
    let refs = zoo.checkpoint_refs(Split::Train);
    for &(r, c) in &refs {
        let loss = zoo.checkpoint(r, c).class_losses[target.class_index] as f64;
        groups[bin_index(loss, cap, bins)].push((r, c));
    }
    let n = n_samples.unwrap_or(refs.len());
    if n == 0 {
        return Err(Error::config("cannot resample to an empty pool"));
    }

    let unreachable_bins: Vec<usize> = (0..bins)
        .filter(|&u| target.bin_weights[u] > 0.0 && groups[u].is_empty())
        .collect();
    // Redistribute unreachable mass over the bins that can serve it.
    let mut usable: Vec<f64> = (0..bins)
        .map(|u| if groups[u].is_empty() { 0.0 } else { target.bin_weights[u] })
        .collect();
    let usable_sum: f64 = usable.iter().sum();
    if usable_sum <= 0.0 {
        return Err(Error::config("no checkpoint falls in any requested bin"));
    }
    usable.iter_mut().for_each(|w| *w /= usable_sum);

    // Largest-remainder allocation of n draws over usable bins.
    let mut desired: Vec<usize> = usable.iter().map(|w| (w * n as f64).floor() as usize).collect();
    let mut leftover = n - desired.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..bins).collect();
    order.sort_by(|&a, &b| {
        let ra = usable[a] * n as f64 - desired[a] as f64;
        let rb = usable[b] * n as f64 - desired[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &u in &order {
        if leftover == 0 {
            break;
        }
        if !groups[u].is_empty() {
            desired[u] += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(n);
    let mut achieved = vec![0u64; bins];
    for u in 0..bins {
        let want = desired[u];
        if want == 0 {
            continue;
        }
        let group = &groups[u];
        if want == group.len() {
            pool.extend_from_slice(group);
        } else if want < group.len() {
            let mut shuffled = group.clone();
            shuffled.shuffle(&mut rng);
            shuffled.truncate(want);
            shuffled.sort_unstable();
            pool.extend_from_slice(&shuffled);
        } else {
            pool.extend_from_slice(group);
            for _ in 0..want - group.len() {
                pool.push(group[rng.gen_range(0..group.len())]);
            }
        }
        achieved[u] = want as u64;
    }
    pool.sort_unstable();

    let tv_distance = 0.5
        * (0..bins)
            .map(|u| {
                let want = target.bin_weights[u] / weight_sum;
                let got = achieved[u] as f64 / n as f64;
                (want - got).abs()
            })
            .sum::<f64>();

    let mut manifest = zoo.manifest.clone();
    manifest.pool = Some(pool);
    Ok(RebalanceOutcome {
        manifest,
        unreachable_bins,
        achieved_histogram: achieved,
        tv_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::collect::RunKind;
    use crate::zoo::manifest::{LoadedRun, RunEntry};
    use crate::zoo::net::MainNetSpec;
    use crate::zoo::store::RunHeader;
    use crate::zoo::Checkpoint;
    use std::collections::HashMap;

    /// Builds an in-memory zoo whose class-0 losses are exactly `losses`,
    /// one run per `runs` bucket.
    fn synthetic_zoo(losses_by_run: &[Vec<f64>]) -> Zoo {
        let spec = MainNetSpec::new(4, vec![2], 2).unwrap();
        let mut runs = Vec::new();
        let mut entries = Vec::new();
        for (i, losses) in losses_by_run.iter().enumerate() {
            let run_id = format!("synthetic-{i}");
            let checkpoints: Vec<Checkpoint> = losses
                .iter()
                .enumerate()
                .map(|(j, &l)| Checkpoint {
                    params: vec![0.0; spec.param_count()],
                    class_losses: vec![l as f32, 0.5],
                    raw_class_losses: vec![l as f32, 0.5],
                    class_accuracies: vec![0.9, 0.9],
                    run_id: run_id.clone(),
                    step: j as u64 + 1,
                    epoch: 0,
                    is_forgetting_phase: false,
                    deleted_classes: vec![],
                    undersampled_classes: vec![],
                })
                .collect();
            entries.push(RunEntry {
                file: format!("{run_id}.dhz"),
                run_id: run_id.clone(),
                kind: RunKind::Main,
                n_checkpoints: checkpoints.len(),
                split: Split::Train,
            });
            runs.push(LoadedRun {
                header: RunHeader {
                    run_id,
                    seed: i as u64,
                    kind: RunKind::Main,
                    spec: spec.clone(),
                    undersampled_classes: vec![],
                    plan: None,
                    steps_per_epoch: 10,
                    total_steps: 10,
                },
                checkpoints,
            });
        }
        let total = entries.iter().map(|e| e.n_checkpoints).sum();
        Zoo {
            manifest: ZooManifest {
                spec,
                loss_cap: 5.0,
                bins_per_class: 10,
                runs: entries,
                total_checkpoints: total,
                per_class_loss_histograms: vec![],
                normalizer_ref: None,
                pool: None,
            },
            runs,
        }
    }

    #[test]
    fn bin_index_edges() {
        assert_eq!(bin_index(0.0, 5.0, 10), 0);
        assert_eq!(bin_index(0.49, 5.0, 10), 0);
        assert_eq!(bin_index(0.5, 5.0, 10), 1);
        assert_eq!(bin_index(4.99, 5.0, 10), 9);
        assert_eq!(bin_index(5.0, 5.0, 10), 9);
    }

    #[test]
    fn stats_on_empty_zoo_are_all_zero() {
        let zoo = synthetic_zoo(&[vec![]]);
        let report = zoo_stats(&zoo, &[0]);
        assert_eq!(report.total_checkpoints, 0);
        assert!(report
            .per_class_loss_histograms
            .iter()
            .all(|h| h.iter().all(|&c| c == 0)));
    }

    #[test]
    fn stats_match_hand_count() {
        let zoo = synthetic_zoo(&[vec![0.1, 0.6, 4.9]]);
        let report = zoo_stats(&zoo, &[0, 1]);
        assert_eq!(report.total_checkpoints, 3);
        let h0 = &report.per_class_loss_histograms[0];
        assert_eq!(h0[0], 1);
        assert_eq!(h0[1], 1);
        assert_eq!(h0[9], 1);
        assert_eq!(h0.iter().sum::<u64>(), 3);
        // Class 1 losses are all 0.5 -> bin 1.
        assert_eq!(report.per_class_loss_histograms[1][1], 3);
        assert!((report.per_class_loss[0].min - 0.1f32 as f64).abs() < 1e-7);
        assert!((report.pivot_accuracy.mean - 0.9f32 as f64).abs() < 1e-6);
    }

    #[test]
    fn loss_table_quantiles_interpolate() {
        let zoo = synthetic_zoo(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let table = ClassLossTable::from_zoo(&zoo).unwrap();
        assert_eq!(table.min(0), 1.0);
        assert_eq!(table.max(0), 4.0);
        assert!((table.median(0) - 2.5).abs() < 1e-12);
        assert!((table.quantile(0, 0.95) - 3.85).abs() < 1e-9);
    }

    fn pool_multiset(manifest: &ZooManifest) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for &r in manifest.pool.as_ref().unwrap() {
            *counts.entry(r).or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn rebalance_to_current_histogram_is_identity() {
        let zoo = synthetic_zoo(&[vec![0.1, 0.2, 0.7, 1.2, 1.3, 2.6]]);
        // Current class-0 histogram: bin0 = 2, bin1 = 1, bin2 = 2, bin5 = 1.
        let mut weights = vec![0.0; 10];
        weights[0] = 2.0;
        weights[1] = 1.0;
        weights[2] = 2.0;
        weights[5] = 1.0;
        let out = rebalance_zoo(
            &zoo,
            &RebalanceTarget {
                class_index: 0,
                bin_weights: weights,
            },
            None,
            9,
        )
        .unwrap();
        assert!(out.unreachable_bins.is_empty());
        assert!(out.tv_distance < 1e-12);
        let counts = pool_multiset(&out.manifest);
        assert_eq!(counts.len(), 6);
        assert!(counts.values().all(|&c| c == 1));
    }

    #[test]
    fn rebalance_flattens_overrepresented_bin() {
        // Bin 0 is 10x overrepresented; every other bin has 4 checkpoints.
        let mut losses = vec![0.05; 40];
        for u in 1..10 {
            for k in 0..4 {
                losses.push(u as f64 * 0.5 + 0.1 + 0.05 * k as f64);
            }
        }
        let zoo = synthetic_zoo(&[losses]);
        let out = rebalance_zoo(
            &zoo,
            &RebalanceTarget {
                class_index: 0,
                bin_weights: vec![1.0; 10],
            },
            Some(70),
            10,
        )
        .unwrap();
        assert!(out.unreachable_bins.is_empty());
        assert!(out.tv_distance <= 0.05, "tv = {}", out.tv_distance);
        let hist = &out.achieved_histogram;
        assert_eq!(hist.iter().sum::<u64>(), 70);
        assert!(hist.iter().all(|&c| c >= 6 && c <= 8), "{hist:?}");
    }

    #[test]
    fn unreachable_bins_are_reported() {
        let zoo = synthetic_zoo(&[vec![0.1, 0.2, 0.3]]);
        let out = rebalance_zoo(
            &zoo,
            &RebalanceTarget {
                class_index: 0,
                bin_weights: vec![1.0; 10],
            },
            Some(10),
            11,
        )
        .unwrap();
        assert_eq!(out.unreachable_bins, vec![1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(out.achieved_histogram[0], 10);
    }
}
