//! The zoo index: which run files exist, how many checkpoints each holds,
//! which runs belong to the hypernetwork's train vs held-out split, and the
//! per-class loss histograms of the training split.
//!
//! Splits are assigned per run, never per checkpoint, so checkpoints from one
//! training trajectory can never straddle both sides.

use crate::error::{Error, Result};
use crate::zoo::collect::RunKind;
use crate::zoo::net::MainNetSpec;
use crate::zoo::stats::bin_index;
use crate::zoo::store::{read_run_file, RunHeader};
use crate::zoo::Checkpoint;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One run file, as seen from the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub run_id: String,
    pub kind: RunKind,
    pub n_checkpoints: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub spec: MainNetSpec,
    /// Bin layout used for the histograms below.
    pub loss_cap: f64,
    pub bins_per_class: usize,
    pub runs: Vec<RunEntry>,
    pub total_checkpoints: usize,
    /// Clamped-loss histogram per class over the training split.
    pub per_class_loss_histograms: Vec<Vec<u64>>,
    /// Where parameter-normalization statistics are stored once computed.
    pub normalizer_ref: Option<String>,
    /// Optional resampled checkpoint multiset (run index, checkpoint index)
    /// over training-split runs; `None` means every checkpoint once.
    pub pool: Option<Vec<(u32, u32)>>,
}

/// How to index a directory of run files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    /// Fraction of runs held out of hypernetwork training.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub loss_cap: f64,
    pub bins_per_class: usize,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        ManifestConfig {
            test_fraction: 0.1,
            split_seed: 0,
            loss_cap: 5.0,
            bins_per_class: 10,
        }
    }
}

/// A fully loaded run: header plus all checkpoints in step order.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub header: RunHeader,
    pub checkpoints: Vec<Checkpoint>,
}

/// A manifest with every referenced run resident in memory.
#[derive(Debug, Clone)]
pub struct Zoo {
    pub manifest: ZooManifest,
    /// Parallel to `manifest.runs`.
    pub runs: Vec<LoadedRun>,
}

impl Zoo {
    pub fn split_run_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn checkpoint(&self, run_idx: u32, ck_idx: u32) -> &Checkpoint {
        &self.runs[run_idx as usize].checkpoints[ck_idx as usize]
    }

    /// Checkpoint references of one split, honoring the resampled pool for
    /// the training split when present.
    pub fn checkpoint_refs(&self, split: Split) -> Vec<(u32, u32)> {
        if split == Split::Train {
            if let Some(pool) = &self.manifest.pool {
                return pool.clone();
            }
        }
        let mut refs = Vec::new();
        for run_idx in self.split_run_indices(split) {
            for ck_idx in 0..self.runs[run_idx].checkpoints.len() {
                refs.push((run_idx as u32, ck_idx as u32));
            }
        }
        refs
    }

    pub fn total_checkpoints(&self) -> usize {
        self.runs.iter().map(|r| r.checkpoints.len()).sum()
    }
}

fn histograms_for(
    runs: &[LoadedRun],
    entries: &[RunEntry],
    spec: &MainNetSpec,
    loss_cap: f64,
    bins: usize,
) -> Vec<Vec<u64>> {
    let mut hist = vec![vec![0u64; bins]; spec.num_classes];
    for (run, entry) in runs.iter().zip(entries) {
        if entry.split != Split::Train {
            continue;
        }
        for ck in &run.checkpoints {
            for (c, &loss) in ck.class_losses.iter().enumerate() {
                hist[c][bin_index(loss as f64, loss_cap, bins)] += 1;
            }
        }
    }
    hist
}

/// Scans `dir` for `*.dhz` run files and builds a manifest with a seeded
/// by-run train/test split.
pub fn build_manifest(dir: &Path, config: &ManifestConfig) -> Result<ZooManifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "dhz"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no .dhz run files in {}", dir.display())));
    }
    let mut runs = Vec::new();
    let mut spec: Option<MainNetSpec> = None;
    let mut seen = HashSet::new();
    let mut loaded = Vec::new();
    for path in &files {
        let (header, checkpoints) = read_run_file(path)?;
        match &spec {
            None => spec = Some(header.spec.clone()),
            Some(s) if *s != header.spec => {
                return Err(Error::structural(format!(
                    "{} has a different architecture than earlier runs",
                    path.display()
                )));
            }
            _ => {}
        }
        if !seen.insert(header.run_id.clone()) {
            return Err(Error::structural(format!("duplicate run_id {}", header.run_id)));
        }
        runs.push(RunEntry {
            file: path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
            run_id: header.run_id.clone(),
            kind: header.kind,
            n_checkpoints: checkpoints.len(),
            split: Split::Train,
        });
        loaded.push(LoadedRun {
            header,
            checkpoints,
        });
    }
    // Seeded by-run split.
    let mut order: Vec<usize> = (0..runs.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(config.split_seed);
    order.shuffle(&mut rng);
    let n_test = ((config.test_fraction * runs.len() as f64).round() as usize).min(runs.len() - 1);
    for &i in order.iter().take(n_test) {
        runs[i].split = Split::Test;
    }
    let spec = spec.unwrap();
    let per_class_loss_histograms =
        histograms_for(&loaded, &runs, &spec, config.loss_cap, config.bins_per_class);
    let total_checkpoints = runs.iter().map(|r| r.n_checkpoints).sum();
    Ok(ZooManifest {
        spec,
        loss_cap: config.loss_cap,
        bins_per_class: config.bins_per_class,
        runs,
        total_checkpoints,
        per_class_loss_histograms,
        normalizer_ref: None,
        pool: None,
    })
}

pub fn save_manifest(path: &Path, manifest: &ZooManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<ZooManifest> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads a manifest and every run file it references, validating counts,
/// identities, and architecture agreement.
pub fn load_zoo(manifest_path: &Path) -> Result<Zoo> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut runs = Vec::with_capacity(manifest.runs.len());
    for entry in &manifest.runs {
        let path = dir.join(&entry.file);
        let (header, checkpoints) = read_run_file(&path)?;
        if header.run_id != entry.run_id {
            return Err(Error::structural(format!(
                "{}: run_id {} does not match manifest entry {}",
                path.display(),
                header.run_id,
                entry.run_id
            )));
        }
        if checkpoints.len() != entry.n_checkpoints {
            return Err(Error::structural(format!(
                "{}: {} checkpoints on disk, manifest says {}",
                path.display(),
                checkpoints.len(),
                entry.n_checkpoints
            )));
        }
        if header.spec != manifest.spec {
            return Err(Error::structural(format!(
                "{}: architecture differs from manifest",
                path.display()
            )));
        }
        runs.push(LoadedRun {
            header,
            checkpoints,
        });
    }
    if let Some(pool) = &manifest.pool {
        for &(r, c) in pool {
            let run = runs
                .get(r as usize)
                .ok_or_else(|| Error::structural("pool references a missing run"))?;
            if manifest.runs[r as usize].split != Split::Train {
                return Err(Error::structural("pool references a test-split run"));
            }
            if c as usize >= run.checkpoints.len() {
                return Err(Error::structural("pool references a missing checkpoint"));
            }
        }
    }
    Ok(Zoo { manifest, runs })
}
