//! Stage orchestration: content-addressed caching around the stage
//! functions, plus the ledger entry every invocation leaves behind.
//!
//! A stage is skipped when (a) the hash of the config sections it
//! depends on is unchanged, (b) the hashes of the artifacts it reads
//! are unchanged, and (c) every output it previously wrote still
//! exists. Anything else reruns the stage and overwrites its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::hashing::{hash_files, hash_json};
use crate::ledger::{now_unix, LedgerEntry, RunLedger, StageStatus};
use crate::stages::{
    read_json, run_evaluate, run_retrain, run_sample, run_train, run_zoo_collect, SamplingRecord,
    StagePaths, STAGES, STAGE_EVALUATE, STAGE_RETRAIN, STAGE_SAMPLE, STAGE_TRAIN, STAGE_ZOO,
};

/// What a stage saw when it last ran; stored as `stamps/<stage>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub input_hashes: Vec<String>,
    /// Outputs relative to the output root.
    pub outputs: Vec<String>,
}

/// Hash of exactly the config sections whose change must invalidate
/// `stage`. Later stages deliberately exclude earlier stages' sections:
/// those reach them through input-artifact hashes instead, so editing,
/// say, the forget set never reruns zoo collection or training.
pub fn stage_config_hash(cfg: &ExperimentConfig, stage: &str) -> Result<String> {
    match stage {
        STAGE_ZOO => hash_json(&(&cfg.dataset, &cfg.main_net, &cfg.zoo)),
        STAGE_TRAIN => hash_json(&(&cfg.dit, &cfg.trainer)),
        STAGE_SAMPLE => hash_json(&(&cfg.dataset, &cfg.sampler)),
        STAGE_RETRAIN => hash_json(&(
            &cfg.dataset,
            &cfg.main_net,
            &cfg.retrain,
            &cfg.sampler.forget_classes,
        )),
        STAGE_EVALUATE => hash_json(&(
            &cfg.dataset,
            &cfg.evaluate,
            &cfg.sampler.forget_classes,
        )),
        other => bail!("unknown stage {other}"),
    }
}

/// The artifacts `stage` reads. For `evaluate` this consults the
/// sampling record, so the exact candidate files feed the cache key.
pub fn stage_input_paths(
    cfg: &ExperimentConfig,
    paths: &StagePaths,
    stage: &str,
) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    match stage {
        STAGE_ZOO => inputs.extend(cfg.dataset.files()),
        STAGE_TRAIN => inputs.push(paths.manifest()),
        STAGE_SAMPLE => {
            inputs.extend(cfg.dataset.files());
            inputs.push(paths.manifest());
            inputs.push(paths.model());
        }
        STAGE_RETRAIN => inputs.extend(cfg.dataset.files()),
        STAGE_EVALUATE => {
            inputs.extend(cfg.dataset.files());
            inputs.push(paths.sampling());
            inputs.push(paths.selection_json());
            if paths.sampling().exists() {
                let rec: SamplingRecord = read_json(&paths.sampling())?;
                for &s in rec
                    .sub_seeds
                    .iter()
                    .take(cfg.evaluate.headline_candidates)
                {
                    inputs.push(paths.candidate(s));
                }
                let selection: crate::stages::SelectionRecord =
                    read_json(&paths.selection_json())?;
                let winner = paths.candidate(selection.winner_sub_seed);
                if !inputs.contains(&winner) {
                    inputs.push(winner);
                }
            }
            inputs.push(paths.retrained());
            if cfg.evaluate.generation_sweep {
                inputs.push(paths.manifest());
                inputs.push(paths.model());
            }
        }
        other => bail!("unknown stage {other}"),
    }
    Ok(inputs)
}

fn check_inputs_exist(paths: &StagePaths, stage: &str, inputs: &[PathBuf]) -> Result<()> {
    for input in inputs {
        if input.exists() {
            continue;
        }
        return Err(match paths.producer_of(input) {
            Some(producer) => anyhow!(
                "missing input {} (produced by stage {producer}; run that stage first)",
                input.display()
            ),
            None => anyhow!(
                "missing input {}; fetch the dataset files before running stage {stage}",
                input.display()
            ),
        });
    }
    Ok(())
}

fn rel_to_root(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn load_stamp(path: &Path) -> Option<Stamp> {
    read_json(path).ok()
}

fn stage_fn(stage: &str) -> Result<fn(&ExperimentConfig, &StagePaths) -> Result<Vec<PathBuf>>> {
    Ok(match stage {
        STAGE_ZOO => run_zoo_collect,
        STAGE_TRAIN => run_train,
        STAGE_SAMPLE => run_sample,
        STAGE_RETRAIN => run_retrain,
        STAGE_EVALUATE => run_evaluate,
        other => bail!("unknown stage {other}"),
    })
}

/// Runs (or skips) one stage, appending a ledger entry either way.
pub fn run_stage(
    cfg: &ExperimentConfig,
    paths: &StagePaths,
    ledger: &RunLedger,
    stage: &str,
    force: bool,
) -> Result<StageStatus> {
    fs::create_dir_all(&paths.root)?;
    fs::create_dir_all(paths.stamps_dir())?;

    let config_hash = stage_config_hash(cfg, stage)?;
    let inputs = stage_input_paths(cfg, paths, stage)?;
    check_inputs_exist(paths, stage, &inputs).with_context(|| format!("stage {stage}"))?;
    let input_hashes = hash_files(&inputs).with_context(|| format!("stage {stage}"))?;

    if !force {
        if let Some(stamp) = load_stamp(&paths.stamp(stage)) {
            let outputs_present = stamp
                .outputs
                .iter()
                .all(|o| paths.root.join(o).exists());
            if stamp.stage == stage
                && stamp.config_hash == config_hash
                && stamp.input_hashes == input_hashes
                && outputs_present
            {
                log::info!("stage {stage}: up to date, skipping");
                ledger.append(&LedgerEntry {
                    unix_time: now_unix(),
                    stage: stage.to_string(),
                    status: StageStatus::Skipped,
                    config_hash,
                    input_hashes,
                    outputs: stamp.outputs.clone(),
                    wall_time_s: 0.0,
                    message: None,
                })?;
                return Ok(StageStatus::Skipped);
            }
        }
    }

    log::info!("stage {stage}: running");
    let start = Instant::now();
    match stage_fn(stage)?(cfg, paths) {
        Ok(outputs) => {
            let wall = start.elapsed().as_secs_f64();
            let rel: Vec<String> = outputs
                .iter()
                .map(|o| rel_to_root(&paths.root, o))
                .collect();
            let stamp = Stamp {
                stage: stage.to_string(),
                config_hash: config_hash.clone(),
                input_hashes: input_hashes.clone(),
                outputs: rel.clone(),
            };
            crate::stages::write_json(&paths.stamp(stage), &stamp)?;
            ledger.append(&LedgerEntry {
                unix_time: now_unix(),
                stage: stage.to_string(),
                status: StageStatus::Ran,
                config_hash,
                input_hashes,
                outputs: rel,
                wall_time_s: wall,
                message: None,
            })?;
            log::info!("stage {stage}: done in {wall:.1}s");
            Ok(StageStatus::Ran)
        }
        Err(err) => {
            let wall = start.elapsed().as_secs_f64();
            // A failed stage must not look cached on the next attempt.
            let _ = fs::remove_file(paths.stamp(stage));
            ledger.append(&LedgerEntry {
                unix_time: now_unix(),
                stage: stage.to_string(),
                status: StageStatus::Failed,
                config_hash,
                input_hashes,
                outputs: Vec::new(),
                wall_time_s: wall,
                message: Some(format!("{err:#}")),
            })?;
            Err(err.context(format!("stage {stage}")))
        }
    }
}

/// Runs all five stages in order with caching.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    force: bool,
) -> Result<Vec<(&'static str, StageStatus)>> {
    let paths = StagePaths::new(cfg.resolved_output_root());
    fs::create_dir_all(&paths.root)?;
    let ledger = RunLedger::at_root(&paths.root);
    let mut statuses = Vec::with_capacity(STAGES.len());
    for stage in STAGES {
        let status = run_stage(cfg, &paths, &ledger, stage, force)?;
        statuses.push((stage, status));
    }
    Ok(statuses)
}
