//! The five pipeline stages and the fixed artifact layout they share.
//!
//! Every stage is a plain function from the experiment config to a list
//! of output files; caching, timing, and ledger bookkeeping live in
//! [`crate::pipeline`]. Artifact paths are centralized in [`StagePaths`]
//! so stages, caching, and plotting always agree on where things are.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use lethe_core::codec::{build_layout, compute_stats};
use lethe_core::diffusion::{load_model, save_model, train_dit, DiT, TrainMeta, Variant};
use lethe_core::evalkit::{full_report, retrain_baseline, EvalInputs};
use lethe_core::sampler::{
    evaluate_generation, load_candidate, make_prompt, random_current_state, sample_candidates,
    save_candidate, select_best, Candidate, SelectionTable,
};
use lethe_core::zoo::{
    build_manifest, load_zoo, run_training, save_manifest, write_run_file, ClassLossTable,
    RunKind, Split,
};

use crate::config::ExperimentConfig;
use crate::hashing::hash_file;

pub const STAGE_ZOO: &str = "zoo-collect";
pub const STAGE_TRAIN: &str = "train";
pub const STAGE_SAMPLE: &str = "sample";
pub const STAGE_RETRAIN: &str = "retrain";
pub const STAGE_EVALUATE: &str = "evaluate";

/// Pipeline stages in execution order.
pub const STAGES: [&str; 5] = [
    STAGE_ZOO,
    STAGE_TRAIN,
    STAGE_SAMPLE,
    STAGE_RETRAIN,
    STAGE_EVALUATE,
];

// RNG streams of `sampler.seed` reserved for prompt construction, so
// candidate streams 0..n never collide with them.
const PROMPT_JITTER_STREAM: u64 = u64::MAX - 1;
const CURRENT_STATE_STREAM: u64 = u64::MAX - 2;

/// Where every artifact lives under one output root.
#[derive(Debug, Clone)]
pub struct StagePaths {
    pub root: PathBuf,
}

impl StagePaths {
    pub fn new(root: PathBuf) -> StagePaths {
        StagePaths { root }
    }

    pub fn zoo_dir(&self) -> PathBuf {
        self.root.join("zoo")
    }

    pub fn run_file(&self, index: usize) -> PathBuf {
        self.zoo_dir().join(format!("run-{index:05}.dhz"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.zoo_dir().join("manifest.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.dhf")
    }

    pub fn curve(&self) -> PathBuf {
        self.root.join("training_curve.json")
    }

    pub fn prompt(&self) -> PathBuf {
        self.root.join("prompt.json")
    }

    pub fn sampling(&self) -> PathBuf {
        self.root.join("sampling.json")
    }

    pub fn candidates_dir(&self) -> PathBuf {
        self.root.join("candidates")
    }

    pub fn candidate(&self, sub_seed: u64) -> PathBuf {
        self.candidates_dir()
            .join(format!("cand-{sub_seed:03}.dhp"))
    }

    pub fn selection_json(&self) -> PathBuf {
        self.root.join("selection.json")
    }

    pub fn selection_csv(&self) -> PathBuf {
        self.root.join("selection.csv")
    }

    pub fn retrained(&self) -> PathBuf {
        self.root.join("retrained.dhp")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn alignment_json(&self) -> PathBuf {
        self.root.join("alignment.json")
    }

    pub fn alignment_csv(&self) -> PathBuf {
        self.root.join("alignment.csv")
    }

    pub fn stamps_dir(&self) -> PathBuf {
        self.root.join("stamps")
    }

    pub fn stamp(&self, stage: &str) -> PathBuf {
        self.stamps_dir().join(format!("{stage}.json"))
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Which stage produces `path`, for error messages about missing inputs.
    pub fn producer_of(&self, path: &Path) -> Option<&'static str> {
        if path.starts_with(self.zoo_dir()) {
            Some(STAGE_ZOO)
        } else if path == self.model() || path == self.curve() {
            Some(STAGE_TRAIN)
        } else if path.starts_with(self.candidates_dir())
            || path == self.prompt()
            || path == self.sampling()
            || path == self.selection_json()
            || path == self.selection_csv()
        {
            Some(STAGE_SAMPLE)
        } else if path == self.retrained() {
            Some(STAGE_RETRAIN)
        } else if path == self.report_json()
            || path == self.report_csv()
            || path == self.alignment_json()
            || path == self.alignment_csv()
        {
            Some(STAGE_EVALUATE)
        } else {
            None
        }
    }
}

/// Sidecar record of the sampling stage: what was asked for and which
/// sub-seeds survived the finiteness check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub requested: usize,
    pub rejected: usize,
    /// Surviving candidates in draw order; `cand-XXX.dhp` exists for each.
    pub sub_seeds: Vec<u64>,
}

/// Sidecar record of candidate selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub winner_sub_seed: u64,
    pub table: SelectionTable,
}

/// The prompt actually used for sampling, for inspection and plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub forget_classes: Vec<usize>,
    pub retain_classes: Vec<usize>,
    pub target_losses: Vec<f64>,
    /// Present for the variant that conditions on a current state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current_losses: Option<Vec<f64>>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes =
        fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Whether run slot `i` is a forgetting run: the pattern
/// `floor((i+1)f) > floor(i f)` spreads `floor(n·f)` forgetting runs
/// evenly through the sequence.
pub fn is_forgetting_slot(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

// ---------------------------------------------------------------------
// Stage 1: zoo collection
// ---------------------------------------------------------------------

pub fn run_zoo_collect(cfg: &ExperimentConfig, paths: &StagePaths) -> Result<Vec<PathBuf>> {
    let spec = cfg.spec()?;
    let (train, test) = cfg.dataset.load()?;
    fs::create_dir_all(paths.zoo_dir())?;
    let n = cfg.zoo.runs;
    let mut outputs = Vec::with_capacity(n + 1);
    let mut total = 0usize;
    for i in 0..n {
        let kind = if is_forgetting_slot(i, cfg.zoo.policy.forgetting_run_fraction) {
            RunKind::Forgetting
        } else {
            RunKind::Main
        };
        let seed = cfg.zoo.seed.wrapping_add(i as u64);
        let record = run_training(&cfg.zoo.policy, &spec, &train, &test, seed, kind, None)
            .with_context(|| format!("zoo run {i} (seed {seed})"))?;
        total += record.checkpoints.len();
        let path = paths.run_file(i);
        write_run_file(&path, &record)?;
        outputs.push(path);
        log::info!(
            "zoo run {}/{} ({:?}): {} checkpoints ({} so far)",
            i + 1,
            n,
            kind,
            record.checkpoints.len(),
            total
        );
    }
    let manifest = build_manifest(&paths.zoo_dir(), &cfg.zoo.manifest)?;
    save_manifest(&paths.manifest(), &manifest)?;
    log::info!(
        "zoo complete: {} checkpoints across {} runs",
        manifest.total_checkpoints,
        manifest.runs.len()
    );
    outputs.push(paths.manifest());
    Ok(outputs)
}

// ---------------------------------------------------------------------
// Stage 2: hypernetwork training
// ---------------------------------------------------------------------

pub fn run_train(cfg: &ExperimentConfig, paths: &StagePaths) -> Result<Vec<PathBuf>> {
    let zoo = load_zoo(&paths.manifest())?;
    let spec = cfg.spec()?;
    if zoo.manifest.spec != spec {
        bail!("the zoo was collected for a different classifier architecture");
    }
    let layout = build_layout(&spec, cfg.dit.model.max_token_len)?;
    let refs = zoo.checkpoint_refs(Split::Train);
    if refs.is_empty() {
        bail!("the zoo's training split has no checkpoints");
    }
    let stats = compute_stats(
        &layout,
        refs.iter()
            .map(|&(r, c)| zoo.checkpoint(r, c).params.as_slice()),
    )?;
    let mut dit = DiT::new(cfg.dit.model.clone(), &spec, stats, cfg.dit.seed)?;
    log::info!(
        "training hypernetwork: {} parameters, {} checkpoints in the training pool",
        dit.param_count(),
        refs.len()
    );
    let outcome = train_dit(&mut dit, &zoo, &cfg.trainer)?;
    let meta = TrainMeta {
        steps_run: outcome.steps_run,
        plateau_reached: outcome.plateau_reached,
        final_window_mean: outcome.window_means.last().copied().unwrap_or(0.0),
    };
    let manifest_hash = hash_file(&paths.manifest())?;
    save_model(&dit, &meta, &manifest_hash, &paths.model())?;
    write_json(&paths.curve(), &outcome)?;
    log::info!(
        "training done: {} steps, plateau: {}, final window mean {:.6}",
        meta.steps_run,
        meta.plateau_reached,
        meta.final_window_mean
    );
    Ok(vec![paths.model(), paths.curve()])
}

// ---------------------------------------------------------------------
// Stage 3: candidate sampling and selection
// ---------------------------------------------------------------------

pub fn run_sample(cfg: &ExperimentConfig, paths: &StagePaths) -> Result<Vec<PathBuf>> {
    let spec = cfg.spec()?;
    let (_, test) = cfg.dataset.load()?;
    let request = cfg.forget_request()?;
    let table = {
        let zoo = load_zoo(&paths.manifest())?;
        ClassLossTable::from_zoo(&zoo)?
    };
    let model = load_model(&paths.model())?;
    if model.dit.spec != spec {
        bail!("the model was trained for a different classifier architecture");
    }

    let mut prompt_rng = ChaCha20Rng::seed_from_u64(cfg.sampler.seed);
    prompt_rng.set_stream(PROMPT_JITTER_STREAM);
    let mut prompt = make_prompt(
        &table,
        &request,
        &cfg.sampler.prompt,
        model.dit.config.loss_clamp,
        &mut prompt_rng,
    )?;
    if model.dit.config.variant == Variant::V1 {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.sampler.seed);
        rng.set_stream(CURRENT_STATE_STREAM);
        prompt.current = Some(random_current_state(
            &spec,
            &test,
            model.dit.config.loss_clamp,
            &mut rng,
        )?);
    }
    write_json(
        &paths.prompt(),
        &PromptRecord {
            forget_classes: request.forget_classes.clone(),
            retain_classes: request.retain_classes.clone(),
            target_losses: prompt.target_losses.clone(),
            current_losses: prompt.current.as_ref().map(|c| c.losses.clone()),
        },
    )?;

    log::info!(
        "sampling {} candidates, targets {:?}",
        cfg.sampler.num_candidates,
        prompt.target_losses
    );
    let outcome = sample_candidates(
        &model.dit,
        &prompt,
        cfg.sampler.num_candidates,
        cfg.sampler.seed,
    )?;
    if outcome.candidates.is_empty() {
        bail!(
            "all {} sampled candidates were rejected as non-finite",
            cfg.sampler.num_candidates
        );
    }
    if outcome.rejected > 0 {
        log::warn!("{} of {} candidates rejected", outcome.rejected, cfg.sampler.num_candidates);
    }

    // Rebuild the candidate directory from scratch so stale files from a
    // previous, larger run cannot survive.
    if paths.candidates_dir().exists() {
        fs::remove_dir_all(paths.candidates_dir())?;
    }
    fs::create_dir_all(paths.candidates_dir())?;
    let mut outputs = vec![paths.prompt(), paths.sampling()];
    for cand in &outcome.candidates {
        let path = paths.candidate(cand.sub_seed);
        save_candidate(&path, cand)?;
        outputs.push(path);
    }
    write_json(
        &paths.sampling(),
        &SamplingRecord {
            requested: cfg.sampler.num_candidates,
            rejected: outcome.rejected,
            sub_seeds: outcome.candidates.iter().map(|c| c.sub_seed).collect(),
        },
    )?;

    let (winner, selection) = select_best(&outcome.candidates, &request, &spec, &test)?;
    write_json(
        &paths.selection_json(),
        &SelectionRecord {
            winner_sub_seed: winner.sub_seed,
            table: selection.clone(),
        },
    )?;
    fs::write(paths.selection_csv(), selection.to_csv())?;
    let row = &selection.rows[selection.winner];
    log::info!(
        "selected candidate {} (forget acc {:.4}, retain acc {:.4})",
        winner.sub_seed,
        row.forget_accuracy,
        row.retain_accuracy
    );
    outputs.push(paths.selection_json());
    outputs.push(paths.selection_csv());
    Ok(outputs)
}

// ---------------------------------------------------------------------
// Stage 4: retrained reference model
// ---------------------------------------------------------------------

pub fn run_retrain(cfg: &ExperimentConfig, paths: &StagePaths) -> Result<Vec<PathBuf>> {
    let spec = cfg.spec()?;
    let (train, _) = cfg.dataset.load()?;
    let request = cfg.forget_request()?;
    log::info!(
        "retraining reference without classes {:?} ({} epochs)",
        request.forget_classes,
        cfg.retrain.epochs
    );
    let params = retrain_baseline(&spec, &train, &request.forget_classes, &cfg.retrain)?;
    save_candidate(
        &paths.retrained(),
        &Candidate {
            sub_seed: cfg.retrain.seed,
            params,
        },
    )?;
    Ok(vec![paths.retrained()])
}

// ---------------------------------------------------------------------
// Stage 5: evaluation
// ---------------------------------------------------------------------

pub fn run_evaluate(cfg: &ExperimentConfig, paths: &StagePaths) -> Result<Vec<PathBuf>> {
    let spec = cfg.spec()?;
    let (train, test) = cfg.dataset.load()?;
    let request = cfg.forget_request()?;
    let sampling: SamplingRecord = read_json(&paths.sampling())?;
    let selection: SelectionRecord = read_json(&paths.selection_json())?;
    let baseline = load_candidate(&paths.retrained())?.params;

    let mut headline = Vec::new();
    for &sub_seed in sampling
        .sub_seeds
        .iter()
        .take(cfg.evaluate.headline_candidates)
    {
        let cand = load_candidate(&paths.candidate(sub_seed))?;
        headline.push((format!("candidate-{sub_seed:03}"), cand.params));
    }
    if headline.is_empty() {
        bail!("no candidates available to evaluate");
    }
    let winner = load_candidate(&paths.candidate(selection.winner_sub_seed))?;
    let selected = (
        format!("selected-{:03}", selection.winner_sub_seed),
        winner.params,
    );

    let inputs = EvalInputs {
        spec: &spec,
        train: &train,
        test: &test,
        forget_classes: &request.forget_classes,
    };
    let report = full_report(&inputs, &baseline, &headline, Some(&selected))?;
    fs::write(paths.report_json(), report.to_json()?)?;
    fs::write(paths.report_csv(), report.to_csv())?;
    if let Some(sel) = &report.selected {
        log::info!(
            "selected candidate: forget acc {:.4}, retain acc {:.4}, agreement {:.4}, membership score {:.4}",
            sel.forget_accuracy,
            sel.retain_accuracy,
            sel.distribution_agreement,
            sel.membership_score
        );
    }
    let mut outputs = vec![paths.report_json(), paths.report_csv()];

    if cfg.evaluate.generation_sweep {
        let table = {
            let zoo = load_zoo(&paths.manifest())?;
            ClassLossTable::from_zoo(&zoo)?
        };
        let model = load_model(&paths.model())?;
        log::info!(
            "alignment sweep: {} targets x {} nets per class",
            cfg.evaluate.sweep.n_prompts,
            cfg.evaluate.sweep.nets_per_prompt
        );
        let alignment = evaluate_generation(&model.dit, &table, &test, &cfg.evaluate.sweep)?;
        write_json(&paths.alignment_json(), &alignment)?;
        fs::write(paths.alignment_csv(), alignment.to_csv())?;
        outputs.push(paths.alignment_json());
        outputs.push(paths.alignment_csv());
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forgetting_slots_hit_the_requested_fraction_evenly() {
        for &(n, f) in &[(10usize, 0.3f64), (7, 0.5), (220, 0.3), (5, 0.0), (4, 1.0)] {
            let hits = (0..n).filter(|&i| is_forgetting_slot(i, f)).count();
            assert_eq!(hits, (n as f64 * f).floor() as usize, "n={n} f={f}");
        }
        // Evenly spread, not front-loaded: for f=0.5 every other slot.
        let pattern: Vec<bool> = (0..6).map(|i| is_forgetting_slot(i, 0.5)).collect();
        assert_eq!(pattern, vec![false, true, false, true, false, true]);
    }

    #[test]
    fn producer_map_names_the_right_stage() {
        let p = StagePaths::new(PathBuf::from("/out"));
        assert_eq!(p.producer_of(&p.manifest()), Some(STAGE_ZOO));
        assert_eq!(p.producer_of(&p.run_file(3)), Some(STAGE_ZOO));
        assert_eq!(p.producer_of(&p.model()), Some(STAGE_TRAIN));
        assert_eq!(p.producer_of(&p.curve()), Some(STAGE_TRAIN));
        assert_eq!(p.producer_of(&p.candidate(0)), Some(STAGE_SAMPLE));
        assert_eq!(p.producer_of(&p.selection_json()), Some(STAGE_SAMPLE));
        assert_eq!(p.producer_of(&p.retrained()), Some(STAGE_RETRAIN));
        assert_eq!(p.producer_of(&p.report_json()), Some(STAGE_EVALUATE));
        assert_eq!(p.producer_of(Path::new("/elsewhere/x")), None);
    }

    #[test]
    fn json_helpers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.json");
        let rec = SamplingRecord {
            requested: 24,
            rejected: 1,
            sub_seeds: vec![0, 1, 3],
        };
        write_json(&path, &rec).unwrap();
        let back: SamplingRecord = read_json(&path).unwrap();
        assert_eq!(rec, back);
    }
}
