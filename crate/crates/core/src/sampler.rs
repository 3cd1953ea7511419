//! Turning a trained hypernetwork into unlearned classifiers.
//!
//! The flow is: describe which classes to forget ([`ForgetRequest`]),
//! translate that into per-class target losses grounded in what the zoo
//! actually achieved ([`make_prompt`]), run the reverse diffusion loop a
//! number of times to draw candidate parameter vectors
//! ([`sample_candidates`]), and pick the candidate with the lowest
//! forget-class accuracy, breaking ties toward retain-class accuracy
//! ([`select_best`]). [`evaluate_generation`] measures, independently of
//! any forget request, how well sampled networks' achieved losses track
//! the prompted targets across each class's observed loss range.

use std::cmp::Ordering;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{detokenize, tokenize, unflatten};
use crate::data::Dataset;
use crate::diffusion::{CondBatch, DiT, Variant};
use crate::error::{Error, Result};
use crate::evalkit::{pearson, prompt_alignment};
use crate::zoo::net::{eval_class_losses, forward_logits, mean_accuracy_over, MainNetSpec};
use crate::zoo::stats::ClassLossTable;

/// Which classes an unlearning run should forget and which it must keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetRequest {
    pub forget_classes: Vec<usize>,
    pub retain_classes: Vec<usize>,
    pub num_classes: usize,
}

impl ForgetRequest {
    /// Builds a request from the forget set; retain is the complement.
    /// Pivot classes (never deleted during zoo collection, so the
    /// hypernetwork has no training signal for forgetting them) cannot be
    /// forgotten.
    pub fn new(forget: &[usize], num_classes: usize, pivot_classes: &[usize]) -> Result<Self> {
        let mut forget_classes: Vec<usize> = forget.to_vec();
        forget_classes.sort_unstable();
        forget_classes.dedup();
        if let Some(&bad) = forget_classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::config(format!(
                "forget class {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(&p) = pivot_classes.iter().find(|p| forget_classes.contains(p)) {
            return Err(Error::config(format!(
                "class {p} is a pivot class and cannot be forgotten"
            )));
        }
        let retain_classes: Vec<usize> = (0..num_classes)
            .filter(|c| !forget_classes.contains(c))
            .collect();
        if retain_classes.is_empty() {
            return Err(Error::config("at least one class must be retained"));
        }
        Ok(Self {
            forget_classes,
            retain_classes,
            num_classes,
        })
    }

    pub fn is_forgotten(&self, class: usize) -> bool {
        self.forget_classes.contains(&class)
    }
}

/// The "current" side of a variant-1 prompt: a concrete parameter vector
/// and its evaluated per-class losses.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentState {
    pub params: Vec<f64>,
    pub losses: Vec<f64>,
}

impl CurrentState {
    /// Evaluates an existing parameter vector (e.g. a trained checkpoint
    /// whose classes should be forgotten in place).
    pub fn from_params(
        params: Vec<f64>,
        spec: &MainNetSpec,
        eval_set: &Dataset,
        loss_cap: f64,
    ) -> Result<Self> {
        let (losses, _) = eval_class_losses(&params, spec, eval_set)?;
        let losses = losses.into_iter().map(|l| l.clamp(0.0, loss_cap)).collect();
        Ok(Self { params, losses })
    }
}

/// Draws standard-normal parameters and evaluates them; the default
/// "current" for variant-1 prompting.
pub fn random_current_state(
    spec: &MainNetSpec,
    eval_set: &Dataset,
    loss_cap: f64,
    rng: &mut impl Rng,
) -> Result<CurrentState> {
    let params: Vec<f64> = (0..spec.param_count())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    CurrentState::from_params(params, spec, eval_set, loss_cap)
}

/// Per-class loss targets the hypernetwork is asked to realize, plus the
/// current state when the model conditions on one.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPrompt {
    pub target_losses: Vec<f64>,
    pub current: Option<CurrentState>,
}

/// How prompt targets are derived from zoo statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Relative jitter applied to retain-class targets; 0.1 means each
    /// target is scaled by a uniform factor in [0.9, 1.1].
    pub jitter: f64,
    /// Forget-class targets sit at this quantile of the class's observed
    /// zoo losses rather than the absolute maximum, which the network
    /// tracks less reliably.
    pub forget_quantile: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            jitter: 0.10,
            forget_quantile: 0.95,
        }
    }
}

/// Builds the loss prompt for a forget request: retain classes ask for
/// the best (lowest) loss the zoo ever achieved, jittered; forget classes
/// ask for a high-loss quantile, capped at the conditioning clamp.
pub fn make_prompt(
    table: &ClassLossTable,
    request: &ForgetRequest,
    cfg: &PromptConfig,
    loss_cap: f64,
    rng: &mut impl Rng,
) -> Result<LossPrompt> {
    if table.sorted.len() != request.num_classes {
        return Err(Error::structural(format!(
            "loss table covers {} classes, request has {}",
            table.sorted.len(),
            request.num_classes
        )));
    }
    if !(0.0..1.0).contains(&cfg.jitter) || !(0.0..=1.0).contains(&cfg.forget_quantile) {
        return Err(Error::config("prompt jitter/quantile out of range"));
    }
    let mut target_losses = Vec::with_capacity(request.num_classes);
    for c in 0..request.num_classes {
        let t = if request.is_forgotten(c) {
            table.quantile(c, cfg.forget_quantile).min(loss_cap)
        } else {
            let factor = 1.0 + cfg.jitter * rng.gen_range(-1.0..=1.0);
            (table.min(c) * factor).clamp(0.0, loss_cap)
        };
        target_losses.push(t);
    }
    // Every retain target must sit strictly below every forget target,
    // otherwise the prompt does not express the request at all.
    if !request.forget_classes.is_empty() {
        let max_retain = request
            .retain_classes
            .iter()
            .map(|&c| target_losses[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let min_forget = request
            .forget_classes
            .iter()
            .map(|&c| target_losses[c])
            .fold(f64::INFINITY, f64::min);
        if max_retain >= min_forget {
            return Err(Error::numeric(format!(
                "degenerate prompt: best retain target {max_retain} is not \
                 below lowest forget target {min_forget}; the zoo's loss \
                 spread is too narrow for this request"
            )));
        }
    }
    Ok(LossPrompt {
        target_losses,
        current: None,
    })
}

/// One sampled parameter vector and the RNG stream that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sub_seed: u64,
    pub params: Vec<f64>,
}

/// Result of a sampling run; candidates whose reverse loop produced any
/// non-finite value are dropped and counted instead of returned.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub candidates: Vec<Candidate>,
    pub rejected: usize,
}

fn check_prompt_shape(dit: &DiT, prompt: &LossPrompt) -> Result<()> {
    if prompt.target_losses.len() != dit.config.num_classes {
        return Err(Error::structural(format!(
            "prompt has {} targets, model expects {}",
            prompt.target_losses.len(),
            dit.config.num_classes
        )));
    }
    match (dit.config.variant, prompt.current.is_some()) {
        (Variant::V1, false) => Err(Error::config(
            "this model conditions on a current state but the prompt has none",
        )),
        (Variant::V2, true) => Err(Error::config(
            "this model takes targets only but the prompt carries a current state",
        )),
        _ => Ok(()),
    }
}

/// Runs one reverse diffusion pass with the EMA weights and decodes the
/// result. `Ok(None)` means the draw produced non-finite values and
/// should be counted as rejected.
fn sample_one(dit: &DiT, prompt: &LossPrompt, rng: &mut ChaCha20Rng) -> Result<Option<Vec<f64>>> {
    check_prompt_shape(dit, prompt)?;
    let m = dit.config.num_classes;
    let e = dit.entry_count();
    let targets = Array2::from_shape_vec((1, m), prompt.target_losses.clone())
        .expect("length checked against the class count");
    let (context, current_losses) = match &prompt.current {
        Some(cur) => {
            let flat = tokenize(&cur.params, &dit.layout, &dit.stats)?.flatten();
            let ctx = Array2::from_shape_vec((1, e), flat)
                .expect("flatten yields exactly entry_count values");
            let losses = Array2::from_shape_vec((1, m), cur.losses.clone()).map_err(|_| {
                Error::structural("current losses do not match the class count")
            })?;
            (Some(ctx), Some(losses))
        }
        None => (None, None),
    };

    let entries = dit.schedule.p_sample_loop(
        e,
        |x, t| {
            let xt = Array2::from_shape_vec((1, e), x.to_vec())
                .expect("reverse loop keeps the entry count");
            let cond = CondBatch {
                t: vec![t],
                target_losses: targets.clone(),
                current_losses: current_losses.clone(),
            };
            let (pred, _) = dit.forward(&dit.ema, &xt, context.as_ref(), &cond)?;
            Ok(pred.row(0).to_vec())
        },
        rng,
    )?;
    if entries.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let params = detokenize(&unflatten(&entries, &dit.layout)?, &dit.layout, &dit.stats)?;
    if params.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    // Loadability probe: the vector must drive the classifier without
    // blowing up on a plain input.
    let probe = Array2::zeros((1, dit.spec.input_dim));
    let logits = forward_logits(&params, &dit.spec, probe.view())?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    Ok(Some(params))
}

/// Draws `n` candidates with sub-seeds `0..n` (RNG streams of `seed`), so
/// any single candidate can be re-derived independently of the others.
pub fn sample_candidates(
    dit: &DiT,
    prompt: &LossPrompt,
    n: usize,
    seed: u64,
) -> Result<SampleOutcome> {
    if n == 0 {
        return Err(Error::config("asked for zero candidates"));
    }
    check_prompt_shape(dit, prompt)?;
    let mut candidates = Vec::with_capacity(n);
    let mut rejected = 0;
    for i in 0..n as u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(i);
        match sample_one(dit, prompt, &mut rng)? {
            Some(params) => candidates.push(Candidate {
                sub_seed: i,
                params,
            }),
            None => rejected += 1,
        }
    }
    Ok(SampleOutcome {
        candidates,
        rejected,
    })
}

/// One row of the selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub sub_seed: u64,
    pub forget_accuracy: f64,
    pub retain_accuracy: f64,
    pub class_accuracies: Vec<f64>,
    pub class_losses: Vec<f64>,
}

/// Scores for every candidate plus the winner's row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub rows: Vec<CandidateScore>,
    pub winner: usize,
}

impl SelectionTable {
    /// One row per candidate, winner flagged in the last column.
    pub fn to_csv(&self) -> String {
        let m = self
            .rows
            .first()
            .map_or(0, |r| r.class_accuracies.len());
        let mut out = String::from("index,sub_seed,forget_accuracy,retain_accuracy");
        for c in 0..m {
            out.push_str(&format!(",acc_class_{c}"));
        }
        out.push_str(",selected\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                r.index, r.sub_seed, r.forget_accuracy, r.retain_accuracy
            ));
            for &a in &r.class_accuracies {
                out.push_str(&format!(",{a}"));
            }
            out.push_str(&format!(",{}\n", u8::from(r.index == self.winner)));
        }
        out
    }
}

/// Strictly-better comparison for the selection order: lower forget
/// accuracy first, then higher retain accuracy; earlier index wins ties.
fn pick_winner(rows: &[CandidateScore]) -> usize {
    let mut best = 0;
    for i in 1..rows.len() {
        let ord = rows[i]
            .forget_accuracy
            .total_cmp(&rows[best].forget_accuracy)
            .then(rows[best].retain_accuracy.total_cmp(&rows[i].retain_accuracy));
        if ord == Ordering::Less {
            best = i;
        }
    }
    best
}

/// Evaluates every candidate on `eval_set` and returns the winner with
/// the full table. Deterministic: same inputs, same winner.
pub fn select_best<'a>(
    candidates: &'a [Candidate],
    request: &ForgetRequest,
    spec: &MainNetSpec,
    eval_set: &Dataset,
) -> Result<(&'a Candidate, SelectionTable)> {
    if candidates.is_empty() {
        return Err(Error::config("no candidates to select from"));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for (index, cand) in candidates.iter().enumerate() {
        let (class_losses, class_accuracies) = eval_class_losses(&cand.params, spec, eval_set)?;
        rows.push(CandidateScore {
            index,
            sub_seed: cand.sub_seed,
            forget_accuracy: mean_accuracy_over(&class_accuracies, &request.forget_classes),
            retain_accuracy: mean_accuracy_over(&class_accuracies, &request.retain_classes),
            class_accuracies,
            class_losses,
        });
    }
    let winner = pick_winner(&rows);
    Ok((&candidates[winner], SelectionTable { rows, winner }))
}

// ---------------------------------------------------------------------
// Candidate files
// ---------------------------------------------------------------------

const CANDIDATE_MAGIC: &[u8; 4] = b"DHP1";
const CANDIDATE_VERSION: u32 = 1;

/// Writes a candidate as a small self-describing binary file.
pub fn save_candidate(path: &Path, candidate: &Candidate) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(CANDIDATE_MAGIC)?;
    f.write_all(&CANDIDATE_VERSION.to_le_bytes())?;
    f.write_all(&candidate.sub_seed.to_le_bytes())?;
    f.write_all(&(candidate.params.len() as u64).to_le_bytes())?;
    for &v in &candidate.params {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a candidate file, rejecting anything malformed or truncated.
pub fn load_candidate(path: &Path) -> Result<Candidate> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 24];
    f.read_exact(&mut head)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    if &head[0..4] != CANDIDATE_MAGIC {
        return Err(Error::format(format!(
            "{}: not a candidate file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CANDIDATE_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported candidate version {version}",
            path.display()
        )));
    }
    let sub_seed = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let count = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    f.read_to_end(&mut body)?;
    if body.len() != count * 8 {
        return Err(Error::format(format!(
            "{}: expected {count} parameters, found {} bytes",
            path.display(),
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Candidate { sub_seed, params })
}

// ---------------------------------------------------------------------
// Generation-quality sweep
// ---------------------------------------------------------------------

/// Settings for [`evaluate_generation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationEvalConfig {
    /// Evenly spaced targets per class across its observed loss range.
    pub n_prompts: usize,
    /// Networks sampled per prompt; each net index keeps its own noise
    /// trajectory across the sweep so it traces a coherent curve.
    pub nets_per_prompt: usize,
    pub seed: u64,
}

impl Default for GenerationEvalConfig {
    fn default() -> Self {
        Self {
            n_prompts: 20,
            nets_per_prompt: 5,
            seed: 0,
        }
    }
}

/// Alignment results for one swept class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAlignment {
    pub class_index: usize,
    /// The swept target values for this class.
    pub targets: Vec<f64>,
    /// `(target, observed)` pairs per net index, in sweep order; rejected
    /// draws leave gaps.
    pub per_net_pairs: Vec<Vec<(f64, f64)>>,
    pub r2: f64,
    pub r2_degenerate: bool,
    /// Pooled over all nets; `None` when either side is constant.
    pub pearson: Option<f64>,
    /// Each net's own correlation across the sweep.
    pub per_net_pearson: Vec<Option<f64>>,
    pub rejected: usize,
}

impl ClassAlignment {
    pub fn pooled_pairs(&self) -> Vec<(f64, f64)> {
        self.per_net_pairs.iter().flatten().copied().collect()
    }
}

/// Per-class alignment of achieved losses with prompted targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub per_class: Vec<ClassAlignment>,
    pub n_prompts: usize,
    pub nets_per_prompt: usize,
}

impl AlignmentReport {
    /// Median over the per-net correlations of one class, ignoring nets
    /// where the correlation is undefined.
    pub fn median_net_pearson(&self, class_index: usize) -> Option<f64> {
        let mut vals: Vec<f64> = self.per_class[class_index]
            .per_net_pearson
            .iter()
            .flatten()
            .copied()
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        })
    }

    /// Long-form rows for plotting: class, net, target, observed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,net,target,observed\n");
        for ca in &self.per_class {
            for (k, pairs) in ca.per_net_pairs.iter().enumerate() {
                for (t, o) in pairs {
                    out.push_str(&format!("{},{k},{t},{o}\n", ca.class_index));
                }
            }
        }
        out
    }
}

/// The sweep skeleton, with the expensive part (produce observed
/// per-class losses for one prompt and net index) injected, so exact
/// oracles can stand in for the diffusion model.
pub fn sweep_alignment(
    table: &ClassLossTable,
    num_classes: usize,
    loss_cap: f64,
    cfg: &GenerationEvalConfig,
    mut observe: impl FnMut(&[f64], usize, usize, usize) -> Result<Option<Vec<f64>>>,
) -> Result<AlignmentReport> {
    if table.sorted.len() != num_classes {
        return Err(Error::structural(format!(
            "loss table covers {} classes, expected {num_classes}",
            table.sorted.len()
        )));
    }
    if cfg.n_prompts < 2 || cfg.nets_per_prompt == 0 {
        return Err(Error::config(
            "need at least 2 prompts and 1 net per prompt",
        ));
    }
    let medians: Vec<f64> = (0..num_classes)
        .map(|c| table.median(c).min(loss_cap))
        .collect();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let lo = table.min(c).min(loss_cap);
        let hi = table.max(c).min(loss_cap);
        let n = cfg.n_prompts;
        let targets: Vec<f64> = (0..n)
            .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
            .collect();
        let mut per_net_pairs = vec![Vec::with_capacity(n); cfg.nets_per_prompt];
        let mut rejected = 0;
        for (j, &target) in targets.iter().enumerate() {
            let mut prompt_vec = medians.clone();
            prompt_vec[c] = target;
            for (k, net_pairs) in per_net_pairs.iter_mut().enumerate() {
                match observe(&prompt_vec, c, j, k)? {
                    Some(losses) => {
                        if losses.len() != num_classes {
                            return Err(Error::structural(
                                "observed losses do not match the class count",
                            ));
                        }
                        net_pairs.push((target, losses[c]));
                    }
                    None => rejected += 1,
                }
            }
        }
        let pooled: Vec<(f64, f64)> = per_net_pairs.iter().flatten().copied().collect();
        if pooled.len() < 2 {
            return Err(Error::numeric(format!(
                "class {c}: fewer than 2 usable draws across the whole sweep"
            )));
        }
        let (ts, os): (Vec<f64>, Vec<f64>) = pooled.into_iter().unzip();
        let r2 = prompt_alignment(&ts, &os)?;
        let pooled_r = pearson(&ts, &os)?;
        let per_net_pearson = per_net_pairs
            .iter()
            .map(|pairs| {
                if pairs.len() < 2 {
                    return Ok(None);
                }
                let (t, o): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                pearson(&t, &o)
            })
            .collect::<Result<Vec<_>>>()?;
        per_class.push(ClassAlignment {
            class_index: c,
            targets,
            per_net_pairs,
            r2: r2.value,
            r2_degenerate: r2.degenerate_targets,
            pearson: pooled_r,
            per_net_pearson,
            rejected,
        });
    }
    Ok(AlignmentReport {
        per_class,
        n_prompts: cfg.n_prompts,
        nets_per_prompt: cfg.nets_per_prompt,
    })
}

/// Sweeps every class's observed loss range with the real model: for each
/// of the evenly spaced targets (other classes pinned at their medians)
/// it samples networks, evaluates their actual per-class losses on
/// `eval_set`, and reports how well achieved tracks prompted.
pub fn evaluate_generation(
    dit: &DiT,
    table: &ClassLossTable,
    eval_set: &Dataset,
    cfg: &GenerationEvalConfig,
) -> Result<AlignmentReport> {
    let m = dit.config.num_classes;
    let cap = dit.config.loss_clamp;
    // Variant 1 conditions on a current state; use one random-init state
    // per net index, held fixed across the sweep like the noise.
    let currents: Option<Vec<CurrentState>> = match dit.config.variant {
        Variant::V1 => {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            Some(
                (0..cfg.nets_per_prompt)
                    .map(|_| random_current_state(&dit.spec, eval_set, cap, &mut rng))
                    .collect::<Result<_>>()?,
            )
        }
        Variant::V2 => None,
    };
    sweep_alignment(table, m, cap, cfg, |targets, c, _j, k| {
        let prompt = LossPrompt {
            target_losses: targets.to_vec(),
            current: currents.as_ref().map(|cs| cs[k].clone()),
        };
        // Same stream per (class, net) for every prompt: the net keeps
        // its noise trajectory and only the conditioning moves.
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream((c * cfg.nets_per_prompt + k) as u64);
        match sample_one(dit, &prompt, &mut rng)? {
            None => Ok(None),
            Some(params) => {
                let (losses, _) = eval_class_losses(&params, &dit.spec, eval_set)?;
                if losses.iter().any(|l| !l.is_finite()) {
                    return Ok(None);
                }
                Ok(Some(losses))
            }
        }
    })
}
