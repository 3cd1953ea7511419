//! Full evaluation reports. One report compares a set of sampled
//! candidate classifiers (and optionally the selected one) against a
//! retrained-from-scratch reference on the same forget request, bundling
//! accuracies, the membership attack, distributional agreement, and
//! prediction overlap into one serializable object.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::zoo::net::{
    argmax_first, eval_class_losses, forward_logits, softmax_rows, MainNetSpec,
};

use super::metrics::{cross_confusion, predictions_overlap, unlearning_score};
use super::mia::mia_score;

/// Everything needed to evaluate models on one forget request.
pub struct EvalInputs<'a> {
    pub spec: &'a MainNetSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub forget_classes: &'a [usize],
}

/// Scores for the reference model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub retain_accuracy: f64,
    pub forget_accuracy: f64,
    pub class_accuracies: Vec<f64>,
    pub class_losses: Vec<f64>,
    pub membership_score: f64,
}

/// Scores for one candidate, all relative to the same reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub label: String,
    pub retain_accuracy: f64,
    pub forget_accuracy: f64,
    pub class_accuracies: Vec<f64>,
    pub class_losses: Vec<f64>,
    pub membership_score: f64,
    /// 1 − mean JSD between the two models' softmax outputs on the full
    /// test set; 1.0 means identical predictive distributions.
    pub distribution_agreement: f64,
    pub overlap_retain: f64,
    pub overlap_forget: f64,
    pub overlap_full: f64,
    /// Rows index the reference model's predicted class, columns the
    /// candidate's, over the full test set.
    pub confusion: Vec<Vec<u64>>,
}

/// Mean scores over the headline candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedEval {
    pub count: usize,
    pub retain_accuracy: f64,
    pub forget_accuracy: f64,
    pub membership_score: f64,
    pub distribution_agreement: f64,
    pub overlap_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget_classes: Vec<usize>,
    pub test_examples: usize,
    pub baseline: ModelSummary,
    pub per_candidate: Vec<CandidateEval>,
    pub averaged: Option<AveragedEval>,
    pub selected: Option<CandidateEval>,
}

/// Per-model quantities computed once and reused across comparisons.
struct ModelBundle {
    test_logits: Array2<f64>,
    class_losses: Vec<f64>,
    class_accuracies: Vec<f64>,
    retain_accuracy: f64,
    forget_accuracy: f64,
    membership_score: f64,
}

struct EvalContext<'a> {
    inputs: &'a EvalInputs<'a>,
    retain_train: Dataset,
    forget_train: Dataset,
    retain_test_rows: Vec<usize>,
    forget_test_rows: Vec<usize>,
}

fn check_inputs(inputs: &EvalInputs) -> Result<()> {
    let m = inputs.spec.num_classes;
    if inputs.forget_classes.is_empty() {
        return Err(Error::config("no classes to forget"));
    }
    if let Some(&bad) = inputs.forget_classes.iter().find(|&&c| c >= m) {
        return Err(Error::config(format!(
            "forget class {bad} out of range for {m} classes"
        )));
    }
    if inputs.forget_classes.len() >= m {
        return Err(Error::config("at least one class must be retained"));
    }
    if inputs.train.num_classes != m || inputs.test.num_classes != m {
        return Err(Error::structural("datasets disagree with the model head"));
    }
    Ok(())
}

impl<'a> EvalContext<'a> {
    fn new(inputs: &'a EvalInputs<'a>) -> Result<Self> {
        check_inputs(inputs)?;
        let m = inputs.spec.num_classes;
        let is_forget = |c: usize| inputs.forget_classes.contains(&c);
        let retain_train = inputs.train.filter_by(|l| !is_forget(l as usize), m);
        let forget_train = inputs.train.filter_by(|l| is_forget(l as usize), m);
        if retain_train.is_empty() || forget_train.is_empty() {
            return Err(Error::config(
                "training set must contain retained and forgotten examples",
            ));
        }
        let mut retain_test_rows = Vec::new();
        let mut forget_test_rows = Vec::new();
        for (i, &l) in inputs.test.labels.iter().enumerate() {
            if is_forget(l as usize) {
                forget_test_rows.push(i);
            } else {
                retain_test_rows.push(i);
            }
        }
        if retain_test_rows.is_empty() || forget_test_rows.is_empty() {
            return Err(Error::config(
                "test set must contain retained and forgotten examples",
            ));
        }
        Ok(Self {
            inputs,
            retain_train,
            forget_train,
            retain_test_rows,
            forget_test_rows,
        })
    }

    fn bundle(&self, params: &[f64]) -> Result<ModelBundle> {
        let spec = self.inputs.spec;
        let test = self.inputs.test;
        let test_logits = forward_logits(params, spec, test.features.view())?;
        let (class_losses, class_accuracies) = eval_class_losses(params, spec, test)?;
        let retain_accuracy = pooled_accuracy(&test_logits, test, &self.retain_test_rows);
        let forget_accuracy = pooled_accuracy(&test_logits, test, &self.forget_test_rows);

        let member_probs = softmax_rows(&forward_logits(
            params,
            spec,
            self.retain_train.features.view(),
        )?);
        let probe_probs = softmax_rows(&forward_logits(
            params,
            spec,
            self.forget_train.features.view(),
        )?);
        let holdout_probs = softmax_rows(&test_logits);
        let membership_score = mia_score(&member_probs, &holdout_probs, &probe_probs)?;

        Ok(ModelBundle {
            test_logits,
            class_losses,
            class_accuracies,
            retain_accuracy,
            forget_accuracy,
            membership_score,
        })
    }
}

/// Fraction of the listed test rows the model labels correctly.
fn pooled_accuracy(logits: &Array2<f64>, test: &Dataset, rows: &[usize]) -> f64 {
    let correct = rows
        .iter()
        .filter(|&&i| argmax_first(logits.row(i)) == test.labels[i] as usize)
        .count();
    correct as f64 / rows.len() as f64
}

fn subset_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), a.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

fn compare(
    ctx: &EvalContext,
    baseline: &ModelBundle,
    candidate: &ModelBundle,
    label: String,
) -> Result<CandidateEval> {
    let base_retain = subset_rows(&baseline.test_logits, &ctx.retain_test_rows);
    let cand_retain = subset_rows(&candidate.test_logits, &ctx.retain_test_rows);
    let base_forget = subset_rows(&baseline.test_logits, &ctx.forget_test_rows);
    let cand_forget = subset_rows(&candidate.test_logits, &ctx.forget_test_rows);
    Ok(CandidateEval {
        label,
        retain_accuracy: candidate.retain_accuracy,
        forget_accuracy: candidate.forget_accuracy,
        class_accuracies: candidate.class_accuracies.clone(),
        class_losses: candidate.class_losses.clone(),
        membership_score: candidate.membership_score,
        distribution_agreement: unlearning_score(&baseline.test_logits, &candidate.test_logits)?,
        overlap_retain: predictions_overlap(&base_retain, &cand_retain)?,
        overlap_forget: predictions_overlap(&base_forget, &cand_forget)?,
        overlap_full: predictions_overlap(&baseline.test_logits, &candidate.test_logits)?,
        confusion: cross_confusion(&baseline.test_logits, &candidate.test_logits)?,
    })
}

fn average(evals: &[CandidateEval]) -> Option<AveragedEval> {
    if evals.is_empty() {
        return None;
    }
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&CandidateEval) -> f64| evals.iter().map(|e| f(e)).sum::<f64>() / n;
    Some(AveragedEval {
        count: evals.len(),
        retain_accuracy: mean(&|e| e.retain_accuracy),
        forget_accuracy: mean(&|e| e.forget_accuracy),
        membership_score: mean(&|e| e.membership_score),
        distribution_agreement: mean(&|e| e.distribution_agreement),
        overlap_full: mean(&|e| e.overlap_full),
    })
}

/// Evaluate one candidate against a reference model.
pub fn evaluate_candidate(
    inputs: &EvalInputs,
    baseline_params: &[f64],
    candidate_params: &[f64],
    label: &str,
) -> Result<CandidateEval> {
    let ctx = EvalContext::new(inputs)?;
    let base = ctx.bundle(baseline_params)?;
    let cand = ctx.bundle(candidate_params)?;
    compare(&ctx, &base, &cand, label.to_string())
}

/// Evaluate the headline candidate set (whose scores are averaged) plus an
/// optional separately-reported selected candidate against one reference.
pub fn full_report(
    inputs: &EvalInputs,
    baseline_params: &[f64],
    candidates: &[(String, Vec<f64>)],
    selected: Option<&(String, Vec<f64>)>,
) -> Result<EvalReport> {
    let ctx = EvalContext::new(inputs)?;
    let base = ctx.bundle(baseline_params)?;
    let mut per_candidate = Vec::with_capacity(candidates.len());
    for (label, params) in candidates {
        let cand = ctx.bundle(params)?;
        per_candidate.push(compare(&ctx, &base, &cand, label.clone())?);
    }
    let selected = match selected {
        Some((label, params)) => {
            let cand = ctx.bundle(params)?;
            Some(compare(&ctx, &base, &cand, label.clone())?)
        }
        None => None,
    };
    let report = EvalReport {
        forget_classes: inputs.forget_classes.to_vec(),
        test_examples: inputs.test.len(),
        baseline: ModelSummary {
            retain_accuracy: base.retain_accuracy,
            forget_accuracy: base.forget_accuracy,
            class_accuracies: base.class_accuracies,
            class_losses: base.class_losses,
            membership_score: base.membership_score,
        },
        averaged: average(&per_candidate),
        per_candidate,
        selected,
    };
    report.validate()?;
    Ok(report)
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::numeric(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

impl EvalReport {
    /// Range and bookkeeping checks; every score this report can hold has
    /// a known valid interval.
    pub fn validate(&self) -> Result<()> {
        let phi_floor = 1.0 - 2.0_f64.ln() - 1e-12;
        let check_candidate = |e: &CandidateEval| -> Result<()> {
            in_unit("retain_accuracy", e.retain_accuracy)?;
            in_unit("forget_accuracy", e.forget_accuracy)?;
            in_unit("membership_score", e.membership_score)?;
            in_unit("overlap_retain", e.overlap_retain)?;
            in_unit("overlap_forget", e.overlap_forget)?;
            in_unit("overlap_full", e.overlap_full)?;
            for &a in &e.class_accuracies {
                in_unit("class accuracy", a)?;
            }
            if e.distribution_agreement < phi_floor || e.distribution_agreement > 1.0 + 1e-12 {
                return Err(Error::numeric(format!(
                    "distribution_agreement = {} outside its range",
                    e.distribution_agreement
                )));
            }
            let total: u64 = e.confusion.iter().flatten().sum();
            if total != self.test_examples as u64 {
                return Err(Error::structural(format!(
                    "confusion counts {total} examples, test set has {}",
                    self.test_examples
                )));
            }
            Ok(())
        };
        in_unit("baseline retain_accuracy", self.baseline.retain_accuracy)?;
        in_unit("baseline forget_accuracy", self.baseline.forget_accuracy)?;
        in_unit("baseline membership_score", self.baseline.membership_score)?;
        for e in &self.per_candidate {
            check_candidate(e)?;
        }
        if let Some(e) = &self.selected {
            check_candidate(e)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per model with the headline columns; the reference row
    /// leaves the comparison columns empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,retain_accuracy,forget_accuracy,membership_score,distribution_agreement,overlap_full\n",
        );
        out.push_str(&format!(
            "baseline,{},{},{},,\n",
            self.baseline.retain_accuracy,
            self.baseline.forget_accuracy,
            self.baseline.membership_score
        ));
        let mut row = |e: &CandidateEval| {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.label,
                e.retain_accuracy,
                e.forget_accuracy,
                e.membership_score,
                e.distribution_agreement,
                e.overlap_full
            ));
        };
        for e in &self.per_candidate {
            row(e);
        }
        if let Some(e) = &self.selected {
            row(e);
        }
        if let Some(a) = &self.averaged {
            out.push_str(&format!(
                "averaged({}),{},{},{},{},{}\n",
                a.count,
                a.retain_accuracy,
                a.forget_accuracy,
                a.membership_score,
                a.distribution_agreement,
                a.overlap_full
            ));
        }
        out
    }
}
