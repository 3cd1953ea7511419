//! Scalar metrics: prompt alignment (R²), Pearson correlation, entropy,
//! Jensen-Shannon divergence, the unlearning score φ, prediction overlap,
//! and cross-model confusion. All logarithms are natural.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::zoo::net::{argmax_first, softmax_rows};

/// Stabilizer added to the R² denominator.
pub const R2_EPSILON: f64 = 1e-12;

/// Probabilities are floored here before any KL term.
pub const PROB_FLOOR: f64 = 1e-12;

/// R² plus a flag for the degenerate constant-target case, where the
/// denominator collapses to the stabilizer and the value is meaningless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2Outcome {
    pub value: f64,
    pub degenerate_targets: bool,
}

fn check_pair(targets: &[f64], observed: &[f64]) -> Result<()> {
    if targets.len() != observed.len() {
        return Err(Error::structural(format!(
            "length mismatch: {} targets vs {} observed",
            targets.len(),
            observed.len()
        )));
    }
    if targets.len() < 2 {
        return Err(Error::config("need at least 2 points"));
    }
    Ok(())
}

/// R² = 1 − Σ(𝓛* − 𝓛̂*)² / (Σ(𝓛* − η)² + ε), η the target mean.
pub fn prompt_alignment(targets: &[f64], observed: &[f64]) -> Result<R2Outcome> {
    check_pair(targets, observed)?;
    let n = targets.len() as f64;
    let eta = targets.iter().sum::<f64>() / n;
    let ss_res: f64 = targets
        .iter()
        .zip(observed)
        .map(|(&t, &o)| (t - o) * (t - o))
        .sum();
    let ss_tot: f64 = targets.iter().map(|&t| (t - eta) * (t - eta)).sum();
    Ok(R2Outcome {
        value: 1.0 - ss_res / (ss_tot + R2_EPSILON),
        // With the stabilizer dwarfing the true spread, R² is dominated
        // by ε and should not be trusted.
        degenerate_targets: ss_tot < 1e-9,
    })
}

/// Product-moment correlation; `None` when either input is constant
/// (the value is undefined, not zero).
pub fn pearson(targets: &[f64], observed: &[f64]) -> Result<Option<f64>> {
    check_pair(targets, observed)?;
    let n = targets.len() as f64;
    let mut st = 0.0;
    let mut so = 0.0;
    let mut stt = 0.0;
    let mut soo = 0.0;
    let mut sto = 0.0;
    for (&t, &o) in targets.iter().zip(observed) {
        st += t;
        so += o;
        stt += t * t;
        soo += o * o;
        sto += t * o;
    }
    let var_t = stt - st * st / n;
    let var_o = soo - so * so / n;
    if var_t <= 0.0 || var_o <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sto - st * so / n) / (var_t * var_o).sqrt()))
}

/// −Σ p ln p in nats with 0·ln 0 := 0. Inputs must be nonnegative and sum
/// to 1 within 1e-6; they are renormalized before the sum.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::config("entropy of an empty distribution"));
    }
    if let Some(&bad) = probs.iter().find(|&&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::numeric(format!(
            "probability {bad} is negative or non-finite"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::numeric(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(probs
        .iter()
        .map(|&p| {
            let p = p / sum;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum())
}

fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(PROB_FLOOR);
            let qi = qi.max(PROB_FLOOR);
            pi * (pi / qi).ln()
        })
        .sum()
}

/// JSD(P‖Q) = ½KL(P‖M) + ½KL(Q‖M) with M = (P+Q)/2; symmetric, in
/// [0, ln 2].
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::structural("JSD needs equal-length nonempty inputs"));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_floored(p, &m) + 0.5 * kl_floored(q, &m))
}

fn check_logit_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::structural(format!(
            "logit shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::config("metric over an empty example set"));
    }
    Ok(())
}

/// φ = 1 − mean JSD between the two models' softmax outputs.
pub fn unlearning_score(logits_a: &Array2<f64>, logits_b: &Array2<f64>) -> Result<f64> {
    check_logit_pair(logits_a, logits_b)?;
    let pa = softmax_rows(logits_a);
    let pb = softmax_rows(logits_b);
    let mut total = 0.0;
    for i in 0..pa.nrows() {
        total += jsd(
            pa.row(i).as_slice().unwrap(),
            pb.row(i).as_slice().unwrap(),
        )?;
    }
    Ok(1.0 - total / pa.nrows() as f64)
}

/// Fraction of examples where both argmax predictions agree (ties broken
/// toward the lowest class index in both models).
pub fn predictions_overlap(logits_a: &Array2<f64>, logits_b: &Array2<f64>) -> Result<f64> {
    check_logit_pair(logits_a, logits_b)?;
    let n = logits_a.nrows();
    let agree = (0..n)
        .filter(|&i| argmax_first(logits_a.row(i)) == argmax_first(logits_b.row(i)))
        .count();
    Ok(agree as f64 / n as f64)
}

/// Entry (i, j) counts examples the baseline labels `i` and the candidate
/// labels `j`.
pub fn cross_confusion(
    baseline_logits: &Array2<f64>,
    candidate_logits: &Array2<f64>,
) -> Result<Vec<Vec<u64>>> {
    check_logit_pair(baseline_logits, candidate_logits)?;
    let m = baseline_logits.ncols();
    let mut matrix = vec![vec![0u64; m]; m];
    for i in 0..baseline_logits.nrows() {
        let bi = argmax_first(baseline_logits.row(i));
        let ci = argmax_first(candidate_logits.row(i));
        matrix[bi][ci] += 1;
    }
    Ok(matrix)
}
