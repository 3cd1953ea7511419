//! Membership inference attack. The attacker sees a model's predictive
//! distribution, reduces it to one feature (the entropy of that
//! distribution), and fits a logistic regression separating examples the
//! model trained on from held-out ones. The attack score on the forgotten
//! examples is the mean hard "was trained on" prediction: near the
//! retained fraction means the model still treats them as seen, near the
//! held-out fraction means it does not.

use ndarray::Array2;

use crate::error::{Error, Result};

use super::metrics::entropy;

/// L2 penalty strength on the slope. The intercept is never penalized.
pub const MIA_L2: f64 = 1.0;

/// Newton iterations stop once the gradient norm falls below this.
pub const MIA_TOL: f64 = 1e-10;

/// Hard cap on Newton iterations.
pub const MIA_MAX_ITERS: usize = 1000;

/// Fitted 1-feature logistic regression p(member | x) = σ(w·x + b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFit {
    pub weight: f64,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticFit {
    /// Hard membership call at the 0.5 probability threshold.
    pub fn predict(&self, x: f64) -> u8 {
        u8::from(self.weight * x + self.bias > 0.0)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Penalized negative log likelihood; the quantity Newton minimizes.
fn objective(features: &[f64], labels: &[u8], w: f64, b: f64) -> f64 {
    let mut nll = 0.0;
    for (&x, &y) in features.iter().zip(labels) {
        let z = w * x + b;
        // ln(1 + e^z) − y·z, written to avoid overflow for large |z|.
        nll += z.max(0.0) + (-z.abs()).exp().ln_1p() - f64::from(y) * z;
    }
    nll + 0.5 * MIA_L2 * w * w
}

fn gradient(features: &[f64], labels: &[u8], w: f64, b: f64) -> (f64, f64) {
    let mut gw = MIA_L2 * w;
    let mut gb = 0.0;
    for (&x, &y) in features.iter().zip(labels) {
        let r = sigmoid(w * x + b) - f64::from(y);
        gw += r * x;
        gb += r;
    }
    (gw, gb)
}

/// Fit by damped Newton's method. The objective is strictly convex (the
/// penalty bounds the slope even on linearly separable data), so the
/// stationary point found here is the unique optimum and the fit is fully
/// deterministic.
pub fn fit_logistic_1d(features: &[f64], labels: &[u8]) -> Result<LogisticFit> {
    if features.len() != labels.len() {
        return Err(Error::structural(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::config(
            "attack training labels contain only one class",
        ));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::structural("labels must be 0 or 1"));
    }

    let mut w = 0.0;
    let mut b = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MIA_MAX_ITERS {
        iterations = it + 1;
        let (gw, gb) = gradient(features, labels, w, b);
        if gw.hypot(gb) < MIA_TOL {
            converged = true;
            iterations = it;
            break;
        }
        // 2x2 Hessian of the penalized objective.
        let mut hww = MIA_L2;
        let mut hwb = 0.0;
        let mut hbb = 0.0;
        for &x in features {
            let p = sigmoid(w * x + b);
            let s = p * (1.0 - p);
            hww += s * x * x;
            hwb += s * x;
            hbb += s;
        }
        let det = hww * hbb - hwb * hwb;
        if det <= 0.0 || !det.is_finite() {
            return Err(Error::numeric(format!(
                "attack fit Hessian is singular (det = {det})"
            )));
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        // Backtrack if the full step overshoots; pure Newton can on the
        // flat tails of the sigmoid. The slack keeps rounding noise from
        // rejecting steps once true decreases shrink below resolution.
        let here = objective(features, labels, w, b);
        let slack = 1e-12 * (1.0 + here.abs());
        let mut scale = 1.0;
        let mut stepped = false;
        for _ in 0..60 {
            let (wn, bn) = (w - scale * dw, b - scale * db);
            if objective(features, labels, wn, bn) <= here + slack {
                w = wn;
                b = bn;
                stepped = true;
                break;
            }
            scale *= 0.5;
        }
        if !stepped {
            // No descent direction at floating-point resolution: as
            // converged as the arithmetic allows.
            converged = true;
            break;
        }
    }
    if !w.is_finite() || !b.is_finite() {
        return Err(Error::numeric("attack fit diverged"));
    }
    Ok(LogisticFit {
        weight: w,
        bias: b,
        iterations,
        converged,
    })
}

/// Entropy of each row of a matrix of predictive distributions.
pub fn row_entropies(probs: &Array2<f64>) -> Result<Vec<f64>> {
    (0..probs.nrows())
        .map(|i| {
            entropy(probs.row(i).as_slice().ok_or_else(|| {
                Error::structural("probability matrix rows must be contiguous")
            })?)
        })
        .collect()
}

/// Run the attack: fit member-vs-holdout on (`retain_probs`, label 1) and
/// (`test_probs`, label 0), then return the mean hard membership call on
/// `forget_probs`.
pub fn mia_score(
    retain_probs: &Array2<f64>,
    test_probs: &Array2<f64>,
    forget_probs: &Array2<f64>,
) -> Result<f64> {
    if retain_probs.nrows() == 0 || test_probs.nrows() == 0 {
        return Err(Error::config("attack needs both member and holdout examples"));
    }
    if forget_probs.nrows() == 0 {
        return Err(Error::config("attack needs probe examples to score"));
    }
    let mut features = row_entropies(retain_probs)?;
    let mut labels = vec![1u8; features.len()];
    features.extend(row_entropies(test_probs)?);
    labels.resize(features.len(), 0);

    let fit = fit_logistic_1d(&features, &labels)?;
    let probe = row_entropies(forget_probs)?;
    let hits: u64 = probe.iter().map(|&x| u64::from(fit.predict(x))).sum();
    Ok(hits as f64 / probe.len() as f64)
}
