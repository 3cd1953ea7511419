//! The main network: a small ReLU MLP classifier stored as one flat f64
//! parameter vector (per-layer weights row-major `[out, in]`, then biases).
//!
//! Everything here is deterministic given its inputs: forward pass, per-class
//! cross-entropy evaluation, softmax cross-entropy gradients for SGD, and the
//! hidden-unit permutation that maps a parameter vector to a functionally
//! identical one.

use crate::data::Dataset;
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Architecture of the classifier whose weights the diffusion model generates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainNetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

/// Flat-vector location of one dense layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim, in_dim]` weights.
    pub w: Range<usize>,
    pub b: Range<usize>,
}

impl MainNetSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = MainNetSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::structural("hidden_dims must be non-empty"));
        }
        if self.num_classes < 2 {
            return Err(Error::structural("need at least 2 classes"));
        }
        if self.input_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::structural("all layer dims must be positive"));
        }
        Ok(())
    }

    /// `[input_dim, hidden..., num_classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    /// Weight/bias ranges of every layer in flat-vector order.
    pub fn layer_ranges(&self) -> Vec<LayerSlice> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for pair in dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let w = off..off + in_dim * out_dim;
            off = w.end;
            let b = off..off + out_dim;
            off = b.end;
            out.push(LayerSlice {
                in_dim,
                out_dim,
                w,
                b,
            });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layer_ranges().last().map_or(0, |l| l.b.end)
    }
}

/// He-initialized parameters: weights `N(0, 2/fan_in)`, biases zero.
pub fn init_params(spec: &MainNetSpec, rng: &mut impl Rng) -> Vec<f64> {
    let mut params = vec![0.0; spec.param_count()];
    for layer in spec.layer_ranges() {
        let dist = Normal::new(0.0, (2.0 / layer.in_dim as f64).sqrt()).unwrap();
        for slot in &mut params[layer.w] {
            *slot = dist.sample(rng);
        }
    }
    params
}

fn check_params(params: &[f64], spec: &MainNetSpec) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::structural(format!(
            "parameter vector has {} entries, spec needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Logits for a batch of inputs, shape `[n, num_classes]`.
pub fn forward_logits(params: &[f64], spec: &MainNetSpec, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_params(params, spec)?;
    if x.ncols() != spec.input_dim {
        return Err(Error::structural(format!(
            "input has {} features, spec needs {}",
            x.ncols(),
            spec.input_dim
        )));
    }
    let layers = spec.layer_ranges();
    let mut act = x.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &params[layer.w.clone()])
            .expect("range length matches shape");
        let b = ArrayView1::from(&params[layer.b.clone()]);
        let mut z = act.dot(&w.t());
        z += &b;
        if i + 1 < layers.len() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        act = z;
    }
    Ok(act)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax_first(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Per-class mean cross-entropy and argmax accuracy on `eval_set`.
///
/// `class_losses[c]` averages over exactly the examples labeled `c`, so every
/// class must appear in the evaluation set at least once.
pub fn eval_class_losses(
    params: &[f64],
    spec: &MainNetSpec,
    eval_set: &Dataset,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = spec.num_classes;
    if eval_set.num_classes != m {
        return Err(Error::structural(format!(
            "eval set has {} classes, spec has {m}",
            eval_set.num_classes
        )));
    }
    let counts = eval_set.class_counts();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::config(format!(
            "evaluation set has no examples of class {missing}"
        )));
    }
    let logits = forward_logits(params, spec, eval_set.features.view())?;
    let mut loss_sum = vec![0.0; m];
    let mut correct = vec![0usize; m];
    for (i, &label) in eval_set.labels.iter().enumerate() {
        let row = logits.row(i);
        let c = label as usize;
        loss_sum[c] += log_sum_exp(row) - row[c];
        if argmax_first(row) == c {
            correct[c] += 1;
        }
    }
    let losses = (0..m).map(|c| loss_sum[c] / counts[c] as f64).collect();
    let accs = (0..m).map(|c| correct[c] as f64 / counts[c] as f64).collect();
    Ok((losses, accs))
}

/// Mean accuracy over a class subset (used for candidate selection).
pub fn mean_accuracy_over(accs: &[f64], classes: &[usize]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| accs[c]).sum::<f64>() / classes.len() as f64
}

/// Mean softmax cross-entropy over the batch and its gradient, accumulated
/// into `grad` (which must be zeroed by the caller and match `params` length).
pub fn ce_loss_and_grad(
    params: &[f64],
    spec: &MainNetSpec,
    x: ArrayView2<f64>,
    y: &[u8],
    grad: &mut [f64],
) -> Result<f64> {
    check_params(params, spec)?;
    check_params(grad, spec)?;
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::structural("batch inputs and labels disagree"));
    }
    let layers = spec.layer_ranges();
    // Forward, keeping post-activation values for the backward pass.
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_owned());
    for (i, layer) in layers.iter().enumerate() {
        let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &params[layer.w.clone()])
            .expect("range length matches shape");
        let b = ArrayView1::from(&params[layer.b.clone()]);
        let mut z = acts[i].dot(&w.t());
        z += &b;
        if i + 1 < layers.len() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(z);
    }
    let logits = &acts[layers.len()];
    let mut loss = 0.0;
    let mut dz = softmax_rows(logits);
    for (i, &label) in y.iter().enumerate() {
        let c = label as usize;
        loss += log_sum_exp(logits.row(i)) - logits[(i, c)];
        dz[(i, c)] -= 1.0;
    }
    loss /= n as f64;
    dz.mapv_inplace(|v| v / n as f64);
    // Backward.
    for (i, layer) in layers.iter().enumerate().rev() {
        let dw = dz.t().dot(&acts[i]);
        let db = dz.sum_axis(Axis(0));
        grad[layer.w.clone()].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
        grad[layer.b.clone()].copy_from_slice(db.as_slice().unwrap());
        if i > 0 {
            let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &params[layer.w.clone()])
                .expect("range length matches shape");
            let mut da = dz.dot(&w);
            // ReLU mask from the stored post-activation values.
            da.zip_mut_with(&acts[i], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = da;
        }
    }
    Ok(loss)
}

/// One plain SGD update: `params -= lr * grad`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn validate_perm(perm: &[usize], width: usize) -> Result<()> {
    if perm.len() != width {
        return Err(Error::structural(format!(
            "permutation length {} does not match hidden width {width}",
            perm.len()
        )));
    }
    let mut seen = vec![false; width];
    for &p in perm {
        if p >= width || seen[p] {
            return Err(Error::structural("not a valid permutation"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders hidden units so the represented function is unchanged: unit `i`
/// of hidden layer `l` takes the incoming weights, bias, and outgoing weights
/// of old unit `perms[l][i]`.
pub fn permute_hidden_units(
    params: &[f64],
    spec: &MainNetSpec,
    perms: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_params(params, spec)?;
    if perms.len() != spec.hidden_dims.len() {
        return Err(Error::structural(format!(
            "{} permutations given for {} hidden layers",
            perms.len(),
            spec.hidden_dims.len()
        )));
    }
    let layers = spec.layer_ranges();
    let mut out = params.to_vec();
    for (l, perm) in perms.iter().enumerate() {
        let width = spec.hidden_dims[l];
        validate_perm(perm, width)?;
        let lay = &layers[l];
        let nxt = &layers[l + 1];
        let w_in: Vec<f64> = out[lay.w.clone()].to_vec();
        let b_in: Vec<f64> = out[lay.b.clone()].to_vec();
        let w_out: Vec<f64> = out[nxt.w.clone()].to_vec();
        for (i, &src) in perm.iter().enumerate() {
            out[lay.w.start + i * lay.in_dim..lay.w.start + (i + 1) * lay.in_dim]
                .copy_from_slice(&w_in[src * lay.in_dim..(src + 1) * lay.in_dim]);
            out[lay.b.start + i] = b_in[src];
            for row in 0..nxt.out_dim {
                out[nxt.w.start + row * nxt.in_dim + i] = w_out[row * nxt.in_dim + src];
            }
        }
    }
    Ok(out)
}

/// A uniformly random permutation per hidden layer.
pub fn random_permutations(spec: &MainNetSpec, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    spec.hidden_dims
        .iter()
        .map(|&h| {
            let mut perm: Vec<usize> = (0..h).collect();
            perm.shuffle(rng);
            perm
        })
        .collect()
}

/// Identity permutations (useful as the no-augmentation case).
pub fn identity_permutations(spec: &MainNetSpec) -> Vec<Vec<usize>> {
    spec.hidden_dims.iter().map(|&h| (0..h).collect()).collect()
}
