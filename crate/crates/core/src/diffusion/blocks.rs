//! Transformer building blocks with hand-written backward passes.
//!
//! Everything operates on `[rows, features]` matrices where a row is one
//! sequence position of one batch element (`row = b * seq_len + s`).
//! Forward passes return whatever intermediate state the matching backward
//! pass needs; gradients accumulate into a flat vector parallel to the
//! parameter vector (see [`super::params`]).

use ndarray::{Array2, Axis};

use super::params::{Builder, Init, Mat, Vect};
use rand::Rng;

const LN_EPS: f64 = 1e-5;

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Mat,
    pub b: Vect,
}

impl Linear {
    pub fn new<R: Rng>(
        builder: &mut Builder<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
    ) -> Linear {
        let w = builder.mat(format!("{name}.w"), out_dim, in_dim, w_init, true);
        let b = builder.vect(format!("{name}.b"), out_dim, Init::Zero);
        Linear { w, b }
    }

    /// Same layer but with both the weight and the bias forced to a given
    /// init and decay flag; used for zero-initialized output projections.
    pub fn new_no_decay<R: Rng>(
        builder: &mut Builder<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
    ) -> Linear {
        let w = builder.mat(format!("{name}.w"), out_dim, in_dim, w_init, false);
        let b = builder.vect(format!("{name}.b"), out_dim, Init::Zero);
        Linear { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn forward(&self, data: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.view(data).t());
        y += &self.b.view(data);
        y
    }

    /// Accumulates dW and db into `grads`; returns dx.
    pub fn backward(
        &self,
        data: &[f64],
        grads: &mut [f64],
        x: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dw = dy.t().dot(x);
        {
            let gw = &mut grads[self.w.offset..self.w.offset + self.w.len()];
            for (g, &d) in gw.iter_mut().zip(dw.iter()) {
                *g += d;
            }
        }
        {
            let gb = &mut grads[self.b.offset..self.b.offset + self.b.len];
            for (j, g) in gb.iter_mut().enumerate() {
                *g += dy.column(j).sum();
            }
        }
        dy.dot(&self.w.view(data))
    }
}

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: Vect,
    pub b: Vect,
}

pub struct LnCache {
    /// Normalized input before scale/shift.
    pub xhat: Array2<f64>,
    /// 1/σ per row.
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(builder: &mut Builder<'_, R>, name: &str, dim: usize) -> LayerNorm {
        let g = builder.vect(format!("{name}.g"), dim, Init::One);
        let b = builder.vect(format!("{name}.b"), dim, Init::Zero);
        LayerNorm { g, b }
    }

    pub fn forward(&self, data: &[f64], x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let dim = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / dim;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        y *= &self.g.view(data);
        y += &self.b.view(data);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        data: &[f64],
        grads: &mut [f64],
        cache: &LnCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dim = dy.ncols() as f64;
        for j in 0..dy.ncols() {
            let mut sg = 0.0;
            let mut sb = 0.0;
            for i in 0..dy.nrows() {
                sg += dy[[i, j]] * cache.xhat[[i, j]];
                sb += dy[[i, j]];
            }
            grads[self.g.offset + j] += sg;
            grads[self.b.offset + j] += sb;
        }
        let gamma = self.g.view(data);
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..dy.ncols() {
                let dxh = dy[[i, j]] * gamma[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.xhat[[i, j]];
            }
            mean_dxhat /= dim;
            mean_dxhat_xhat /= dim;
            let is = cache.inv_std[i];
            for j in 0..dy.ncols() {
                let dxh = dy[[i, j]] * gamma[j];
                dx[[i, j]] = is * (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu_fwd(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for (d, (&v, &g)) in dx.iter_mut().zip(x.iter().zip(dy.iter())) {
        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
        let deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d = g * deriv;
    }
    dx
}

/// Pre-norm transformer block: attention and MLP sublayers, each with a
/// residual connection.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub width: usize,
}

pub struct BlockCache {
    pub x: Array2<f64>,
    pub ln1: LnCache,
    pub ln1_out: Array2<f64>,
    pub qkv_out: Array2<f64>,
    /// Attention probabilities, one S×S matrix per (batch, head).
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
    pub mid: Array2<f64>,
    pub ln2: LnCache,
    pub ln2_out: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h_act: Array2<f64>,
}

impl Block {
    pub fn new<R: Rng>(
        builder: &mut Builder<'_, R>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        w_std: f64,
    ) -> Block {
        assert!(width % heads == 0, "width must divide evenly into heads");
        Block {
            ln1: LayerNorm::new(builder, &format!("{name}.ln1"), width),
            qkv: Linear::new(builder, &format!("{name}.qkv"), width, 3 * width, Init::Normal(w_std)),
            proj: Linear::new(builder, &format!("{name}.proj"), width, width, Init::Normal(w_std)),
            ln2: LayerNorm::new(builder, &format!("{name}.ln2"), width),
            fc1: Linear::new(builder, &format!("{name}.fc1"), width, mlp_ratio * width, Init::Normal(w_std)),
            fc2: Linear::new(builder, &format!("{name}.fc2"), mlp_ratio * width, width, Init::Normal(w_std)),
            heads,
            width,
        }
    }

    /// `x` is `[batch * seq, width]`; rows of one batch element are contiguous.
    pub fn forward(
        &self,
        data: &[f64],
        x: &Array2<f64>,
        batch: usize,
        seq: usize,
    ) -> (Array2<f64>, BlockCache) {
        let width = self.width;
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (ln1_out, ln1_cache) = self.ln1.forward(data, x);
        let qkv_out = self.qkv.forward(data, &ln1_out);
        let mut concat = Array2::zeros((batch * seq, width));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let q = qkv_out.slice(ndarray::s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv_out.slice(ndarray::s![rows.clone(), width + h * dh..width + (h + 1) * dh]);
                let v = qkv_out
                    .slice(ndarray::s![rows.clone(), 2 * width + h * dh..2 * width + (h + 1) * dh]);
                let mut scores = q.dot(&k.t());
                scores *= scale;
                // Row-wise softmax with max subtraction.
                for mut row in scores.axis_iter_mut(Axis(0)) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let out = scores.dot(&v);
                concat
                    .slice_mut(ndarray::s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&out);
                probs.push(scores);
            }
        }
        let attn_out = self.proj.forward(data, &concat);
        let mid = x + &attn_out;

        let (ln2_out, ln2_cache) = self.ln2.forward(data, &mid);
        let h_pre = self.fc1.forward(data, &ln2_out);
        let h_act = gelu_fwd(&h_pre);
        let mlp_out = self.fc2.forward(data, &h_act);
        let out = &mid + &mlp_out;

        (
            out,
            BlockCache {
                x: x.clone(),
                ln1: ln1_cache,
                ln1_out,
                qkv_out,
                probs,
                concat,
                mid,
                ln2: ln2_cache,
                ln2_out,
                h_pre,
                h_act,
            },
        )
    }

    pub fn backward(
        &self,
        data: &[f64],
        grads: &mut [f64],
        cache: &BlockCache,
        dy: &Array2<f64>,
        batch: usize,
        seq: usize,
    ) -> Array2<f64> {
        let width = self.width;
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP sublayer: out = mid + fc2(gelu(fc1(ln2(mid)))).
        let dh_act = self.fc2.backward(data, grads, &cache.h_act, dy);
        let dh_pre = gelu_bwd(&cache.h_pre, &dh_act);
        let dln2_out = self.fc1.backward(data, grads, &cache.ln2_out, &dh_pre);
        let mut dmid = self.ln2.backward(data, grads, &cache.ln2, &dln2_out);
        dmid += dy;

        // Attention sublayer: mid = x + proj(concat).
        let dconcat = self.proj.backward(data, grads, &cache.concat, &dmid);
        let mut dqkv = Array2::zeros((batch * seq, 3 * width));
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let q = cache
                    .qkv_out
                    .slice(ndarray::s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = cache
                    .qkv_out
                    .slice(ndarray::s![rows.clone(), width + h * dh..width + (h + 1) * dh]);
                let v = cache
                    .qkv_out
                    .slice(ndarray::s![rows.clone(), 2 * width + h * dh..2 * width + (h + 1) * dh]);
                let d_out = dconcat.slice(ndarray::s![rows.clone(), h * dh..(h + 1) * dh]);

                let dv = p.t().dot(&d_out);
                let dp = d_out.dot(&v.t());
                // Softmax backward per row: dS = (dP − Σ_j dP⊙P) ⊙ P.
                let mut ds = Array2::zeros(p.raw_dim());
                for i in 0..p.nrows() {
                    let dot: f64 = (0..p.ncols()).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                    for j in 0..p.ncols() {
                        ds[[i, j]] = (dp[[i, j]] - dot) * p[[i, j]];
                    }
                }
                ds *= scale;
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(ndarray::s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&dq);
                dqkv.slice_mut(ndarray::s![rows.clone(), width + h * dh..width + (h + 1) * dh])
                    .assign(&dk);
                dqkv.slice_mut(ndarray::s![
                    rows.clone(),
                    2 * width + h * dh..2 * width + (h + 1) * dh
                ])
                .assign(&dv);
            }
        }
        let dln1_out = self.qkv.backward(data, grads, &cache.ln1_out, &dqkv);
        let mut dx = self.ln1.backward(data, grads, &cache.ln1, &dln1_out);
        dx += &dmid;
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
    }

    /// Central finite difference of `f` w.r.t. one parameter entry.
    fn fd_param<F: FnMut(&[f64]) -> f64>(data: &mut [f64], idx: usize, mut f: F) -> f64 {
        let eps = 1e-5;
        let orig = data[idx];
        data[idx] = orig + eps;
        let plus = f(data);
        data[idx] = orig - eps;
        let minus = f(data);
        data[idx] = orig;
        (plus - minus) / (2.0 * eps)
    }

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        let denom = 1.0_f64.max(a.abs()).max(b.abs());
        assert!(
            (a - b).abs() / denom < tol,
            "{what}: analytic {a} vs numeric {b}"
        );
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut b = Builder::new(&mut rng);
        let lin = Linear::new(&mut b, "l", 5, 3, Init::Normal(0.5));
        let (schema, mut data) = b.finish();
        let mut rng2 = ChaCha20Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng2, 4, 5);
        let target = random_matrix(&mut rng2, 4, 3);

        let loss = |d: &[f64], xin: &Array2<f64>| {
            let y = lin.forward(d, xin);
            (&y - &target).mapv(|v| v * v).sum()
        };
        let y = lin.forward(&data, &x);
        let dy = (&y - &target).mapv(|v| 2.0 * v);
        let mut grads = vec![0.0; schema.len];
        let dx = lin.backward(&data, &mut grads, &x, &dy);

        for idx in 0..schema.len {
            let num = fd_param(&mut data, idx, |d| loss(d, &x));
            assert_close(grads[idx], num, 1e-6, &format!("param {idx}"));
        }
        // Input gradient via FD on one entry.
        let mut x2 = x.clone();
        let eps = 1e-5;
        x2[[1, 2]] += eps;
        let plus = loss(&data, &x2);
        x2[[1, 2]] -= 2.0 * eps;
        let minus = loss(&data, &x2);
        assert_close(dx[[1, 2]], (plus - minus) / (2.0 * eps), 1e-6, "dx");
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut b = Builder::new(&mut rng);
        let ln = LayerNorm::new(&mut b, "ln", 6);
        let (schema, mut data) = b.finish();
        // Perturb gamma/beta away from the identity so gradients are generic.
        let mut rng2 = ChaCha20Rng::seed_from_u64(10);
        let dist = Normal::new(0.0, 0.3).unwrap();
        for v in data.iter_mut() {
            *v += dist.sample(&mut rng2);
        }
        let x = random_matrix(&mut rng2, 3, 6);
        let target = random_matrix(&mut rng2, 3, 6);

        let loss = |d: &[f64], xin: &Array2<f64>| {
            let (y, _) = ln.forward(d, xin);
            (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = ln.forward(&data, &x);
        let dy = (&y - &target).mapv(|v| 2.0 * v);
        let mut grads = vec![0.0; schema.len];
        let dx = ln.backward(&data, &mut grads, &cache, &dy);

        for idx in 0..schema.len {
            let num = fd_param(&mut data, idx, |d| loss(d, &x));
            assert_close(grads[idx], num, 1e-6, &format!("ln param {idx}"));
        }
        for (i, j) in [(0, 0), (1, 3), (2, 5)] {
            let mut x2 = x.clone();
            let eps = 1e-5;
            x2[[i, j]] += eps;
            let plus = loss(&data, &x2);
            x2[[i, j]] -= 2.0 * eps;
            let minus = loss(&data, &x2);
            assert_close(dx[[i, j]], (plus - minus) / (2.0 * eps), 1e-6, "ln dx");
        }
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let x = Array2::from_shape_vec((1, 7), vec![-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0]).unwrap();
        let dy = Array2::ones((1, 7));
        let dx = gelu_bwd(&x, &dy);
        for j in 0..7 {
            let eps = 1e-6;
            let mut xp = x.clone();
            xp[[0, j]] += eps;
            let mut xm = x.clone();
            xm[[0, j]] -= eps;
            let num = (gelu_fwd(&xp)[[0, j]] - gelu_fwd(&xm)[[0, j]]) / (2.0 * eps);
            assert_close(dx[[0, j]], num, 1e-6, "gelu");
        }
        // Known values: gelu(0) = 0, gelu(x) → x for large x
        // (gelu(3) = 3·Φ(3) ≈ 2.996).
        let y = gelu_fwd(&x);
        assert_eq!(y[[0, 3]], 0.0);
        assert!((y[[0, 6]] - 3.0).abs() < 0.01);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let width = 8;
        let heads = 2;
        let batch = 2;
        let seq = 3;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut b = Builder::new(&mut rng);
        let block = Block::new(&mut b, "blk", width, heads, 4, 0.3);
        let (schema, mut data) = b.finish();
        let mut rng2 = ChaCha20Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng2, batch * seq, width);
        let target = random_matrix(&mut rng2, batch * seq, width);

        let loss = |d: &[f64], xin: &Array2<f64>| {
            let (y, _) = block.forward(d, xin, batch, seq);
            (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = block.forward(&data, &x, batch, seq);
        let dy = (&y - &target).mapv(|v| 2.0 * v);
        let mut grads = vec![0.0; schema.len];
        let dx = block.backward(&data, &mut grads, &cache, &dy, batch, seq);

        // Spot-check a spread of parameter indices (full sweep is slow).
        let mut idx = 1usize;
        while idx < schema.len {
            let num = fd_param(&mut data, idx, |d| loss(d, &x));
            assert_close(grads[idx], num, 1e-4, &format!("block param {idx}"));
            idx = idx * 2 + 3;
        }
        for (i, j) in [(0, 0), (2, 5), (5, 7)] {
            let mut x2 = x.clone();
            let eps = 1e-5;
            x2[[i, j]] += eps;
            let plus = loss(&data, &x2);
            x2[[i, j]] -= 2.0 * eps;
            let minus = loss(&data, &x2);
            assert_close(dx[[i, j]], (plus - minus) / (2.0 * eps), 1e-4, "block dx");
        }
    }

    #[test]
    fn attention_rows_are_batch_local() {
        // Changing batch element 1 must not affect the output rows of
        // batch element 0 (attention only mixes within a batch element).
        let width = 8;
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut b = Builder::new(&mut rng);
        let block = Block::new(&mut b, "blk", width, 2, 4, 0.3);
        let (_, data) = b.finish();
        let mut rng2 = ChaCha20Rng::seed_from_u64(14);
        let x = random_matrix(&mut rng2, 6, width);
        let (y1, _) = block.forward(&data, &x, 2, 3);
        let mut x2 = x.clone();
        x2[[4, 2]] += 10.0;
        let (y2, _) = block.forward(&data, &x2, 2, 3);
        for i in 0..3 {
            for j in 0..width {
                assert_eq!(y1[[i, j]], y2[[i, j]], "row {i} changed");
            }
        }
        assert!((&y1 - &y2).mapv(f64::abs).sum() > 0.0);
    }
}
