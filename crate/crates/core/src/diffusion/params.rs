//! Flat parameter storage for the transformer.
//!
//! All learnable tensors live in one `Vec<f64>`; a schema records each
//! tensor's name, location, shape, and whether weight decay applies.
//! Gradients, Adam moments, and the EMA copy are parallel vectors of the
//! same length, which keeps the optimizer, the EMA update, serialization,
//! and finite-difference probing trivial and allocation-free.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Handle to a 2-D tensor: rows × cols at a fixed offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mat {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Mat {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn view<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.offset..self.offset + self.len()])
            .expect("schema shape matches slice")
    }
}

/// Handle to a 1-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vect {
    pub offset: usize,
    pub len: usize,
}

impl Vect {
    pub fn view<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.offset..self.offset + self.len])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDef {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub decay: bool,
}

/// Names and locations of every tensor; fixed once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub defs: Vec<TensorDef>,
    pub len: usize,
}

impl Schema {
    /// Contiguous ranges and whether weight decay applies to each.
    pub fn decay_ranges(&self) -> Vec<(Range<usize>, bool)> {
        self.defs
            .iter()
            .map(|d| {
                let n: usize = d.shape.iter().product();
                (d.offset..d.offset + n, d.decay)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zero,
    One,
    Normal(f64),
}

/// Registers tensors and produces the initialized flat vector.
pub struct Builder<'r, R: Rng> {
    defs: Vec<TensorDef>,
    data: Vec<f64>,
    rng: &'r mut R,
}

impl<'r, R: Rng> Builder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Builder {
            defs: Vec::new(),
            data: Vec::new(),
            rng,
        }
    }

    fn extend(&mut self, n: usize, init: Init) -> usize {
        let offset = self.data.len();
        match init {
            Init::Zero => self.data.extend(std::iter::repeat(0.0).take(n)),
            Init::One => self.data.extend(std::iter::repeat(1.0).take(n)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).unwrap();
                self.data.extend((0..n).map(|_| dist.sample(self.rng)));
            }
        }
        offset
    }

    /// Registers a matrix; `decay` marks it for AdamW weight decay.
    pub fn mat(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, decay: bool) -> Mat {
        let offset = self.extend(rows * cols, init);
        self.defs.push(TensorDef {
            name: name.into(),
            offset,
            shape: vec![rows, cols],
            decay,
        });
        Mat { offset, rows, cols }
    }

    /// Registers a vector; vectors are never weight-decayed.
    pub fn vect(&mut self, name: impl Into<String>, len: usize, init: Init) -> Vect {
        let offset = self.extend(len, init);
        self.defs.push(TensorDef {
            name: name.into(),
            offset,
            shape: vec![len],
            decay: false,
        });
        Vect { offset, len }
    }

    pub fn finish(self) -> (Schema, Vec<f64>) {
        let len = self.data.len();
        (
            Schema {
                defs: self.defs,
                len,
            },
            self.data,
        )
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64, beta1: f64, beta2: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay_ranges: &[(Range<usize>, bool)]) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if self.weight_decay > 0.0 {
            for (range, decay) in decay_ranges {
                if *decay {
                    for p in &mut params[range.clone()] {
                        *p -= self.lr * self.weight_decay * *p;
                    }
                }
            }
        }
    }
}

/// `ema = decay·ema + (1 − decay)·params`, elementwise.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}
