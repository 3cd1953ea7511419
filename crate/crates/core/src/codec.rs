//! Conversion between flat parameter vectors and the token sequence the
//! diffusion transformer consumes, plus the sinusoidal features used to
//! condition on scalars (timestep, losses, loss deltas).
//!
//! Each layer's weights and biases form separate token groups; tensors longer
//! than `max_token_len` split into several tokens, the last zero-padded with
//! its valid length recorded. Values are z-scored per group with statistics
//! computed over the zoo's training split, so token scales stay comparable
//! across layers. `detokenize(tokenize(p))` recovers `p` up to the
//! normalization round-trip error.

use crate::error::{Error, Result};
use crate::zoo::net::MainNetSpec;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Bias,
}

/// One tensor's place in the flat vector and its decomposition into tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub layer_name: String,
    pub kind: TensorKind,
    /// Slice of the flat parameter vector this group covers.
    pub start: usize,
    pub len: usize,
    pub token_count: usize,
    /// Length of every token in this group (the last may be partly padding).
    pub token_len: usize,
    /// Valid entries in the final token.
    pub last_valid_len: usize,
}

impl TokenGroup {
    pub fn slice(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// The complete token decomposition of one architecture's flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub groups: Vec<TokenGroup>,
    pub max_token_len: usize,
    pub param_count: usize,
}

impl TokenLayout {
    /// Total number of parameter tokens.
    pub fn token_count(&self) -> usize {
        self.groups.iter().map(|g| g.token_count).sum()
    }

    /// Group index of each token, in token order.
    pub fn token_groups(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.token_count());
        for (gi, g) in self.groups.iter().enumerate() {
            out.extend(std::iter::repeat(gi).take(g.token_count));
        }
        out
    }

    /// Total entries across all tokens, padding included.
    pub fn entry_count(&self) -> usize {
        self.groups.iter().map(|g| g.token_count * g.token_len).sum()
    }
}

/// Decomposes `spec`'s flat vector into per-tensor token groups.
pub fn build_layout(spec: &MainNetSpec, max_token_len: usize) -> Result<TokenLayout> {
    if max_token_len == 0 {
        return Err(Error::config("max_token_len must be at least 1"));
    }
    spec.validate()?;
    let mut groups = Vec::new();
    for (i, layer) in spec.layer_ranges().iter().enumerate() {
        for (kind, range) in [(TensorKind::Weight, &layer.w), (TensorKind::Bias, &layer.b)] {
            let len = range.len();
            let token_count = len.div_ceil(max_token_len);
            let token_len = len.min(max_token_len);
            let last_valid_len = len - (token_count - 1) * token_len;
            groups.push(TokenGroup {
                layer_name: format!("layer{i}"),
                kind,
                start: range.start,
                len,
                token_count,
                token_len,
                last_valid_len,
            });
        }
    }
    Ok(TokenLayout {
        groups,
        max_token_len,
        param_count: spec.param_count(),
    })
}

/// Per-group mean/std over the zoo training split, std floored at 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Computes normalization statistics from parameter vectors (one pass of
/// sums; inputs are the f32 values checkpoints store).
pub fn compute_stats<'a>(
    layout: &TokenLayout,
    params_iter: impl Iterator<Item = &'a [f32]>,
) -> Result<NormalizerStats> {
    let g = layout.groups.len();
    let mut n = 0u64;
    let mut sum = vec![0.0f64; g];
    let mut sum_sq = vec![0.0f64; g];
    for params in params_iter {
        if params.len() != layout.param_count {
            return Err(Error::structural(format!(
                "stats input has {} params, layout needs {}",
                params.len(),
                layout.param_count
            )));
        }
        n += 1;
        for (gi, group) in layout.groups.iter().enumerate() {
            for &v in &params[group.slice()] {
                sum[gi] += v as f64;
                sum_sq[gi] += (v as f64) * (v as f64);
            }
        }
    }
    if n == 0 {
        return Err(Error::config("cannot compute normalizer stats over zero vectors"));
    }
    let mut mean = vec![0.0; g];
    let mut std = vec![0.0; g];
    for (gi, group) in layout.groups.iter().enumerate() {
        let count = (n as f64) * group.len as f64;
        mean[gi] = sum[gi] / count;
        let var = (sum_sq[gi] / count - mean[gi] * mean[gi]).max(0.0);
        std[gi] = var.sqrt().max(STD_FLOOR);
    }
    Ok(NormalizerStats { mean, std })
}

fn check_compat(params_len: usize, layout: &TokenLayout, stats: &NormalizerStats) -> Result<()> {
    if params_len != layout.param_count {
        return Err(Error::structural(format!(
            "parameter vector has {params_len} entries, layout needs {}",
            layout.param_count
        )));
    }
    if stats.mean.len() != layout.groups.len() || stats.std.len() != layout.groups.len() {
        return Err(Error::structural("normalizer stats do not match layout groups"));
    }
    Ok(())
}

/// Per-group z-scoring of a flat vector.
pub fn normalize(params: &[f64], layout: &TokenLayout, stats: &NormalizerStats) -> Result<Vec<f64>> {
    check_compat(params.len(), layout, stats)?;
    let mut out = params.to_vec();
    for (gi, group) in layout.groups.iter().enumerate() {
        for v in &mut out[group.slice()] {
            *v = (*v - stats.mean[gi]) / stats.std[gi];
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(
    normalized: &[f64],
    layout: &TokenLayout,
    stats: &NormalizerStats,
) -> Result<Vec<f64>> {
    check_compat(normalized.len(), layout, stats)?;
    let mut out = normalized.to_vec();
    for (gi, group) in layout.groups.iter().enumerate() {
        for v in &mut out[group.slice()] {
            *v = *v * stats.std[gi] + stats.mean[gi];
        }
    }
    Ok(out)
}

/// A parameter vector as normalized tokens; padding entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedParams {
    /// `tokens[i]` has the token length of its group.
    pub tokens: Vec<Vec<f64>>,
}

impl TokenizedParams {
    /// Concatenates all tokens into one entry vector (padding included);
    /// length is the layout's [`TokenLayout::entry_count`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.tokens.iter().map(Vec::len).sum());
        for t in &self.tokens {
            out.extend_from_slice(t);
        }
        out
    }
}

/// Splits a flat entry vector back into per-group tokens.
pub fn unflatten(entries: &[f64], layout: &TokenLayout) -> Result<TokenizedParams> {
    if entries.len() != layout.entry_count() {
        return Err(Error::structural(format!(
            "{} entries for a layout of {}",
            entries.len(),
            layout.entry_count()
        )));
    }
    let mut tokens = Vec::with_capacity(layout.token_count());
    let mut pos = 0;
    for group in &layout.groups {
        for _ in 0..group.token_count {
            tokens.push(entries[pos..pos + group.token_len].to_vec());
            pos += group.token_len;
        }
    }
    Ok(TokenizedParams { tokens })
}

/// Normalizes and splits a flat vector into tokens.
pub fn tokenize(
    params: &[f64],
    layout: &TokenLayout,
    stats: &NormalizerStats,
) -> Result<TokenizedParams> {
    let normalized = normalize(params, layout, stats)?;
    let mut tokens = Vec::with_capacity(layout.token_count());
    for group in &layout.groups {
        let data = &normalized[group.slice()];
        for t in 0..group.token_count {
            let from = t * group.token_len;
            let to = (from + group.token_len).min(group.len);
            let mut token = vec![0.0; group.token_len];
            token[..to - from].copy_from_slice(&data[from..to]);
            tokens.push(token);
        }
    }
    Ok(TokenizedParams { tokens })
}

/// Reassembles and denormalizes tokens into a flat vector, ignoring padding.
pub fn detokenize(
    tokens: &TokenizedParams,
    layout: &TokenLayout,
    stats: &NormalizerStats,
) -> Result<Vec<f64>> {
    if tokens.tokens.len() != layout.token_count() {
        return Err(Error::structural(format!(
            "{} tokens for a layout of {}",
            tokens.tokens.len(),
            layout.token_count()
        )));
    }
    let mut normalized = vec![0.0; layout.param_count];
    let mut ti = 0;
    for group in &layout.groups {
        for t in 0..group.token_count {
            let token = &tokens.tokens[ti];
            if token.len() != group.token_len {
                return Err(Error::structural(format!(
                    "token {ti} has length {}, group {} expects {}",
                    token.len(),
                    group.layer_name,
                    group.token_len
                )));
            }
            let from = t * group.token_len;
            let to = (from + group.token_len).min(group.len);
            normalized[group.start + from..group.start + to]
                .copy_from_slice(&token[..to - from]);
            ti += 1;
        }
    }
    denormalize(&normalized, layout, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    Timestep,
    Loss,
    LossDelta,
}

/// Sinusoidal features for conditioning scalars: the input is mapped to
/// `[0, 1]` over its kind's range, scaled by the largest period, and passed
/// through sin/cos pairs at geometrically spaced periods. The learned
/// projection to model width lives with the transformer's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEncoder {
    pub n_pairs: usize,
    /// Timestep range `[0, T]`.
    pub t_max: f64,
    /// Losses live in `[0, loss_cap]`, deltas in `[-loss_cap, loss_cap]`.
    pub loss_cap: f64,
}

impl FrequencyEncoder {
    pub fn new(n_pairs: usize, t_max: f64, loss_cap: f64) -> Result<FrequencyEncoder> {
        if n_pairs < 2 {
            return Err(Error::config("need at least two frequency pairs"));
        }
        if t_max <= 0.0 || loss_cap <= 0.0 {
            return Err(Error::config("scalar ranges must be positive"));
        }
        Ok(FrequencyEncoder {
            n_pairs,
            t_max,
            loss_cap,
        })
    }

    /// Output dimension: `2 * n_pairs`.
    pub fn feature_len(&self) -> usize {
        2 * self.n_pairs
    }

    fn range(&self, kind: ScalarKind) -> (f64, f64) {
        match kind {
            ScalarKind::Timestep => (0.0, self.t_max),
            ScalarKind::Loss => (0.0, self.loss_cap),
            ScalarKind::LossDelta => (-self.loss_cap, self.loss_cap),
        }
    }

    /// Geometric periods from 1 to 1e4, in units of the normalized input
    /// range: the fastest pair completes one cycle over the range, so the
    /// features stay Lipschitz-gentle in the raw input.
    pub fn period(&self, j: usize) -> f64 {
        10f64.powf(4.0 * j as f64 / (self.n_pairs - 1) as f64)
    }

    /// `[sin, cos]`-interleaved features; deterministic and continuous in
    /// `value`. The zero of each range maps to `[0, 1, 0, 1, ...]`.
    pub fn features(&self, value: f64, kind: ScalarKind) -> Result<Vec<f64>> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite conditioning scalar {value}")));
        }
        let (lo, hi) = self.range(kind);
        let unit = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
        let mut out = Vec::with_capacity(self.feature_len());
        for j in 0..self.n_pairs {
            let angle = 2.0 * std::f64::consts::PI * unit / self.period(j);
            out.push(angle.sin());
            out.push(angle.cos());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mnist4_spec() -> MainNetSpec {
        MainNetSpec::new(784, vec![2], 4).unwrap()
    }

    fn unit_stats(layout: &TokenLayout) -> NormalizerStats {
        NormalizerStats {
            mean: vec![0.0; layout.groups.len()],
            std: vec![1.0; layout.groups.len()],
        }
    }

    #[test]
    fn mnist4_layout_token_counts() {
        let layout = build_layout(&mnist4_spec(), 1000).unwrap();
        let counts: Vec<usize> = layout.groups.iter().map(|g| g.token_count).collect();
        assert_eq!(counts, vec![2, 1, 1, 1]);
        assert_eq!(layout.token_count(), 5);
        assert_eq!(layout.groups[0].token_len, 1000);
        assert_eq!(layout.groups[0].last_valid_len, 568);
        assert_eq!(layout.groups[1].token_len, 2);
        assert_eq!(layout.groups[2].token_len, 8);
        assert_eq!(layout.groups[3].token_len, 4);
    }

    #[test]
    fn flatten_unflatten_round_trips() {
        let spec = mnist4_spec();
        let layout = build_layout(&spec, 1000).unwrap();
        let stats = unit_stats(&layout);
        assert_eq!(layout.entry_count(), 2 * 1000 + 2 + 8 + 4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens = tokenize(&params, &layout, &stats).unwrap();
        let flat = tokens.flatten();
        assert_eq!(flat.len(), layout.entry_count());
        let back = unflatten(&flat, &layout).unwrap();
        assert_eq!(back, tokens);
        assert!(unflatten(&flat[1..], &layout).is_err());
    }

    #[test]
    fn huge_token_cap_means_one_token_per_tensor() {
        let spec = mnist4_spec();
        let layout = build_layout(&spec, spec.param_count()).unwrap();
        assert!(layout.groups.iter().all(|g| g.token_count == 1));
        assert!(layout
            .groups
            .iter()
            .all(|g| g.token_len == g.len && g.last_valid_len == g.len));
    }

    #[test]
    fn layouts_tile_flat_vector_for_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let depth = rng.gen_range(1..=3);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=12)).collect();
            let spec =
                MainNetSpec::new(rng.gen_range(1..=40), hidden, rng.gen_range(2..=8)).unwrap();
            let max_len = rng.gen_range(1..=spec.param_count().min(64));
            let layout = build_layout(&spec, max_len).unwrap();
            // Groups must tile [0, param_count) in order with no gaps.
            let mut expect = 0;
            for g in &layout.groups {
                assert_eq!(g.start, expect);
                expect += g.len;
                // Token accounting covers the group exactly.
                assert_eq!(
                    (g.token_count - 1) * g.token_len + g.last_valid_len,
                    g.len
                );
                assert!(g.token_len <= max_len);
                assert!(g.last_valid_len >= 1 && g.last_valid_len <= g.token_len);
            }
            assert_eq!(expect, spec.param_count());
        }
    }

    #[test]
    fn round_trip_is_tight() {
        let spec = mnist4_spec();
        let layout = build_layout(&spec, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // Stats from a batch of random "checkpoints".
        let vectors: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..spec.param_count()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let stats = compute_stats(&layout, vectors.iter().map(|v| v.as_slice())).unwrap();
        for _ in 0..100 {
            let params: Vec<f64> =
                (0..spec.param_count()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tokens = tokenize(&params, &layout, &stats).unwrap();
            let back = detokenize(&tokens, &layout, &stats).unwrap();
            let max_abs = params
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_abs < 1e-5, "round-trip error {max_abs}");
        }
    }

    #[test]
    fn zero_params_tokenize_to_group_constants() {
        let spec = MainNetSpec::new(10, vec![3], 4).unwrap();
        let layout = build_layout(&spec, 7).unwrap();
        let stats = NormalizerStats {
            mean: (0..layout.groups.len()).map(|i| i as f64 * 0.5).collect(),
            std: (0..layout.groups.len()).map(|i| 1.0 + i as f64).collect(),
        };
        let params = vec![0.0; spec.param_count()];
        let tokens = tokenize(&params, &layout, &stats).unwrap();
        let mut ti = 0;
        for (gi, group) in layout.groups.iter().enumerate() {
            let expect = -stats.mean[gi] / stats.std[gi];
            for t in 0..group.token_count {
                let valid = if t + 1 == group.token_count {
                    group.last_valid_len
                } else {
                    group.token_len
                };
                for (k, &v) in tokens.tokens[ti].iter().enumerate() {
                    if k < valid {
                        assert!((v - expect).abs() < 1e-12);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
                ti += 1;
            }
        }
    }

    #[test]
    fn constant_group_hits_std_floor() {
        let spec = MainNetSpec::new(4, vec![2], 2).unwrap();
        let layout = build_layout(&spec, 100).unwrap();
        let vectors: Vec<Vec<f32>> = (0..5).map(|_| vec![1.5f32; spec.param_count()]).collect();
        let stats = compute_stats(&layout, vectors.iter().map(|v| v.as_slice())).unwrap();
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
        // Round trip still works without blowing up.
        let params = vec![1.5; spec.param_count()];
        let tokens = tokenize(&params, &layout, &stats).unwrap();
        let back = detokenize(&tokens, &layout, &stats).unwrap();
        for (a, b) in params.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn permuted_params_keep_per_group_value_multisets() {
        use crate::zoo::net::{init_params, permute_hidden_units, random_permutations};
        let spec = MainNetSpec::new(12, vec![5], 3).unwrap();
        let layout = build_layout(&spec, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = init_params(&spec, &mut rng);
        let perms = random_permutations(&spec, &mut rng);
        let permuted = permute_hidden_units(&params, &spec, &perms).unwrap();
        let stats = unit_stats(&layout);
        let a = tokenize(&params, &layout, &stats).unwrap();
        let b = tokenize(&permuted, &layout, &stats).unwrap();
        let token_groups = layout.token_groups();
        for gi in 0..layout.groups.len() {
            let collect = |tp: &TokenizedParams| {
                let mut vals: Vec<f64> = tp
                    .tokens
                    .iter()
                    .zip(&token_groups)
                    .filter(|(_, &g)| g == gi)
                    .flat_map(|(t, _)| t.iter().copied())
                    .collect();
                vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
                vals
            };
            assert_eq!(collect(&a), collect(&b), "group {gi} multiset changed");
        }
    }

    #[test]
    fn frequency_zero_gives_alternating_pattern() {
        let enc = FrequencyEncoder::new(128, 1000.0, 5.0).unwrap();
        for kind in [ScalarKind::Timestep, ScalarKind::Loss] {
            let f = enc.features(0.0, kind).unwrap();
            assert_eq!(f.len(), 256);
            for pair in f.chunks(2) {
                assert_eq!(pair[0], 0.0);
                assert_eq!(pair[1], 1.0);
            }
        }
        // The delta range is symmetric, so its zero sits mid-range, not at 0.
        let f = enc.features(-5.0, ScalarKind::LossDelta).unwrap();
        for pair in f.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn frequency_features_are_continuous_and_deterministic() {
        let enc = FrequencyEncoder::new(128, 1000.0, 5.0).unwrap();
        let a = enc.features(2.5, ScalarKind::Loss).unwrap();
        let b = enc.features(2.5 + 1e-9, ScalarKind::Loss).unwrap();
        let max_abs = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_abs < 1e-6);
        assert_eq!(a, enc.features(2.5, ScalarKind::Loss).unwrap());
    }

    #[test]
    fn frequency_features_separate_distinct_losses() {
        let enc = FrequencyEncoder::new(128, 1000.0, 5.0).unwrap();
        let feats: Vec<Vec<f64>> = (0..1000)
            .map(|i| enc.features(i as f64 * 5.0 / 999.0, ScalarKind::Loss).unwrap())
            .collect();
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let linf = feats[i]
                    .iter()
                    .zip(&feats[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(linf > 0.0, "features {i} and {j} collide");
            }
        }
    }

    #[test]
    fn non_finite_scalar_is_rejected() {
        let enc = FrequencyEncoder::new(8, 10.0, 5.0).unwrap();
        assert!(enc.features(f64::NAN, ScalarKind::Loss).is_err());
        assert!(enc.features(f64::INFINITY, ScalarKind::Timestep).is_err());
    }
}
