//! The diffusion transformer over tokenized classifier parameters.
//!
//! A sequence is built from scalar conditioning tokens (timestep and
//! per-class losses, sinusoidally featurized and linearly projected),
//! optionally the clean current parameters (variant 1), and the noised
//! future parameters. Transformer blocks mix the sequence; per-group
//! decoders map the future-parameter positions back to token space.
//!
//! Variant 1 sees current parameters, current losses, target losses, and
//! their deltas, and predicts an update added to the current parameters.
//! Variant 2 sees only target losses and predicts the clean tokens
//! directly. Both are trained with x0-prediction: the output is compared
//! to the clean future tokens, not to the noise.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Block, BlockCache, LayerNorm, Linear, LnCache};
use super::params::{Builder, Init, Mat, Schema};
use super::schedule::{DDPMSchedule, ScheduleKind};
use crate::codec::{build_layout, FrequencyEncoder, NormalizerStats, ScalarKind, TokenLayout};
use crate::error::{Error, Result};
use crate::zoo::net::MainNetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V1,
    V2,
}

/// Hyperparameters of the hypernetwork and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub variant: Variant,
    pub model_width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub max_token_len: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    /// Sin/cos pairs per scalar feature.
    pub freq_pairs: usize,
    /// Conditioning losses are clamped to [0, loss_clamp] nats.
    pub loss_clamp: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
}

impl DiTConfig {
    /// Full-scale configuration (width 1536, depth 12, heads 16).
    pub fn full_scale(variant: Variant, num_classes: usize) -> DiTConfig {
        DiTConfig {
            variant,
            model_width: 1536,
            depth: 12,
            heads: 16,
            mlp_ratio: 4,
            num_classes,
            max_token_len: 1000,
            diffusion_steps: 1000,
            schedule: ScheduleKind::default_linear(),
            freq_pairs: 128,
            loss_clamp: 5.0,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            ema_decay: 0.9999,
            batch_size: 32,
        }
    }

    /// Reduced configuration that trains in reasonable time on one CPU
    /// core (width 384, depth 6, heads 8).
    pub fn desk_scale(variant: Variant, num_classes: usize) -> DiTConfig {
        DiTConfig {
            model_width: 384,
            depth: 6,
            heads: 8,
            ..DiTConfig::full_scale(variant, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_width == 0 || self.model_width % self.heads != 0 {
            return Err(Error::config(format!(
                "model_width {} must be a positive multiple of heads {}",
                self.model_width, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::config("diffusion_steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!(
                "ema_decay {} must lie in [0, 1)",
                self.ema_decay
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.loss_clamp <= 0.0 {
            return Err(Error::config("loss_clamp must be positive"));
        }
        Ok(())
    }
}

/// Where each kind of token sits in the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub num_classes: usize,
    pub token_count: usize,
    pub t_pos: usize,
    /// First current-loss position (variant 1 only).
    pub current_loss_start: Option<usize>,
    pub target_loss_start: usize,
    /// First loss-delta position (variant 1 only).
    pub delta_start: Option<usize>,
    /// First clean-parameter token position (variant 1 only).
    pub context_start: Option<usize>,
    /// First noised-parameter token position.
    pub noised_start: usize,
}

impl SeqLayout {
    pub fn new(variant: Variant, num_classes: usize, token_count: usize) -> SeqLayout {
        let m = num_classes;
        let k = token_count;
        match variant {
            Variant::V1 => SeqLayout {
                seq_len: 1 + 3 * m + 2 * k,
                num_classes: m,
                token_count: k,
                t_pos: 0,
                current_loss_start: Some(1),
                target_loss_start: 1 + m,
                delta_start: Some(1 + 2 * m),
                context_start: Some(1 + 3 * m),
                noised_start: 1 + 3 * m + k,
            },
            Variant::V2 => SeqLayout {
                seq_len: 1 + m + k,
                num_classes: m,
                token_count: k,
                t_pos: 0,
                current_loss_start: None,
                target_loss_start: 1,
                delta_start: None,
                context_start: None,
                noised_start: 1 + m,
            },
        }
    }
}

/// Conditioning for one batch.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// Diffusion timestep per sample, in [1, T].
    pub t: Vec<usize>,
    /// Target per-class losses, `[batch, num_classes]`, clamped.
    pub target_losses: Array2<f64>,
    /// Current per-class losses (variant 1 only).
    pub current_losses: Option<Array2<f64>>,
}

/// Intermediate state kept by [`DiT::forward`] for the backward pass.
pub struct DiTCache {
    batch: usize,
    t_feats: Array2<f64>,
    loss_feats: Array2<f64>,
    delta_feats: Option<Array2<f64>>,
    context_groups: Option<Vec<Array2<f64>>>,
    noised_groups: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    dec_ins: Vec<Array2<f64>>,
}

pub struct DiT {
    pub config: DiTConfig,
    pub spec: MainNetSpec,
    pub layout: TokenLayout,
    pub stats: NormalizerStats,
    pub seq: SeqLayout,
    pub schedule: DDPMSchedule,
    pub schema: Schema,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    freq: FrequencyEncoder,
    t_proj: Linear,
    loss_proj: Linear,
    delta_proj: Option<Linear>,
    context_enc: Option<Vec<Linear>>,
    noised_enc: Vec<Linear>,
    pos_emb: Mat,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    decoders: Vec<Linear>,
    /// First token index of each group.
    token_base: Vec<usize>,
    /// First flat-entry index of each group.
    entry_base: Vec<usize>,
}

const INIT_STD: f64 = 0.02;

impl DiT {
    /// Builds a freshly initialized model for `spec` with normalization
    /// statistics already computed from the zoo's training split.
    pub fn new(
        config: DiTConfig,
        spec: &MainNetSpec,
        stats: NormalizerStats,
        seed: u64,
    ) -> Result<DiT> {
        config.validate()?;
        spec.validate()?;
        if spec.num_classes != config.num_classes {
            return Err(Error::config(format!(
                "config says {} classes but the network spec has {}",
                config.num_classes, spec.num_classes
            )));
        }
        let layout = build_layout(spec, config.max_token_len)?;
        if stats.mean.len() != layout.groups.len() {
            return Err(Error::structural(
                "normalizer stats do not match the token layout",
            ));
        }
        let seq = SeqLayout::new(config.variant, config.num_classes, layout.token_count());
        let schedule = DDPMSchedule::new(config.schedule, config.diffusion_steps)?;
        let freq = FrequencyEncoder::new(
            config.freq_pairs,
            config.diffusion_steps as f64,
            config.loss_clamp,
        )?;
        let feat_len = freq.feature_len();
        let width = config.model_width;

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let t_proj = Linear::new(&mut b, "embed.t", feat_len, width, Init::Normal(INIT_STD));
        let loss_proj = Linear::new(&mut b, "embed.loss", feat_len, width, Init::Normal(INIT_STD));
        let delta_proj = match config.variant {
            Variant::V1 => Some(Linear::new(
                &mut b,
                "embed.delta",
                feat_len,
                width,
                Init::Normal(INIT_STD),
            )),
            Variant::V2 => None,
        };
        let context_enc = match config.variant {
            Variant::V1 => Some(
                layout
                    .groups
                    .iter()
                    .enumerate()
                    .map(|(gi, g)| {
                        Linear::new(
                            &mut b,
                            &format!("enc.context{gi}"),
                            g.token_len,
                            width,
                            Init::Normal(INIT_STD),
                        )
                    })
                    .collect(),
            ),
            Variant::V2 => None,
        };
        let noised_enc: Vec<Linear> = layout
            .groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                Linear::new(
                    &mut b,
                    &format!("enc.noised{gi}"),
                    g.token_len,
                    width,
                    Init::Normal(INIT_STD),
                )
            })
            .collect();
        // Zero so that, at initialization, position carries no information.
        let pos_emb = b.mat("pos_emb", seq.seq_len, width, Init::Zero, false);
        let blocks: Vec<Block> = (0..config.depth)
            .map(|i| {
                Block::new(
                    &mut b,
                    &format!("block{i}"),
                    width,
                    config.heads,
                    config.mlp_ratio,
                    INIT_STD,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(&mut b, "final_ln", width);
        // Zero so the initial prediction is exactly the residual base
        // (variant 1) or zero (variant 2).
        let decoders: Vec<Linear> = layout
            .groups
            .iter()
            .enumerate()
            .map(|(gi, g)| Linear::new_no_decay(&mut b, &format!("dec{gi}"), width, g.token_len, Init::Zero))
            .collect();
        let (schema, params) = b.finish();

        let mut token_base = Vec::with_capacity(layout.groups.len());
        let mut entry_base = Vec::with_capacity(layout.groups.len());
        let mut tb = 0;
        let mut eb = 0;
        for g in &layout.groups {
            token_base.push(tb);
            entry_base.push(eb);
            tb += g.token_count;
            eb += g.token_count * g.token_len;
        }

        let ema = params.clone();
        Ok(DiT {
            config,
            spec: spec.clone(),
            layout,
            stats,
            seq,
            schedule,
            schema,
            params,
            ema,
            freq,
            t_proj,
            loss_proj,
            delta_proj,
            context_enc,
            noised_enc,
            pos_emb,
            blocks,
            final_ln,
            decoders,
            token_base,
            entry_base,
        })
    }

    /// Flat entries per sample (all tokens, padding included).
    pub fn entry_count(&self) -> usize {
        self.layout.entry_count()
    }

    pub fn param_count(&self) -> usize {
        self.schema.len
    }

    fn featurize(&self, values: impl Iterator<Item = f64>, kind: ScalarKind) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = values
            .map(|v| self.freq.features(v, kind))
            .collect::<Result<_>>()?;
        let cols = self.freq.feature_len();
        let mut out = Array2::zeros((rows.len(), cols));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
        }
        Ok(out)
    }

    fn check_inputs(
        &self,
        xt: &Array2<f64>,
        context: Option<&Array2<f64>>,
        cond: &CondBatch,
    ) -> Result<usize> {
        let bsz = xt.nrows();
        let e = self.entry_count();
        if xt.ncols() != e {
            return Err(Error::structural(format!(
                "noised input has {} entries per sample, layout needs {e}",
                xt.ncols()
            )));
        }
        if cond.t.len() != bsz || cond.target_losses.nrows() != bsz {
            return Err(Error::structural("conditioning batch size mismatch"));
        }
        if cond.target_losses.ncols() != self.config.num_classes {
            return Err(Error::structural("target losses have the wrong class count"));
        }
        for &t in &cond.t {
            if t < 1 || t > self.config.diffusion_steps {
                return Err(Error::structural(format!(
                    "timestep {t} outside [1, {}]",
                    self.config.diffusion_steps
                )));
            }
        }
        match self.config.variant {
            Variant::V1 => {
                let ctx = context.ok_or_else(|| {
                    Error::structural("variant 1 needs clean current-parameter tokens")
                })?;
                if ctx.nrows() != bsz || ctx.ncols() != e {
                    return Err(Error::structural("context token shape mismatch"));
                }
                let cur = cond.current_losses.as_ref().ok_or_else(|| {
                    Error::structural("variant 1 needs current losses")
                })?;
                if cur.nrows() != bsz || cur.ncols() != self.config.num_classes {
                    return Err(Error::structural("current losses have the wrong shape"));
                }
            }
            Variant::V2 => {
                if context.is_some() || cond.current_losses.is_some() {
                    return Err(Error::structural(
                        "variant 2 takes no current parameters or losses",
                    ));
                }
            }
        }
        Ok(bsz)
    }

    /// Splits flat per-sample entries into per-group `[batch * tokens, len]`
    /// matrices (rows of one sample's tokens are adjacent).
    fn group_arrays(&self, flat: &Array2<f64>) -> Vec<Array2<f64>> {
        let bsz = flat.nrows();
        self.layout
            .groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let mut arr = Array2::zeros((bsz * g.token_count, g.token_len));
                for bi in 0..bsz {
                    for ti in 0..g.token_count {
                        let from = self.entry_base[gi] + ti * g.token_len;
                        arr.row_mut(bi * g.token_count + ti)
                            .assign(&flat.slice(s![bi, from..from + g.token_len]));
                    }
                }
                arr
            })
            .collect()
    }

    /// Predicts clean tokens from noised tokens plus conditioning.
    ///
    /// `data` selects the weights (current or EMA); `xt` is `[batch,
    /// entry_count]`; `context` is the clean current parameters for
    /// variant 1. Returns the `[batch, entry_count]` prediction and the
    /// cache [`DiT::backward`] needs.
    pub fn forward(
        &self,
        data: &[f64],
        xt: &Array2<f64>,
        context: Option<&Array2<f64>>,
        cond: &CondBatch,
    ) -> Result<(Array2<f64>, DiTCache)> {
        let bsz = self.check_inputs(xt, context, cond)?;
        let width = self.config.model_width;
        let seq = self.seq.seq_len;
        let m = self.config.num_classes;
        let mut x = Array2::zeros((bsz * seq, width));

        // Timestep token.
        let t_feats = self.featurize(cond.t.iter().map(|&t| t as f64), ScalarKind::Timestep)?;
        let t_out = self.t_proj.forward(data, &t_feats);
        for bi in 0..bsz {
            x.row_mut(bi * seq + self.seq.t_pos).assign(&t_out.row(bi));
        }

        // Loss tokens: variant 1 interleaves current then target per sample;
        // variant 2 has target only.
        let loss_positions: Vec<usize> = match self.config.variant {
            Variant::V1 => {
                let cur = self.seq.current_loss_start.unwrap();
                (0..m).map(|c| cur + c).chain((0..m).map(|c| self.seq.target_loss_start + c)).collect()
            }
            Variant::V2 => (0..m).map(|c| self.seq.target_loss_start + c).collect(),
        };
        let p = loss_positions.len();
        let mut loss_values = Vec::with_capacity(bsz * p);
        for bi in 0..bsz {
            if let Some(cur) = &cond.current_losses {
                for c in 0..m {
                    loss_values.push(cur[[bi, c]]);
                }
            }
            for c in 0..m {
                loss_values.push(cond.target_losses[[bi, c]]);
            }
        }
        let loss_feats = self.featurize(loss_values.into_iter(), ScalarKind::Loss)?;
        let loss_out = self.loss_proj.forward(data, &loss_feats);
        for bi in 0..bsz {
            for (pi, &pos) in loss_positions.iter().enumerate() {
                x.row_mut(bi * seq + pos).assign(&loss_out.row(bi * p + pi));
            }
        }

        // Delta tokens (variant 1): target minus current, per class.
        let delta_feats = if let (Some(proj), Some(cur)) = (&self.delta_proj, &cond.current_losses)
        {
            let ds = self.seq.delta_start.unwrap();
            let mut vals = Vec::with_capacity(bsz * m);
            for bi in 0..bsz {
                for c in 0..m {
                    vals.push(cond.target_losses[[bi, c]] - cur[[bi, c]]);
                }
            }
            let feats = self.featurize(vals.into_iter(), ScalarKind::LossDelta)?;
            let out = proj.forward(data, &feats);
            for bi in 0..bsz {
                for c in 0..m {
                    x.row_mut(bi * seq + ds + c).assign(&out.row(bi * m + c));
                }
            }
            Some(feats)
        } else {
            None
        };

        // Clean current-parameter tokens (variant 1).
        let context_groups = if let (Some(encs), Some(ctx)) = (&self.context_enc, context) {
            let cs = self.seq.context_start.unwrap();
            let groups = self.group_arrays(ctx);
            for (gi, g) in self.layout.groups.iter().enumerate() {
                let out = encs[gi].forward(data, &groups[gi]);
                for bi in 0..bsz {
                    for ti in 0..g.token_count {
                        x.row_mut(bi * seq + cs + self.token_base[gi] + ti)
                            .assign(&out.row(bi * g.token_count + ti));
                    }
                }
            }
            Some(groups)
        } else {
            None
        };

        // Noised future-parameter tokens.
        let noised_groups = self.group_arrays(xt);
        for (gi, g) in self.layout.groups.iter().enumerate() {
            let out = self.noised_enc[gi].forward(data, &noised_groups[gi]);
            for bi in 0..bsz {
                for ti in 0..g.token_count {
                    x.row_mut(bi * seq + self.seq.noised_start + self.token_base[gi] + ti)
                        .assign(&out.row(bi * g.token_count + ti));
                }
            }
        }

        // Learned positional embeddings.
        let pos = self.pos_emb.view(data);
        for bi in 0..bsz {
            for si in 0..seq {
                let mut row = x.row_mut(bi * seq + si);
                row += &pos.row(si);
            }
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(data, &x, bsz, seq);
            block_caches.push(cache);
            x = next;
        }
        let (x_ln, final_ln_cache) = self.final_ln.forward(data, &x);

        // Decode the noised positions back to token space.
        let mut pred = Array2::zeros((bsz, self.entry_count()));
        let mut dec_ins = Vec::with_capacity(self.layout.groups.len());
        for (gi, g) in self.layout.groups.iter().enumerate() {
            let mut dec_in = Array2::zeros((bsz * g.token_count, width));
            for bi in 0..bsz {
                for ti in 0..g.token_count {
                    dec_in
                        .row_mut(bi * g.token_count + ti)
                        .assign(&x_ln.row(bi * seq + self.seq.noised_start + self.token_base[gi] + ti));
                }
            }
            let out = self.decoders[gi].forward(data, &dec_in);
            for bi in 0..bsz {
                for ti in 0..g.token_count {
                    let from = self.entry_base[gi] + ti * g.token_len;
                    pred.slice_mut(s![bi, from..from + g.token_len])
                        .assign(&out.row(bi * g.token_count + ti));
                }
            }
            dec_ins.push(dec_in);
        }
        // Residual connection: variant 1 predicts an update on the clean
        // current parameters.
        if let Some(ctx) = context {
            pred += ctx;
        }

        Ok((
            pred,
            DiTCache {
                batch: bsz,
                t_feats,
                loss_feats,
                delta_feats,
                context_groups,
                noised_groups,
                blocks: block_caches,
                final_ln: final_ln_cache,
                dec_ins,
            },
        ))
    }

    /// Accumulates parameter gradients for `dpred = ∂loss/∂prediction`.
    pub fn backward(
        &self,
        data: &[f64],
        grads: &mut [f64],
        cache: &DiTCache,
        dpred: &Array2<f64>,
    ) -> Result<()> {
        let bsz = cache.batch;
        let width = self.config.model_width;
        let seq = self.seq.seq_len;
        let m = self.config.num_classes;
        if dpred.nrows() != bsz || dpred.ncols() != self.entry_count() {
            return Err(Error::structural("prediction gradient shape mismatch"));
        }

        // Decoders: gradient flows only through the noised positions (the
        // variant-1 residual path ends in input data, not parameters).
        let mut dx = Array2::zeros((bsz * seq, width));
        for (gi, g) in self.layout.groups.iter().enumerate() {
            let mut dout = Array2::zeros((bsz * g.token_count, g.token_len));
            for bi in 0..bsz {
                for ti in 0..g.token_count {
                    let from = self.entry_base[gi] + ti * g.token_len;
                    dout.row_mut(bi * g.token_count + ti)
                        .assign(&dpred.slice(s![bi, from..from + g.token_len]));
                }
            }
            let din = self.decoders[gi].backward(data, grads, &cache.dec_ins[gi], &dout);
            for bi in 0..bsz {
                for ti in 0..g.token_count {
                    let mut row =
                        dx.row_mut(bi * seq + self.seq.noised_start + self.token_base[gi] + ti);
                    row += &din.row(bi * g.token_count + ti);
                }
            }
        }

        let mut dx = self.final_ln.backward(data, grads, &cache.final_ln, &dx);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = block.backward(data, grads, bc, &dx, bsz, seq);
        }

        // Positional embeddings: summed over the batch at each position.
        {
            let gp = &mut grads[self.pos_emb.offset..self.pos_emb.offset + self.pos_emb.len()];
            for si in 0..seq {
                for bi in 0..bsz {
                    let row = dx.row(bi * seq + si);
                    for (wi, &v) in row.iter().enumerate() {
                        gp[si * width + wi] += v;
                    }
                }
            }
        }

        // Scalar projections.
        let mut dt = Array2::zeros((bsz, width));
        for bi in 0..bsz {
            dt.row_mut(bi).assign(&dx.row(bi * seq + self.seq.t_pos));
        }
        self.t_proj.backward(data, grads, &cache.t_feats, &dt);

        let loss_positions: Vec<usize> = match self.config.variant {
            Variant::V1 => {
                let cur = self.seq.current_loss_start.unwrap();
                (0..m).map(|c| cur + c).chain((0..m).map(|c| self.seq.target_loss_start + c)).collect()
            }
            Variant::V2 => (0..m).map(|c| self.seq.target_loss_start + c).collect(),
        };
        let p = loss_positions.len();
        let mut dloss = Array2::zeros((bsz * p, width));
        for bi in 0..bsz {
            for (pi, &pos) in loss_positions.iter().enumerate() {
                dloss.row_mut(bi * p + pi).assign(&dx.row(bi * seq + pos));
            }
        }
        self.loss_proj.backward(data, grads, &cache.loss_feats, &dloss);

        if let (Some(proj), Some(feats)) = (&self.delta_proj, &cache.delta_feats) {
            let ds = self.seq.delta_start.unwrap();
            let mut dd = Array2::zeros((bsz * m, width));
            for bi in 0..bsz {
                for c in 0..m {
                    dd.row_mut(bi * m + c).assign(&dx.row(bi * seq + ds + c));
                }
            }
            proj.backward(data, grads, feats, &dd);
        }

        // Token encoders.
        if let (Some(encs), Some(groups)) = (&self.context_enc, &cache.context_groups) {
            let cs = self.seq.context_start.unwrap();
            for (gi, g) in self.layout.groups.iter().enumerate() {
                let mut denc = Array2::zeros((bsz * g.token_count, width));
                for bi in 0..bsz {
                    for ti in 0..g.token_count {
                        denc.row_mut(bi * g.token_count + ti)
                            .assign(&dx.row(bi * seq + cs + self.token_base[gi] + ti));
                    }
                }
                encs[gi].backward(data, grads, &groups[gi], &denc);
            }
        }
        for (gi, g) in self.layout.groups.iter().enumerate() {
            let mut denc = Array2::zeros((bsz * g.token_count, width));
            for bi in 0..bsz {
                for ti in 0..g.token_count {
                    denc.row_mut(bi * g.token_count + ti)
                        .assign(&dx.row(bi * seq + self.seq.noised_start + self.token_base[gi] + ti));
                }
            }
            self.noised_enc[gi].backward(data, grads, &cache.noised_groups[gi], &denc);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn tiny_spec() -> MainNetSpec {
        MainNetSpec::new(6, vec![3], 4).unwrap()
    }

    fn tiny_config(variant: Variant) -> DiTConfig {
        DiTConfig {
            model_width: 32,
            depth: 1,
            heads: 4,
            max_token_len: 8,
            diffusion_steps: 10,
            freq_pairs: 4,
            ..DiTConfig::desk_scale(variant, 4)
        }
    }

    fn unit_stats(layout: &TokenLayout) -> NormalizerStats {
        NormalizerStats {
            mean: vec![0.0; layout.groups.len()],
            std: vec![1.0; layout.groups.len()],
        }
    }

    fn tiny_model(variant: Variant, seed: u64) -> DiT {
        let spec = tiny_spec();
        let layout = build_layout(&spec, 8).unwrap();
        DiT::new(tiny_config(variant), &spec, unit_stats(&layout), seed).unwrap()
    }

    fn random_cond(dit: &DiT, rng: &mut ChaCha20Rng, bsz: usize) -> CondBatch {
        let m = dit.config.num_classes;
        CondBatch {
            t: (0..bsz).map(|_| rng.gen_range(1..=dit.config.diffusion_steps)).collect(),
            target_losses: Array2::from_shape_fn((bsz, m), |_| rng.gen_range(0.0..5.0)),
            current_losses: match dit.config.variant {
                Variant::V1 => {
                    Some(Array2::from_shape_fn((bsz, m), |_| rng.gen_range(0.0..5.0)))
                }
                Variant::V2 => None,
            },
        }
    }

    fn random_entries(dit: &DiT, rng: &mut ChaCha20Rng, bsz: usize) -> Array2<f64> {
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((bsz, dit.entry_count()), |_| dist.sample(rng))
    }

    #[test]
    fn sequence_lengths_follow_the_layout() {
        // MNIST-4 architecture: 5 parameter tokens, 4 classes.
        let spec = MainNetSpec::new(784, vec![2], 4).unwrap();
        let layout = build_layout(&spec, 1000).unwrap();
        let stats = unit_stats(&layout);
        let v1 = DiT::new(
            DiTConfig {
                model_width: 32,
                depth: 1,
                heads: 4,
                freq_pairs: 4,
                ..DiTConfig::desk_scale(Variant::V1, 4)
            },
            &spec,
            stats.clone(),
            0,
        )
        .unwrap();
        assert_eq!(v1.seq.seq_len, 1 + 3 * 4 + 2 * 5);
        let v2 = DiT::new(
            DiTConfig {
                model_width: 32,
                depth: 1,
                heads: 4,
                freq_pairs: 4,
                ..DiTConfig::desk_scale(Variant::V2, 4)
            },
            &spec,
            stats,
            0,
        )
        .unwrap();
        assert_eq!(v2.seq.seq_len, 1 + 4 + 5);
    }

    #[test]
    fn fresh_v1_output_is_exactly_the_context() {
        let dit = tiny_model(Variant::V1, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let xt = random_entries(&dit, &mut rng, 3);
        let ctx = random_entries(&dit, &mut rng, 3);
        let cond = random_cond(&dit, &mut rng, 3);
        let (pred, _) = dit.forward(&dit.params, &xt, Some(&ctx), &cond).unwrap();
        assert_eq!(pred, ctx);
    }

    #[test]
    fn fresh_v2_output_is_exactly_zero() {
        let dit = tiny_model(Variant::V2, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let xt = random_entries(&dit, &mut rng, 2);
        let cond = random_cond(&dit, &mut rng, 2);
        let (pred, _) = dit.forward(&dit.params, &xt, None, &cond).unwrap();
        assert!(pred.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_model_and_forward() {
        let a = tiny_model(Variant::V1, 11);
        let b = tiny_model(Variant::V1, 11);
        assert_eq!(a.params, b.params);
        let c = tiny_model(Variant::V1, 12);
        assert_ne!(a.params, c.params);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let xt = random_entries(&a, &mut rng, 2);
        let ctx = random_entries(&a, &mut rng, 2);
        let cond = random_cond(&a, &mut rng, 2);
        let (p1, _) = a.forward(&a.params, &xt, Some(&ctx), &cond).unwrap();
        let (p2, _) = b.forward(&b.params, &xt, Some(&ctx), &cond).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn shape_and_validation_errors() {
        let dit = tiny_model(Variant::V2, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let xt = random_entries(&dit, &mut rng, 2);
        let cond = random_cond(&dit, &mut rng, 2);
        // Wrong entry count → structural error.
        let bad = Array2::zeros((2, dit.entry_count() + 1));
        assert!(dit.forward(&dit.params, &bad, None, &cond).is_err());
        // Out-of-range timestep.
        let mut cond2 = cond.clone();
        cond2.t[0] = dit.config.diffusion_steps + 1;
        assert!(dit.forward(&dit.params, &xt, None, &cond2).is_err());
        // Variant 2 rejects context input.
        assert!(dit.forward(&dit.params, &xt, Some(&xt), &cond).is_err());
        // Prediction shape matches input shape.
        let (pred, _) = dit.forward(&dit.params, &xt, None, &cond).unwrap();
        assert_eq!(pred.dim(), xt.dim());
    }

    #[test]
    fn zero_positional_embeddings_make_same_group_tokens_exchangeable() {
        // With zero positional embeddings, swapping two same-group tokens
        // swaps their outputs and leaves every other output unchanged.
        // (Only true at init; training then breaks the tie via pos_emb.)
        let mut dit = tiny_model(Variant::V2, 21);
        // Give the decoders nonzero weights so outputs reflect the mixing.
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let dist = Normal::new(0.0, 0.5).unwrap();
        for dec in dit.decoders.clone() {
            for i in dec.w.offset..dec.w.offset + dec.w.len() {
                dit.params[i] = dist.sample(&mut rng);
            }
        }
        let xt = random_entries(&dit, &mut rng, 1);
        let cond = random_cond(&dit, &mut rng, 1);
        let (pred, _) = dit.forward(&dit.params, &xt, None, &cond).unwrap();

        // Group 0 of the tiny spec (6→3→4, cap 8) has 3 tokens of length 8.
        let g = &dit.layout.groups[0];
        assert!(g.token_count >= 2);
        let l = g.token_len;
        let mut xt2 = xt.clone();
        for i in 0..l {
            let a = xt[[0, dit.entry_base[0] + i]];
            let b = xt[[0, dit.entry_base[0] + l + i]];
            xt2[[0, dit.entry_base[0] + i]] = b;
            xt2[[0, dit.entry_base[0] + l + i]] = a;
        }
        let (pred2, _) = dit.forward(&dit.params, &xt2, None, &cond).unwrap();
        for i in 0..dit.entry_count() {
            let in_tok0 = i >= dit.entry_base[0] && i < dit.entry_base[0] + l;
            let in_tok1 = i >= dit.entry_base[0] + l && i < dit.entry_base[0] + 2 * l;
            let expect = if in_tok0 {
                pred[[0, i + l]]
            } else if in_tok1 {
                pred[[0, i - l]]
            } else {
                pred[[0, i]]
            };
            assert!(
                (pred2[[0, i]] - expect).abs() < 1e-9,
                "entry {i}: {} vs {}",
                pred2[[0, i]],
                expect
            );
        }
    }

    /// Training-style scalar loss for finite differencing.
    fn mse_loss(
        dit: &DiT,
        data: &[f64],
        xt: &Array2<f64>,
        ctx: Option<&Array2<f64>>,
        cond: &CondBatch,
        x0: &Array2<f64>,
    ) -> f64 {
        let (pred, _) = dit.forward(data, xt, ctx, cond).unwrap();
        (&pred - x0).mapv(|v| v * v).mean().unwrap()
    }

    fn gradient_check(variant: Variant) {
        let mut dit = tiny_model(variant, 31);
        // Move decoders and positional embeddings off their zero init so
        // every parameter influences the loss generically.
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let dist = Normal::new(0.0, 0.1).unwrap();
        for def in dit.schema.defs.clone() {
            if def.name.starts_with("dec") || def.name == "pos_emb" {
                let n: usize = def.shape.iter().product();
                for i in def.offset..def.offset + n {
                    dit.params[i] = dist.sample(&mut rng);
                }
            }
        }
        let bsz = 2;
        let xt = random_entries(&dit, &mut rng, bsz);
        let ctx = match variant {
            Variant::V1 => Some(random_entries(&dit, &mut rng, bsz)),
            Variant::V2 => None,
        };
        let cond = random_cond(&dit, &mut rng, bsz);
        let x0 = random_entries(&dit, &mut rng, bsz);

        let (pred, cache) = dit.forward(&dit.params, &xt, ctx.as_ref(), &cond).unwrap();
        let n = (pred.nrows() * pred.ncols()) as f64;
        let dpred = (&pred - &x0).mapv(|v| 2.0 * v / n);
        let mut grads = vec![0.0; dit.schema.len];
        dit.backward(&dit.params, &mut grads, &cache, &dpred).unwrap();

        // Probe two entries of every tensor.
        let mut data = dit.params.clone();
        let defs = dit.schema.defs.clone();
        for def in &defs {
            let n_el: usize = def.shape.iter().product();
            for &idx in &[def.offset, def.offset + n_el / 2] {
                let eps = 1e-5;
                let orig = data[idx];
                data[idx] = orig + eps;
                let plus = mse_loss(&dit, &data, &xt, ctx.as_ref(), &cond, &x0);
                data[idx] = orig - eps;
                let minus = mse_loss(&dit, &data, &xt, ctx.as_ref(), &cond, &x0);
                data[idx] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads[idx];
                let agree = (analytic - numeric).abs() < 1e-8
                    || (analytic - numeric).abs() / analytic.abs().max(numeric.abs()) < 1e-3;
                assert!(
                    agree,
                    "{} [{idx}]: analytic {analytic} vs numeric {numeric}",
                    def.name
                );
            }
        }
    }

    #[test]
    fn v1_gradients_match_finite_differences() {
        gradient_check(Variant::V1);
    }

    #[test]
    fn v2_gradients_match_finite_differences() {
        gradient_check(Variant::V2);
    }

    #[test]
    fn init_loss_is_permutation_invariant() {
        // Applying one hidden-unit permutation to (θ, θ*, noise) leaves the
        // training loss unchanged: per-group scalar normalization keeps
        // entry values, and the fresh model's prediction is the context
        // (variant 1), so squared errors form the same multiset.
        use crate::zoo::net::{init_params, permute_hidden_units, random_permutations};
        let spec = tiny_spec();
        let layout = build_layout(&spec, 8).unwrap();
        let stats = unit_stats(&layout);
        let dit = DiT::new(tiny_config(Variant::V1), &spec, stats.clone(), 41).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let theta = init_params(&spec, &mut rng);
        let theta_star = init_params(&spec, &mut rng);
        let perms = random_permutations(&spec, &mut rng);
        let theta_p = permute_hidden_units(&theta, &spec, &perms).unwrap();
        let theta_star_p = permute_hidden_units(&theta_star, &spec, &perms).unwrap();

        let loss_for = |a: &[f64], b: &[f64]| -> f64 {
            let at = codec::tokenize(a, &layout, &stats).unwrap().flatten();
            let bt = codec::tokenize(b, &layout, &stats).unwrap().flatten();
            let ctx = Array2::from_shape_vec((1, at.len()), at).unwrap();
            let x0 = Array2::from_shape_vec((1, bt.len()), bt.clone()).unwrap();
            // Noise choice is irrelevant here: the fresh model output is the
            // context regardless of xt.
            let xt = Array2::from_shape_vec((1, bt.len()), bt).unwrap();
            let cond = CondBatch {
                t: vec![1],
                target_losses: Array2::zeros((1, 4)),
                current_losses: Some(Array2::zeros((1, 4))),
            };
            let (pred, _) = dit.forward(&dit.params, &xt, Some(&ctx), &cond).unwrap();
            (&pred - &x0).mapv(|v| v * v).mean().unwrap()
        };
        let base = loss_for(&theta, &theta_star);
        let permuted = loss_for(&theta_p, &theta_star_p);
        assert!(
            (base - permuted).abs() < 1e-5,
            "loss changed under shared permutation: {base} vs {permuted}"
        );
    }
}
