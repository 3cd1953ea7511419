//! DDPM noise schedules with fixed posterior variances.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`. The forward process is
//! `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`; the reverse step uses the closed-form
//! posterior mean of `q(x_{t−1} | x_t, x0)` with the model's x0 prediction
//! plugged in, and the schedule's fixed variance. At `t = 1` the posterior
//! mean collapses to the prediction itself, so the loop ends on a clean
//! estimate.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine,
}

impl ScheduleKind {
    pub fn default_linear() -> ScheduleKind {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Precomputed β/α/ᾱ tables for one schedule; all vectors are indexed by
/// `t − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DDPMSchedule {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Fixed reverse-step variances `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub posterior_var: Vec<f64>,
}

impl DDPMSchedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<DDPMSchedule> {
        if t_max == 0 {
            return Err(Error::config("diffusion needs at least one step"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear { beta_start, beta_end } => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::config("linear schedule needs 0 < start <= end < 1"));
                }
                if t_max == 1 {
                    vec![beta_start]
                } else {
                    (0..t_max)
                        .map(|i| {
                            beta_start
                                + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                        })
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                // Squared-cosine ᾱ ramp with the customary 0.008 offset;
                // betas are recovered from consecutive ᾱ ratios and capped
                // below 1 so every α stays positive.
                let s = 0.008;
                let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=t_max)
                    .map(|t| {
                        let ab = f(t as f64 / t_max as f64) / f0;
                        let beta = (1.0 - ab / prev).clamp(1e-8, 0.999);
                        prev = ab;
                        beta
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_var: Vec<f64> = (0..t_max)
            .map(|i| {
                let ab_prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - ab_prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(DDPMSchedule {
            kind,
            t_max,
            betas,
            alphas,
            alpha_bars,
            posterior_var,
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::config(format!(
                "timestep {t} outside [1, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ of the previous step, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Noises `x0` to step `t`: `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn q_sample(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != noise.len() {
            return Err(Error::structural("noise shape does not match x0"));
        }
        let ab = self.alpha_bar(t);
        let (ca, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(noise)
            .map(|(&x, &n)| ca * x + cn * n)
            .collect())
    }

    /// Posterior mean of `q(x_{t−1} | x_t, x̂0)`.
    pub fn posterior_mean(&self, x_hat0: &[f64], x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x_hat0.len() != x_t.len() {
            return Err(Error::structural("prediction shape does not match x_t"));
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        let beta = self.betas[t - 1];
        let alpha = self.alphas[t - 1];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok(x_hat0
            .iter()
            .zip(x_t)
            .map(|(&x0, &xt)| c0 * x0 + ct * xt)
            .collect())
    }

    /// Full reverse loop from pure noise; `denoise(x_t, t)` returns the
    /// model's x0 prediction. Deterministic given the RNG state.
    pub fn p_sample_loop(
        &self,
        len: usize,
        mut denoise: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let mut x: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for t in (1..=self.t_max).rev() {
            let x_hat0 = denoise(&x, t)?;
            if x_hat0.len() != len {
                return Err(Error::structural("denoiser changed the token length"));
            }
            let mut mean = self.posterior_mean(&x_hat0, &x, t)?;
            if t > 1 {
                let sigma = self.posterior_var[t - 1].sqrt();
                for v in &mut mean {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            x = mean;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn alpha_bars_strictly_decrease() {
        for kind in [ScheduleKind::default_linear(), ScheduleKind::Cosine] {
            let s = DDPMSchedule::new(kind, 1000).unwrap();
            assert!(s.alpha_bars[0] > 0.99, "first alpha-bar {}", s.alpha_bars[0]);
            for w in s.alpha_bars.windows(2) {
                assert!(w[1] < w[0]);
            }
            assert!(*s.alpha_bars.last().unwrap() > 0.0);
            assert!(s.betas.iter().all(|&b| 0.0 < b && b < 1.0));
        }
    }

    #[test]
    fn early_step_barely_perturbs() {
        let s = DDPMSchedule::new(ScheduleKind::default_linear(), 1000).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x0: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x1 = s.q_sample(&x0, 1, &noise).unwrap();
        let max_abs = x0
            .iter()
            .zip(&x1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_abs < 0.05, "t=1 moved unit-scale input by {max_abs}");
    }

    #[test]
    fn terminal_step_is_standard_normal() {
        let s = DDPMSchedule::new(ScheduleKind::default_linear(), 1000).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = 1_000_000;
        let x0: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let xt = s.q_sample(&x0, 1000, &noise).unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        let s = DDPMSchedule::new(ScheduleKind::default_linear(), 100).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 200_000;
        for t in [1, 25, 50, 100] {
            let x0: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let xt = s.q_sample(&x0, t, &noise).unwrap();
            let mean = xt.iter().sum::<f64>() / n as f64;
            let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let expect = s.alpha_bar(t) * 1.0 + (1.0 - s.alpha_bar(t));
            assert!((var - expect).abs() < 0.02, "t={t}: {var} vs {expect}");
        }
    }

    #[test]
    fn t_out_of_range_rejected() {
        let s = DDPMSchedule::new(ScheduleKind::default_linear(), 10).unwrap();
        let x = vec![0.0; 4];
        assert!(s.q_sample(&x, 0, &x).is_err());
        assert!(s.q_sample(&x, 11, &x).is_err());
        assert!(s.q_sample(&x, 5, &x[..3]).is_err());
    }

    #[test]
    fn loop_is_seed_deterministic() {
        let s = DDPMSchedule::new(ScheduleKind::default_linear(), 50).unwrap();
        let denoise = |x_t: &[f64], _t: usize| Ok(x_t.iter().map(|v| v * 0.5).collect());
        let mut rng_a = ChaCha20Rng::seed_from_u64(7);
        let mut rng_b = ChaCha20Rng::seed_from_u64(7);
        let a = s.p_sample_loop(16, denoise, &mut rng_a).unwrap();
        let b = s.p_sample_loop(16, denoise, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_loop_returns_the_prediction() {
        let s = DDPMSchedule::new(ScheduleKind::default_linear(), 1).unwrap();
        let denoise = |_: &[f64], t: usize| {
            assert_eq!(t, 1);
            Ok(vec![3.25; 8])
        };
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let out = s.p_sample_loop(8, denoise, &mut rng).unwrap();
        for v in out {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_oracle_denoiser_converges() {
        for kind in [ScheduleKind::default_linear(), ScheduleKind::Cosine] {
            let s = DDPMSchedule::new(kind, 250).unwrap();
            let target = 1.75;
            let denoise = |_: &[f64], _t: usize| Ok(vec![target; 32]);
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            let out = s.p_sample_loop(32, denoise, &mut rng).unwrap();
            for v in out {
                assert!((v - target).abs() < 1e-3, "converged to {v}, wanted {target}");
            }
        }
    }
}
