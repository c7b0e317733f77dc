//! Linear-β DDPM schedule, closed-form forward noising and deterministic DDIM
//! steps for a model that predicts the clean sample.
//!
//! Timesteps are 1-based: `alpha_bar[0] == 1` is a sentinel so that a DDIM
//! jump to `t_prev = 0` lands exactly on the predicted sample.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    /// `beta[t - 1]` is β_t.
    pub beta: Vec<f64>,
    /// `alpha_bar[t]`, with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation per step. Unused by the η = 0 sampler.
    pub sigma: Vec<f64>,
}

pub fn linear_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if train_steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(alloc::format!(
            "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={train_steps}, {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..train_steps)
        .map(|i| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(train_steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    let sigma = (1..=train_steps)
        .map(|t| math::sqrt(beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])))
        .collect();
    Ok(NoiseSchedule {
        train_steps,
        beta,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    /// The 1000-step, 1e-4 → 2e-2 schedule used for training.
    pub fn ddpm_default() -> Self {
        linear_schedule(1000, 1e-4, 2e-2).expect("valid default schedule")
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.train_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.train_steps,
            });
        }
        Ok(())
    }
}

/// A noised sample together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLatent {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`, elementwise.
pub fn noising(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<NoisyLatent> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(shape_err("noising", x0.len(), eps.len()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (math::sqrt(ab), math::sqrt(1.0 - ab));
    Ok(NoisyLatent {
        x_t: x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect(),
        t,
        eps: eps.to_vec(),
    })
}

/// One deterministic DDIM jump from `t` to `t_prev` given the predicted clean
/// sample. The implied noise is recovered from `x_t` and re-applied at the
/// lower noise level.
pub fn ddim_step(x_t: &[f64], x0_hat: &[f64], t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev >= t || t > schedule.train_steps {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    if x_t.len() != x0_hat.len() {
        return Err(shape_err("ddim_step", x_t.len(), x0_hat.len()));
    }
    if t_prev == 0 {
        return Ok(x0_hat.to_vec());
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (sa_t, sb_t) = (math::sqrt(ab_t), 1.0 - ab_t);
    let (sa_p, sb_p) = (math::sqrt(ab_prev), math::sqrt(1.0 - ab_prev));
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(&x, &x0)| {
            let eps = if sb_t < 1e-12 {
                0.0
            } else {
                (x - sa_t * x0) / math::sqrt(sb_t)
            };
            sa_p * x0 + sb_p * eps
        })
        .collect())
}

/// Descending, evenly strided timesteps starting at `T`; the step after the
/// last entry targets `t_prev = 0`.
pub fn spacing(train_steps: usize, num_inference_steps: usize) -> Result<Vec<usize>> {
    if num_inference_steps == 0 || num_inference_steps > train_steps {
        return Err(Error::InvalidCount {
            count: num_inference_steps,
            max: train_steps,
        });
    }
    Ok((0..num_inference_steps)
        .map(|k| (num_inference_steps - k) * train_steps / num_inference_steps)
        .collect())
}

/// `(t, t_prev)` pairs walked by the sampler.
pub fn transitions(timesteps: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    timesteps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, timesteps.get(i + 1).copied().unwrap_or(0)))
}
