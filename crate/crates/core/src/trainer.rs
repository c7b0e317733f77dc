//! One deterministic training step and the pieces around it.
//!
//! Everything random in a step (batch, per-block timesteps, noise) comes from
//! streams keyed by `(seed, step, role, example)`, so a run resumed from a
//! saved [`TrainState`] retraces the uninterrupted trajectory bit for bit.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::backbone::{text_only_plan, text_targets, Example, Model, ParamVars};
use crate::config::ModelConfig;
use crate::data::{Sample, SyntheticSource, SyntheticSpec};
use crate::error::{shape_err, Error, Result};
use crate::layout::{split_blocks, SequencePlan};
use crate::objectives::{total_loss, LossInputs, LossReport, LossWeights};
use crate::optim::{clip_global_norm, ema_update, wsd_lr, AdamW, Moments};
use crate::params::ParamStore;
use crate::rng::{normals, stream, Role};
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Batches generated ahead of the optimizer.
    pub prefetch: usize,
    /// Train on prompts alone, without image blocks.
    pub text_only: bool,
    pub loss: LossWeights,
    pub data: SyntheticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            peak_lr: 3e-4,
            weight_decay: 0.05,
            warmup_frac: 0.1,
            decay_frac: 0.1,
            ema_decay: 0.9999,
            seed: 0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            checkpoint_every: 50,
            prefetch: 2,
            text_only: false,
            loss: LossWeights::default(),
            data: SyntheticSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.warmup_frac >= 0.0 && self.decay_frac >= 0.0 && self.warmup_frac + self.decay_frac <= 1.0) {
            return bad(alloc::format!(
                "warmup_frac {} + decay_frac {} must lie in [0, 1]",
                self.warmup_frac,
                self.decay_frac
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(alloc::format!("ema_decay {} must be in [0, 1)", self.ema_decay));
        }
        if !(self.peak_lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0 && self.adam_eps > 0.0) {
            return bad("peak_lr, weight_decay must be >= 0 and grad_clip, adam_eps > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must be in [0, 1)".into());
        }
        self.loss.validate()?;
        let d = &self.data;
        if (d.grid_h, d.grid_w, d.channels) != (model.grid_h, model.grid_w, model.latent_channels) {
            return bad(alloc::format!(
                "data grid {}x{}x{} does not match model grid {}x{}x{}",
                d.grid_h,
                d.grid_w,
                d.channels,
                model.grid_h,
                model.grid_w,
                model.latent_channels
            ));
        }
        if d.text_len > model.max_text_len {
            return bad(alloc::format!(
                "data.text_len {} exceeds model.max_text_len {}",
                d.text_len,
                model.max_text_len
            ));
        }
        if d.classes > model.plain_vocab() {
            return bad(alloc::format!(
                "data.classes {} exceeds plain vocabulary {}",
                d.classes,
                model.plain_vocab()
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        wsd_lr(step, self.steps, self.peak_lr, self.warmup_frac, self.decay_frac)
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub ema: ParamStore,
    pub moments: Moments,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self {
            ema: model.params.clone(),
            moments: Moments::zeros_like(model.params.values()),
            model,
            step: 0,
        }
    }

    /// Checksum over parameters, EMA and optimizer moments.
    pub fn checksum(&self) -> u64 {
        let mut h = self.model.params.checksum() ^ self.ema.checksum().rotate_left(17) ^ self.step;
        for (k, m) in self.moments.m.iter().chain(&self.moments.v).enumerate() {
            for x in &m.data {
                h = (h ^ x.to_bits() ^ k as u64).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Splits a sample into model blocks and attaches per-block timesteps and
/// noise drawn from the `(seed, step, ·, index)` streams.
pub fn make_example(
    config: &ModelConfig,
    sample: &Sample,
    schedule: &NoiseSchedule,
    seed: u64,
    step: u64,
    index: u64,
    text_only: bool,
) -> Result<(SequencePlan, Example)> {
    if text_only {
        let plan = text_only_plan(sample.text_ids.len());
        let ex = Example {
            text_ids: sample.text_ids.clone(),
            clean: Vec::new(),
            timesteps: Vec::new(),
            eps: Vec::new(),
        };
        return Ok((plan, ex));
    }
    let layout = config.layout()?;
    let blocks = split_blocks(&sample.latent, &layout)?;
    let mut t_rng = stream(seed, step, Role::Timestep, index);
    let mut e_rng = stream(seed, step, Role::Noise, index);
    let tpb = layout.tokens_per_block();
    let c = config.latent_channels;
    let timesteps = blocks
        .iter()
        .map(|_| t_rng.random_range(1..=schedule.train_steps))
        .collect();
    let eps = blocks
        .iter()
        .map(|_| Matrix::from_vec(tpb, c, normals(&mut e_rng, tpb * c)))
        .collect::<Result<Vec<_>>>()?;
    let plan = crate::layout::plan_sequence(&layout, sample.text_ids.len(), config.variant.clean_blocks);
    let ex = Example {
        text_ids: sample.text_ids.clone(),
        clean: blocks.into_iter().map(|b| b.values).collect(),
        timesteps,
        eps,
    };
    Ok((plan, ex))
}

/// Forward, loss and backward for one example. Returns the loss report and
/// the gradient of the total with respect to every parameter.
pub fn example_loss(
    model: &Model,
    plan: &SequencePlan,
    example: &Example,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Matrix>)> {
    let inputs = example.to_inputs(schedule)?;
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(model);
    let out = model.full_forward(&mut tape, &mut pv, plan, &inputs)?;
    let targets: Vec<usize> = text_targets(plan, &example.text_ids, &model.config)
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let vals = |vs: &[Var], tape: &Tape| -> Vec<Matrix> { vs.iter().map(|&v| tape.value(v).clone()).collect() };
    let z_hat = vals(&out.z_hat, &tape);
    let z_cond = vals(&out.cond_latent, &tape);
    let z_clean = vals(&out.clean_out, &tape);
    let logits = out.text_logits.map(|v| tape.value(v).clone());
    let loss_in = LossInputs {
        text_logits: logits.as_ref(),
        text_targets: &targets,
        z_hat: &z_hat,
        z_image: &example.clean,
        z_cond: &z_cond,
        z_clean: &z_clean,
    };
    let (report, g) = total_loss(&loss_in, weights)?;

    let mut seeds: Vec<(Var, Matrix)> = Vec::new();
    if let (Some(v), Some(gm)) = (out.text_logits, g.text_logits) {
        seeds.push((v, gm));
    }
    seeds.extend(out.z_hat.iter().copied().zip(g.z_hat));
    seeds.extend(out.cond_latent.iter().copied().zip(g.z_cond));
    seeds.extend(out.clean_out.iter().copied().zip(g.z_clean));
    let grads = tape.backward(&seeds);
    let mut full: Vec<Matrix> = model
        .params
        .values()
        .iter()
        .map(|m| Matrix::zeros(m.rows, m.cols))
        .collect();
    for (id, gm) in tape.param_grads(&grads) {
        full[id].add_assign(&gm);
    }
    Ok((report, full))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub source: SyntheticSource,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &ModelConfig) -> Result<Self> {
        model.validate()?;
        config.validate(model)?;
        let source = SyntheticSource::new(config.data.clone(), model.plain_vocab())?;
        Ok(Self {
            config,
            schedule: NoiseSchedule::ddpm_default(),
            source,
        })
    }

    /// The batch consumed by 1-based `step`.
    pub fn batch(&self, step: u64) -> Vec<Sample> {
        self.source.batch(self.config.seed, step, self.config.batch_size)
    }

    /// Runs step `state.step + 1` on `batch` (normally [`Self::batch`]).
    pub fn step(&self, state: &mut TrainState, batch: &[Sample]) -> Result<StepReport> {
        let cfg = &self.config;
        let step = state.step + 1;
        let n = batch.len();
        if n == 0 {
            return Err(shape_err("batch", cfg.batch_size, 0));
        }
        let mut grads: Vec<Matrix> = state
            .model
            .params
            .values()
            .iter()
            .map(|m| Matrix::zeros(m.rows, m.cols))
            .collect();
        let mut sum = LossReport::default();
        for (i, sample) in batch.iter().enumerate() {
            let (plan, ex) = make_example(
                &state.model.config,
                sample,
                &self.schedule,
                cfg.seed,
                step,
                i as u64,
                cfg.text_only,
            )?;
            let (r, g) = example_loss(&state.model, &plan, &ex, &self.schedule, &cfg.loss)?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
            sum.total += r.total;
            sum.text_nll += r.text_nll;
            sum.image_mse += r.image_mse;
            sum.hidden_mse += r.hidden_mse;
            sum.tower_mse += r.tower_mse;
            sum.text_count += r.text_count;
            sum.image_count += r.image_count;
            sum.hidden_count += r.hidden_count;
            sum.tower_count += r.tower_count;
        }
        let inv = 1.0 / n as f64;
        let loss = LossReport {
            total: sum.total * inv,
            text_nll: sum.text_nll * inv,
            image_mse: sum.image_mse * inv,
            hidden_mse: sum.hidden_mse * inv,
            tower_mse: sum.tower_mse * inv,
            ..sum
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        for g in grads.iter_mut() {
            g.scale(inv);
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        cfg.optimizer()
            .step(state.model.params.values_mut(), &grads, &mut state.moments, step, lr)?;
        ema_update(state.ema.values_mut(), state.model.params.values(), cfg.ema_decay)?;
        state.step = step;
        Ok(StepReport {
            step,
            lr,
            loss,
            grad_norm,
        })
    }
}

/// Held-out image MSE of `model` against the MSE of always predicting
/// `mean` (per channel). Timesteps and noise come from the holdout streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutScore {
    pub model_mse: f64,
    pub mean_predictor_mse: f64,
}

pub fn holdout_image_mse(
    model: &Model,
    samples: &[Sample],
    schedule: &NoiseSchedule,
    seed: u64,
    mean: &[f64],
) -> Result<HoldoutScore> {
    let c = model.config.latent_channels;
    if mean.len() != c {
        return Err(shape_err("channel mean", c, mean.len()));
    }
    let weights = LossWeights {
        text: 0.0,
        image: 1.0,
        hidden: 0.0,
        tower: 0.0,
    };
    let (mut model_sum, mut mean_sum, mut count) = (0.0, 0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let (plan, ex) = make_example(&model.config, s, schedule, seed, u64::MAX, i as u64, false)?;
        let inputs = ex.to_inputs(schedule)?;
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(model);
        let out = model.full_forward(&mut tape, &mut pv, &plan, &inputs)?;
        let z_hat: Vec<Matrix> = out.z_hat.iter().map(|&v| tape.value(v).clone()).collect();
        let loss_in = LossInputs {
            text_logits: None,
            text_targets: &[],
            z_hat: &z_hat,
            z_image: &ex.clean,
            z_cond: &[],
            z_clean: &[],
        };
        let (r, _) = total_loss(&loss_in, &weights)?;
        model_sum += r.image_mse * r.image_count as f64;
        count += r.image_count;
        for b in &ex.clean {
            for (k, v) in b.data.iter().enumerate() {
                let d = v - mean[k % c];
                mean_sum += d * d;
            }
        }
    }
    let n = count.max(1) as f64;
    Ok(HoldoutScore {
        model_mse: model_sum / n,
        mean_predictor_mse: mean_sum / n,
    })
}

/// Per-channel mean over a set of samples.
pub fn channel_mean(samples: &[Sample], channels: usize) -> Vec<f64> {
    let mut sum = alloc::vec![0.0; channels];
    let mut n = 0usize;
    for s in samples {
        for (k, v) in s.latent.data.iter().enumerate() {
            sum[k % channels] += v;
        }
        n += s.latent.data.len() / channels;
    }
    sum.iter().map(|v| v / n.max(1) as f64).collect()
}
