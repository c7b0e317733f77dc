//! Flat `key = value` run configuration.
//!
//! Keys are namespaced by section (`model.`, `train.`, `loss.`, `data.`,
//! `sampler.`, `eval.`, `ablate.`). Blank lines and `#` comments are
//! ignored. Unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use madformer_core::config::{MaskMode, ModelConfig, TowerMode};
use madformer_core::sampler::SamplerConfig;
use madformer_core::trainer::TrainConfig;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Samples generated per evaluated checkpoint.
    pub samples: usize,
    /// Held-out reference samples for the Fréchet statistics and image MSE.
    pub reference: usize,
    /// Fréchet distance is averaged over this many trailing checkpoints.
    pub last_checkpoints: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            reference: 256,
            last_checkpoints: 3,
        }
    }
}

/// Axes swept by the ablation runner; empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationAxes {
    pub diffusion_depth: Vec<usize>,
    pub ar_length: Vec<usize>,
    pub clean_blocks: Vec<bool>,
    pub condition: Vec<bool>,
    pub towers: Vec<TowerMode>,
    pub mask_mode: Vec<MaskMode>,
    pub lambda_hidden: Vec<f64>,
    pub lambda_tower: Vec<f64>,
    pub sampler_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    /// When set, each cell's DDIM step count is chosen so the layer-weighted
    /// NFE per sample is as close as possible to this budget.
    pub nfe_budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Sampler overrides of the model's clean-block/condition flags.
    pub sampler_clean_blocks: Option<bool>,
    pub sampler_condition: Option<bool>,
    pub eval: EvalConfig,
    pub ablate: AblationAxes,
    /// Write real wall-clock times into the metrics CSV (breaks byte-level
    /// reproducibility of the file).
    pub wall_clock: bool,
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_towers(v: &str) -> std::result::Result<TowerMode, String> {
    match v {
        "shared" => Ok(TowerMode::Shared),
        "separate" => Ok(TowerMode::Separate),
        _ => Err(format!("expected shared or separate, got {v:?}")),
    }
}

fn parse_mask(v: &str) -> std::result::Result<MaskMode, String> {
    match v {
        "full" => Ok(MaskMode::Full),
        "mlp" => Ok(MaskMode::MlpAblation),
        _ => Err(format!("expected full or mlp, got {v:?}")),
    }
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

pub fn towers_name(t: TowerMode) -> &'static str {
    match t {
        TowerMode::Shared => "shared",
        TowerMode::Separate => "separate",
    }
}

pub fn mask_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Full => "full",
        MaskMode::MlpAblation => "mlp",
    }
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.sampler;
        let a = &mut self.ablate;
        match key {
            "model.n_layers" => m.n_layers = parse(value)?,
            "model.diffusion_depth" => m.diffusion_depth = parse(value)?,
            "model.hidden_width" => m.hidden_width = parse(value)?,
            "model.n_heads" => m.n_heads = parse(value)?,
            "model.ffn_width" => m.ffn_width = parse(value)?,
            "model.latent_channels" => m.latent_channels = parse(value)?,
            "model.text_vocab" => m.text_vocab = parse(value)?,
            "model.max_text_len" => m.max_text_len = parse(value)?,
            "model.grid_h" => m.grid_h = parse(value)?,
            "model.grid_w" => m.grid_w = parse(value)?,
            "model.ar_length" => m.ar_length = parse(value)?,
            "model.towers" => m.towers = parse_towers(value)?,
            "model.time_dim" => m.time_dim = parse(value)?,
            "model.rope_theta" => m.rope_theta = parse(value)?,
            "model.rms_eps" => m.rms_eps = parse(value)?,
            "model.init_std" => m.init_std = parse(value)?,
            "model.clean_blocks" => m.variant.clean_blocks = parse_bool(value)?,
            "model.condition" => m.variant.condition = parse_bool(value)?,
            "model.mask_mode" => m.variant.mask_mode = parse_mask(value)?,

            "train.steps" => t.steps = parse(value)?,
            "train.batch_size" => t.batch_size = parse(value)?,
            "train.peak_lr" => t.peak_lr = parse(value)?,
            "train.weight_decay" => t.weight_decay = parse(value)?,
            "train.warmup_frac" => t.warmup_frac = parse(value)?,
            "train.decay_frac" => t.decay_frac = parse(value)?,
            "train.ema_decay" => t.ema_decay = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "train.grad_clip" => t.grad_clip = parse(value)?,
            "train.beta1" => t.beta1 = parse(value)?,
            "train.beta2" => t.beta2 = parse(value)?,
            "train.adam_eps" => t.adam_eps = parse(value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(value)?,
            "train.prefetch" => t.prefetch = parse(value)?,
            "train.text_only" => t.text_only = parse_bool(value)?,
            "train.wall_clock" => self.wall_clock = parse_bool(value)?,

            "loss.lambda_text" => t.loss.text = parse(value)?,
            "loss.lambda_image" => t.loss.image = parse(value)?,
            "loss.lambda_hidden" => t.loss.hidden = parse(value)?,
            "loss.lambda_tower" => t.loss.tower = parse(value)?,

            "data.classes" => t.data.classes = parse(value)?,
            "data.corr_length" => t.data.corr_length = parse(value)?,
            "data.noise_floor" => t.data.noise_floor = parse(value)?,
            "data.mean_gap" => t.data.mean_gap = parse(value)?,
            "data.text_len" => t.data.text_len = parse(value)?,

            "sampler.steps" => s.num_inference_steps = parse(value)?,
            "sampler.use_ema" => s.use_ema = parse_bool(value)?,
            "sampler.seed" => s.seed = parse(value)?,
            "sampler.clean_blocks" => self.sampler_clean_blocks = Some(parse_bool(value)?),
            "sampler.condition" => self.sampler_condition = Some(parse_bool(value)?),

            "eval.samples" => self.eval.samples = parse(value)?,
            "eval.reference" => self.eval.reference = parse(value)?,
            "eval.last_checkpoints" => self.eval.last_checkpoints = parse(value)?,

            "ablate.diffusion_depth" => a.diffusion_depth = parse_list(value, parse)?,
            "ablate.ar_length" => a.ar_length = parse_list(value, parse)?,
            "ablate.clean_blocks" => a.clean_blocks = parse_list(value, parse_bool)?,
            "ablate.condition" => a.condition = parse_list(value, parse_bool)?,
            "ablate.towers" => a.towers = parse_list(value, parse_towers)?,
            "ablate.mask_mode" => a.mask_mode = parse_list(value, parse_mask)?,
            "ablate.lambda_hidden" => a.lambda_hidden = parse_list(value, parse)?,
            "ablate.lambda_tower" => a.lambda_tower = parse_list(value, parse)?,
            "ablate.sampler_steps" => a.sampler_steps = parse_list(value, parse)?,
            "ablate.seeds" => a.seeds = parse_list(value, parse)?,
            "ablate.nfe_budget" => a.nfe_budget = Some(parse(value)?),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| AppError::ConfigLine {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Derives dependent fields and validates the whole configuration.
    pub fn finish(&mut self) -> Result<()> {
        let d = &mut self.train.data;
        d.grid_h = self.model.grid_h;
        d.grid_w = self.model.grid_w;
        d.channels = self.model.latent_channels;
        self.sampler.clean_blocks = self.sampler_clean_blocks.unwrap_or(self.model.variant.clean_blocks);
        self.sampler.condition = self.sampler_condition.unwrap_or(self.model.variant.condition);
        self.model.validate().map_err(|e| AppError::Config(e.to_string()))?;
        self.train
            .validate(&self.model)
            .map_err(|e| AppError::Config(e.to_string()))?;
        if self.sampler.num_inference_steps == 0 || self.sampler.num_inference_steps > 1000 {
            return Err(AppError::Config("sampler.steps must be in 1..=1000".into()));
        }
        if self.eval.samples < 2 || self.eval.reference < 2 || self.eval.last_checkpoints == 0 {
            return Err(AppError::Config(
                "eval.samples and eval.reference must be >= 2, eval.last_checkpoints >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Applies a `--seed` override to training and sampling.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.sampler.seed = s;
        }
        self
    }

    /// The `model.` section as config text.
    pub fn model_text(model: &ModelConfig) -> String {
        let m = model;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "model.{k} = {v}");
        };
        put("n_layers", m.n_layers.to_string());
        put("diffusion_depth", m.diffusion_depth.to_string());
        put("hidden_width", m.hidden_width.to_string());
        put("n_heads", m.n_heads.to_string());
        put("ffn_width", m.ffn_width.to_string());
        put("latent_channels", m.latent_channels.to_string());
        put("text_vocab", m.text_vocab.to_string());
        put("max_text_len", m.max_text_len.to_string());
        put("grid_h", m.grid_h.to_string());
        put("grid_w", m.grid_w.to_string());
        put("ar_length", m.ar_length.to_string());
        put("towers", towers_name(m.towers).into());
        put("time_dim", m.time_dim.to_string());
        put("rope_theta", format!("{:?}", m.rope_theta));
        put("rms_eps", format!("{:?}", m.rms_eps));
        put("init_std", format!("{:?}", m.init_std));
        put("clean_blocks", m.variant.clean_blocks.to_string());
        put("condition", m.variant.condition.to_string());
        put("mask_mode", mask_name(m.variant.mask_mode).into());
        out
    }

    /// Parses text produced by [`Self::model_text`].
    pub fn parse_model(text: &str) -> std::result::Result<ModelConfig, String> {
        let mut cfg = RunConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line {line:?}"))?;
            let k = k.trim();
            if !k.starts_with("model.") {
                return Err(format!("unexpected key {k:?}"));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg.model)
    }

    /// Every key with its current value, in file order.
    pub fn to_text(&self) -> String {
        let mut out = Self::model_text(&self.model);
        let t = &self.train;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("train.steps", t.steps.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.peak_lr", format!("{:?}", t.peak_lr));
        put("train.weight_decay", format!("{:?}", t.weight_decay));
        put("train.warmup_frac", format!("{:?}", t.warmup_frac));
        put("train.decay_frac", format!("{:?}", t.decay_frac));
        put("train.ema_decay", format!("{:?}", t.ema_decay));
        put("train.seed", t.seed.to_string());
        put("train.grad_clip", format!("{:?}", t.grad_clip));
        put("train.beta1", format!("{:?}", t.beta1));
        put("train.beta2", format!("{:?}", t.beta2));
        put("train.adam_eps", format!("{:?}", t.adam_eps));
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.prefetch", t.prefetch.to_string());
        put("train.text_only", t.text_only.to_string());
        put("train.wall_clock", self.wall_clock.to_string());
        put("loss.lambda_text", format!("{:?}", t.loss.text));
        put("loss.lambda_image", format!("{:?}", t.loss.image));
        put("loss.lambda_hidden", format!("{:?}", t.loss.hidden));
        put("loss.lambda_tower", format!("{:?}", t.loss.tower));
        put("data.classes", t.data.classes.to_string());
        put("data.corr_length", format!("{:?}", t.data.corr_length));
        put("data.noise_floor", format!("{:?}", t.data.noise_floor));
        put("data.mean_gap", format!("{:?}", t.data.mean_gap));
        put("data.text_len", t.data.text_len.to_string());
        put("sampler.steps", self.sampler.num_inference_steps.to_string());
        put("sampler.use_ema", self.sampler.use_ema.to_string());
        put("sampler.seed", self.sampler.seed.to_string());
        if let Some(v) = self.sampler_clean_blocks {
            put("sampler.clean_blocks", v.to_string());
        }
        if let Some(v) = self.sampler_condition {
            put("sampler.condition", v.to_string());
        }
        put("eval.samples", self.eval.samples.to_string());
        put("eval.reference", self.eval.reference.to_string());
        put("eval.last_checkpoints", self.eval.last_checkpoints.to_string());
        let a = &self.ablate;
        let mut list = |k: &str, v: String| {
            if !v.is_empty() {
                put(k, v);
            }
        };
        list("ablate.diffusion_depth", join(&a.diffusion_depth, |v| v.to_string()));
        list("ablate.ar_length", join(&a.ar_length, |v| v.to_string()));
        list("ablate.clean_blocks", join(&a.clean_blocks, |v| v.to_string()));
        list("ablate.condition", join(&a.condition, |v| v.to_string()));
        list("ablate.towers", join(&a.towers, |v| towers_name(*v).into()));
        list("ablate.mask_mode", join(&a.mask_mode, |v| mask_name(*v).into()));
        list("ablate.lambda_hidden", join(&a.lambda_hidden, |v| format!("{v:?}")));
        list("ablate.lambda_tower", join(&a.lambda_tower, |v| format!("{v:?}")));
        list("ablate.sampler_steps", join(&a.sampler_steps, |v| v.to_string()));
        list("ablate.seeds", join(&a.seeds, |v| v.to_string()));
        if let Some(b) = a.nfe_budget {
            list("ablate.nfe_budget", format!("{b:?}"));
        }
        out
    }
}
