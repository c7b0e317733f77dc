//! Block-autoregressive generation.
//!
//! For each block: one context pass appends the prompt (block 0) or the
//! previous block's content to the cache and yields the block's condition;
//! then a deterministic DDIM loop runs only the diffusion layers against the
//! cached context. The final prediction is fed back as context for the next
//! block.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{ContextState, Model};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::layout::{join_blocks, BlockLayout, LatentBlock, LatentGrid, SequencePlan};
use crate::params::ParamStore;
use crate::rng::{normals, stream, Role};
use crate::schedule::{ddim_step, spacing, transitions, NoiseSchedule};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// DDIM steps per block.
    pub num_inference_steps: usize,
    pub use_ema: bool,
    pub seed: u64,
    pub clean_blocks: bool,
    pub condition: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_inference_steps: 25,
            use_ema: true,
            seed: 0,
            clean_blocks: true,
            condition: true,
        }
    }
}

/// Forward-pass counts of one generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NfeLedger {
    /// Context passes through the autoregressive layers.
    pub block_passes: u64,
    /// Denoiser evaluations through the diffusion layers.
    pub denoise_passes: u64,
    pub n_layers: u64,
    pub diffusion_depth: u64,
}

impl NfeLedger {
    pub fn new(n_layers: usize, diffusion_depth: usize) -> Self {
        Self {
            n_layers: n_layers as u64,
            diffusion_depth: diffusion_depth as u64,
            ..Self::default()
        }
    }

    pub fn raw_passes(&self) -> u64 {
        self.block_passes + self.denoise_passes
    }

    /// `block_passes·(N−D) + denoise_passes·D` over `N`, as an exact fraction.
    pub fn layer_weighted_fraction(&self) -> (u64, u64) {
        let (n, d) = (self.n_layers, self.diffusion_depth);
        (self.block_passes * (n - d) + self.denoise_passes * d, n)
    }

    pub fn layer_weighted(&self) -> f64 {
        let (num, den) = self.layer_weighted_fraction();
        num as f64 / den as f64
    }

    pub fn merge(&mut self, other: &NfeLedger) {
        self.block_passes += other.block_passes;
        self.denoise_passes += other.denoise_passes;
    }
}

/// What the sampling loop needs from a model.
pub trait Denoiser {
    fn layout(&self) -> &BlockLayout;
    fn latent_channels(&self) -> usize;
    /// `(N, D)` for NFE accounting.
    fn depth(&self) -> (usize, usize);
    /// Context pass before block `block`: the prompt for block 0, block
    /// `block − 1`'s content otherwise. Returns the block's condition.
    fn context_pass(&mut self, block: usize, prev: Option<&Matrix>) -> Result<Option<Matrix>>;
    /// Predicted clean latent of `block` from `x_t`.
    fn denoise(&mut self, block: usize, x_t: &Matrix, t: usize, cond: Option<&Matrix>) -> Result<Matrix>;
}

/// Incrementally built autoregressive state for one sample. Blocks must be
/// pushed in order; editing a block drops everything after it.
#[derive(Debug, Clone)]
pub struct ConditionCache<'m> {
    model: &'m Model,
    state: ContextState,
    prompt: Vec<usize>,
    /// Blocks whose content is in the cache.
    pushed: usize,
    started: bool,
}

impl<'m> ConditionCache<'m> {
    pub fn new(model: &'m Model, plan: &SequencePlan, prompt: &[usize]) -> Self {
        Self {
            model,
            state: ContextState::new(model, plan),
            prompt: prompt.to_vec(),
            pushed: 0,
            started: false,
        }
    }

    pub fn state(&self) -> &ContextState {
        &self.state
    }

    fn start(&mut self) -> Result<()> {
        if !self.started {
            let rows: Vec<usize> = (0..=self.state.plan().boi()).collect();
            self.model.extend_context(&mut self.state, &rows, &self.prompt, None)?;
            self.started = true;
        }
        Ok(())
    }

    /// Appends block `block`'s content. `block` must be the next one.
    pub fn push_block(&mut self, block: usize, content: &Matrix) -> Result<()> {
        self.start()?;
        if block != self.pushed {
            return Err(Error::CacheInvalidation(format!(
                "expected block {}, got {block}",
                self.pushed
            )));
        }
        let plan = self.state.plan().clone();
        if block >= plan.ar_length {
            return Err(Error::CacheInvalidation(format!("block {block} out of range")));
        }
        let rows: Vec<usize> = plan.content_block_positions(block).collect();
        self.model
            .extend_context(&mut self.state, &rows, &self.prompt, Some(content))?;
        self.pushed += 1;
        Ok(())
    }

    /// Replaces block `block`'s content, discarding every later block.
    pub fn edit_block(&mut self, block: usize, content: &Matrix) -> Result<()> {
        if block >= self.pushed {
            return Err(Error::CacheInvalidation(format!("block {block} was never pushed")));
        }
        let from = self.state.plan().content_block_positions(block).start;
        self.state.truncate_from(self.model, from);
        self.pushed = block;
        self.push_block(block, content)
    }

    /// Condition of `block`; needs exactly the blocks before it.
    pub fn condition(&mut self, block: usize) -> Result<Option<Matrix>> {
        self.start()?;
        if block > self.pushed {
            return Err(Error::CacheInvalidation(format!(
                "condition for block {block} needs blocks up to {}, only {} cached",
                block - 1,
                self.pushed
            )));
        }
        self.model.condition_from_state(&self.state, block)
    }
}

/// A model (with sampler flags applied) driving [`generate_with`].
pub struct ModelDenoiser<'m> {
    layout: BlockLayout,
    cache: ConditionCache<'m>,
}

impl<'m> ModelDenoiser<'m> {
    pub fn new(model: &'m Model, prompt: &[usize]) -> Result<Self> {
        let plan = model.plan(prompt.len())?;
        if let Some(&bad) = prompt.iter().find(|&&id| id >= model.config.plain_vocab()) {
            return Err(shape_err("prompt id", model.config.plain_vocab(), bad));
        }
        Ok(Self {
            layout: model.config.layout()?,
            cache: ConditionCache::new(model, &plan, prompt),
        })
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    fn latent_channels(&self) -> usize {
        self.cache.model.config.latent_channels
    }

    fn depth(&self) -> (usize, usize) {
        let c = &self.cache.model.config;
        (c.n_layers, c.diffusion_depth)
    }

    fn context_pass(&mut self, block: usize, prev: Option<&Matrix>) -> Result<Option<Matrix>> {
        match prev {
            Some(content) => self.cache.push_block(block - 1, content)?,
            None => self.cache.start()?,
        }
        self.cache.condition(block)
    }

    fn denoise(&mut self, block: usize, x_t: &Matrix, t: usize, cond: Option<&Matrix>) -> Result<Matrix> {
        self.cache.model.denoise_forward(&self.cache.state, block, x_t, t, cond)
    }
}

/// The sampling loop over any [`Denoiser`]. `sample_index` selects the
/// initial-noise stream.
pub fn generate_with<D: Denoiser>(
    den: &mut D,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    sample_index: u64,
) -> Result<(LatentGrid, NfeLedger)> {
    let timesteps = spacing(schedule.train_steps, cfg.num_inference_steps)?;
    let layout = den.layout().clone();
    let (n, d) = den.depth();
    let mut ledger = NfeLedger::new(n, d);
    let tpb = layout.tokens_per_block();
    let c = den.latent_channels();
    let mut blocks: Vec<LatentBlock> = Vec::with_capacity(layout.ar_length);
    for i in 0..layout.ar_length {
        let prev = blocks.last().map(|b| &b.values);
        let cond = den.context_pass(i, prev)?;
        ledger.block_passes += 1;
        let mut rng = stream(cfg.seed, sample_index, Role::SampleNoise, i as u64);
        let mut x = Matrix::from_vec(tpb, c, normals(&mut rng, tpb * c))?;
        for (t, t_prev) in transitions(&timesteps) {
            let x0 = den.denoise(i, &x, t, cond.as_ref())?;
            ledger.denoise_passes += 1;
            x = Matrix::from_vec(tpb, c, ddim_step(&x.data, &x0.data, t, t_prev, schedule)?)?;
        }
        blocks.push(LatentBlock {
            values: x,
            block_index: i,
        });
    }
    Ok((join_blocks(&blocks, &layout)?, ledger))
}

/// A copy of `model` with the sampler's flags and, when requested, the EMA
/// weights.
pub fn sampling_model(model: &Model, ema: Option<&ParamStore>, cfg: &SamplerConfig) -> Result<Model> {
    let mut config: ModelConfig = model.config.clone();
    config.variant.clean_blocks = cfg.clean_blocks;
    config.variant.condition = cfg.condition;
    let params = match (cfg.use_ema, ema) {
        (true, Some(e)) => e.clone(),
        (true, None) => return Err(Error::InvalidConfig("use_ema set but no EMA weights given".into())),
        (false, _) => model.params.clone(),
    };
    Model::from_params(config, params)
}

/// Generates one sample from a prompt.
pub fn generate(
    model: &Model,
    ema: Option<&ParamStore>,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    prompt: &[usize],
    sample_index: u64,
) -> Result<(LatentGrid, NfeLedger)> {
    if cfg.num_inference_steps == 0 {
        return Err(Error::InvalidCount {
            count: 0,
            max: schedule.train_steps,
        });
    }
    let m = sampling_model(model, ema, cfg)?;
    let mut den = ModelDenoiser::new(&m, prompt)?;
    generate_with(&mut den, cfg, schedule, sample_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::backbone::{ModelInputs, ParamVars};
    use crate::config::{TowerMode, Variant};
    use crate::layout::build_block_layout;
    use crate::mask::MaskMode;
    use alloc::vec;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            diffusion_depth: 2,
            hidden_width: 8,
            n_heads: 2,
            ffn_width: 12,
            latent_channels: 2,
            text_vocab: 6,
            max_text_len: 1,
            grid_h: 4,
            grid_w: 4,
            ar_length: 4,
            towers: TowerMode::Separate,
            time_dim: 4,
            init_std: 0.3,
            variant,
            ..ModelConfig::default()
        }
    }

    fn block(seed: u64) -> Matrix {
        let mut rng = stream(seed, 0, Role::Probe, 0);
        Matrix::from_vec(4, 2, normals(&mut rng, 8)).unwrap()
    }

    /// Always predicts a fixed per-block mean.
    struct MeanOracle {
        layout: BlockLayout,
        means: Vec<Matrix>,
    }

    impl Denoiser for MeanOracle {
        fn layout(&self) -> &BlockLayout {
            &self.layout
        }
        fn latent_channels(&self) -> usize {
            2
        }
        fn depth(&self) -> (usize, usize) {
            (4, 2)
        }
        fn context_pass(&mut self, _: usize, _: Option<&Matrix>) -> Result<Option<Matrix>> {
            Ok(None)
        }
        fn denoise(&mut self, block: usize, _: &Matrix, _: usize, _: Option<&Matrix>) -> Result<Matrix> {
            Ok(self.means[block].clone())
        }
    }

    #[test]
    fn oracle_denoiser_returns_block_means() {
        let layout = build_block_layout(4, 4, 4).unwrap();
        let means: Vec<Matrix> = (0..4).map(|i| block(i + 1)).collect();
        let sched = NoiseSchedule::ddpm_default();
        for steps in [1, 4, 50] {
            let mut oracle = MeanOracle {
                layout: layout.clone(),
                means: means.clone(),
            };
            let cfg = SamplerConfig {
                num_inference_steps: steps,
                ..SamplerConfig::default()
            };
            let (grid, ledger) = generate_with(&mut oracle, &cfg, &sched, 0).unwrap();
            let blocks = crate::layout::split_blocks(&grid, &layout).unwrap();
            for (b, m) in blocks.iter().zip(&means) {
                assert_eq!(&b.values, m);
            }
            assert_eq!((ledger.block_passes, ledger.denoise_passes), (4, 4 * steps as u64));
        }
    }

    #[test]
    fn ledger_examples() {
        let l1 = NfeLedger {
            block_passes: 1,
            denoise_passes: 7,
            n_layers: 4,
            diffusion_depth: 2,
        };
        assert_eq!(l1.raw_passes(), 8);
        assert_eq!(l1.layer_weighted_fraction(), (2 + 7 * 2, 4));
        let s = 10;
        let full = NfeLedger {
            block_passes: 16,
            denoise_passes: 16 * s,
            n_layers: 28,
            diffusion_depth: 28,
        };
        assert_eq!(full.layer_weighted(), 16.0 * s as f64);
        let split = NfeLedger {
            diffusion_depth: 7,
            ..full
        };
        assert!((split.layer_weighted() - 16.0 * (21.0 / 28.0 + 7.0 * s as f64 / 28.0)).abs() < 1e-12);
        assert!(split.layer_weighted() <= split.raw_passes() as f64);
    }

    #[test]
    fn generation_is_deterministic_and_counts_passes() {
        let model = Model::new(tiny(Variant::default()), 1).unwrap();
        let cfg = SamplerConfig {
            num_inference_steps: 3,
            use_ema: false,
            seed: 9,
            ..SamplerConfig::default()
        };
        let sched = NoiseSchedule::ddpm_default();
        let (a, la) = generate(&model, None, &cfg, &sched, &[2], 0).unwrap();
        let (b, lb) = generate(&model, None, &cfg, &sched, &[2], 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!((la.block_passes, la.denoise_passes), (4, 12));
        let (c, _) = generate(&model, None, &cfg, &sched, &[2], 1).unwrap();
        assert_ne!(a, c);
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert!(generate(&model, None, &SamplerConfig { use_ema: true, ..cfg }, &sched, &[2], 0).is_err());
        assert!(generate(&model, None, &cfg, &sched, &[4], 0).is_err());
    }

    fn full_conditions(model: &Model, plan: &SequencePlan, prompt: &[usize], blocks: &[Matrix]) -> Vec<Matrix> {
        let inputs = ModelInputs {
            text_ids: prompt.to_vec(),
            content: blocks.to_vec(),
            noisy: blocks.to_vec(),
            timesteps: vec![500; blocks.len()],
        };
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(model);
        let out = model.full_forward(&mut tape, &mut pv, plan, &inputs).unwrap();
        out.cond_hidden.iter().map(|&v| tape.value(v).clone()).collect()
    }

    #[test]
    fn cache_matches_recompute() {
        for clean_blocks in [true, false] {
            let model = Model::new(
                tiny(Variant {
                    clean_blocks,
                    condition: true,
                    mask_mode: MaskMode::Full,
                }),
                2,
            )
            .unwrap();
            let plan = model.plan(1).unwrap();
            let blocks: Vec<Matrix> = (0..4).map(|i| block(10 + i)).collect();
            let reference = full_conditions(&model, &plan, &[1], &blocks);
            let mut cache = ConditionCache::new(&model, &plan, &[1]);
            for i in 0..4 {
                let c = cache.condition(i).unwrap().unwrap();
                assert!(
                    c.max_abs_diff(&reference[i]) < 1e-6 * (1.0 + c.data.iter().fold(0.0f64, |a, v| a.max(v.abs())))
                );
                let mut fresh = ConditionCache::new(&model, &plan, &[1]);
                for (j, b) in blocks.iter().enumerate().take(i) {
                    fresh.push_block(j, b).unwrap();
                }
                assert_eq!(fresh.condition(i).unwrap().unwrap(), c);
                if i < 3 {
                    cache.push_block(i, &blocks[i]).unwrap();
                }
            }
        }
    }

    #[test]
    fn cache_contract() {
        let model = Model::new(tiny(Variant::default()), 2).unwrap();
        let plan = model.plan(1).unwrap();
        let blocks: Vec<Matrix> = (0..4).map(|i| block(20 + i)).collect();
        let mut cache = ConditionCache::new(&model, &plan, &[0]);
        assert!(matches!(
            cache.push_block(1, &blocks[1]),
            Err(Error::CacheInvalidation(_))
        ));
        for (i, b) in blocks.iter().enumerate().take(3) {
            cache.push_block(i, b).unwrap();
        }
        let before = cache.condition(2).unwrap();
        cache.edit_block(1, &blocks[3]).unwrap();
        assert!(matches!(cache.condition(3), Err(Error::CacheInvalidation(_))));
        let after = cache.condition(2).unwrap();
        assert_ne!(before, after);
        let mut fresh = ConditionCache::new(&model, &plan, &[0]);
        fresh.push_block(0, &blocks[0]).unwrap();
        fresh.push_block(1, &blocks[3]).unwrap();
        assert_eq!(fresh.condition(2).unwrap(), after);
    }

    #[test]
    fn condition_flag_zeroes_injection() {
        let model = Model::new(tiny(Variant::default()), 3).unwrap();
        let cfg = SamplerConfig {
            condition: false,
            use_ema: false,
            ..SamplerConfig::default()
        };
        let m = sampling_model(&model, None, &cfg).unwrap();
        let plan = m.plan(1).unwrap();
        let mut cache = ConditionCache::new(&m, &plan, &[0]);
        assert!(cache.condition(0).unwrap().is_none());
    }
}
