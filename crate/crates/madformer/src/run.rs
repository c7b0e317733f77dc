//! Train, sample and evaluate drivers shared by the CLI and the ablation
//! runner.

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use madformer_core::backbone::Model;
use madformer_core::data::Sample;
use madformer_core::layout::LatentGrid;
use madformer_core::params::ParamStore;
use madformer_core::sampler::{generate, NfeLedger};
use madformer_core::trainer::{channel_mean, holdout_image_mse, HoldoutScore, StepReport, TrainState, Trainer};
use madformer_core::Error;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dump;
use crate::error::{AppError, Result};
use crate::metrics::{frechet_distance, truncate_metrics, FrechetStats, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_EXPORT: &str = "final.ckpt";

pub fn state_file_name(step: u64) -> String {
    format!("ckpt_{step:06}.state")
}

/// Runs training from `state` to `cfg.train.steps`, generating batches on a
/// producer thread at most `train.prefetch` steps ahead. `hook` sees every
/// completed step.
pub fn train_loop(
    cfg: &RunConfig,
    mut state: TrainState,
    mut hook: impl FnMut(&StepReport, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let trainer = Trainer::new(cfg.train.clone(), &cfg.model)?;
    let first = state.step + 1;
    let last = cfg.train.steps;
    if first > last {
        return Ok(state);
    }
    let (tx, rx) = sync_channel::<Vec<Sample>>(cfg.train.prefetch.max(1));
    std::thread::scope(|scope| {
        let producer = &trainer;
        scope.spawn(move || {
            for step in first..=last {
                if tx.send(producer.batch(step)).is_err() {
                    break;
                }
            }
        });
        for _ in first..=last {
            let batch = rx
                .recv()
                .map_err(|_| AppError::Config("batch producer stopped".into()))?;
            let report = trainer.step(&mut state, &batch)?;
            hook(&report, &state)?;
        }
        Ok::<(), AppError>(())
    })?;
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains into `out_dir`: metrics CSV, periodic f64 state checkpoints and a
/// final f32 export. With `resume`, continues from that state checkpoint and
/// appends to the existing CSV.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(AppError::io(out_dir))?;
    let state = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.config.digest() != cfg.model.digest() {
                return Err(AppError::Config(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
            ck.train_state()?
        }
        None => TrainState::new(Model::new(cfg.model.clone(), cfg.train.seed)?),
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    if resume.is_some() {
        truncate_metrics(&metrics_path, state.step)?;
    }
    let mut writer = MetricsWriter::open(&metrics_path, resume.is_some())?;
    let mut checkpoints = Vec::new();
    let every = cfg.train.checkpoint_every;
    let total = cfg.train.steps;
    let mut last_state: Option<TrainState> = None;
    let mut clock = Instant::now();
    let result = train_loop(cfg, state.clone(), |report, st| {
        let wall = if cfg.wall_clock { clock.elapsed().as_millis() } else { 0 };
        writer.write(report, wall)?;
        if (every > 0 && report.step % every == 0) || report.step == total {
            writer.flush()?;
            let path = out_dir.join(state_file_name(report.step));
            checkpoint::save_state(&path, st)?;
            checkpoints.push(path);
        }
        last_state = Some(st.clone());
        clock = Instant::now();
        Ok(())
    });
    writer.flush()?;
    let state = match result {
        Ok(s) => s,
        Err(AppError::Core(Error::NonFiniteLoss(step))) => {
            let dump_path = out_dir.join("nonfinite.state");
            checkpoint::save_state(&dump_path, last_state.as_ref().unwrap_or(&state))?;
            return Err(AppError::Core(Error::NonFiniteLoss(step)));
        }
        Err(e) => return Err(e),
    };
    checkpoint::save_export(&out_dir.join(FINAL_EXPORT), &state)?;
    Ok(TrainOutcome { state, checkpoints })
}

/// Held-out reference samples; their prompts drive generation.
pub fn reference_samples(cfg: &RunConfig, count: usize) -> Result<Vec<Sample>> {
    let trainer = Trainer::new(cfg.train.clone(), &cfg.model)?;
    Ok(trainer.source.holdout(cfg.train.seed, count))
}

/// Generates `count` samples with prompts taken from the held-out set.
pub fn generate_samples(
    cfg: &RunConfig,
    model: &Model,
    ema: Option<&ParamStore>,
    prompts: &[Sample],
    count: usize,
) -> Result<(Vec<LatentGrid>, NfeLedger)> {
    let sched = madformer_core::NoiseSchedule::ddpm_default();
    let mut total = NfeLedger::new(cfg.model.n_layers, cfg.model.diffusion_depth);
    let mut grids = Vec::with_capacity(count);
    for i in 0..count {
        let prompt = &prompts[i % prompts.len()].text_ids;
        let (g, ledger) = generate(model, ema, &cfg.sampler, &sched, prompt, i as u64)?;
        total.merge(&ledger);
        grids.push(g);
    }
    Ok((grids, total))
}

/// Loads a checkpoint (state or export) and writes `count` samples to `out`.
pub fn sample(cfg: &RunConfig, ckpt: &Path, count: usize, out: &Path) -> Result<NfeLedger> {
    let ck = checkpoint::load(ckpt)?;
    let model = ck.model()?;
    let run = RunConfig {
        model: ck.config.clone(),
        ..cfg.clone()
    };
    let prompts = reference_samples(&run, count.max(1))?;
    let (grids, ledger) = generate_samples(&run, &model, ck.section("ema"), &prompts, count)?;
    dump::write_samples(out, &grids)?;
    Ok(ledger)
}

/// Weights to evaluate: the live parameters and their EMA.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: u64,
    pub model: Model,
    pub ema: ParamStore,
}

impl Snapshot {
    pub fn of(state: &TrainState) -> Self {
        Self {
            step: state.step,
            model: state.model.clone(),
            ema: state.ema.clone(),
        }
    }

    /// The weights the sampler would use.
    pub fn sampling_weights(&self, use_ema: bool) -> Result<Model> {
        let p = if use_ema {
            self.ema.clone()
        } else {
            self.model.params.clone()
        };
        Ok(Model::from_params(self.model.config.clone(), p)?)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub steps: Vec<u64>,
    pub frechet: Vec<f64>,
    /// Mean over the evaluated checkpoints.
    pub frechet_mean: f64,
    /// Same protocol with the untrained initialization.
    pub untrained_frechet: f64,
    /// Last checkpoint's held-out denoising MSE vs the channel-mean predictor.
    pub holdout: HoldoutScore,
    /// Forward-pass counts of a single generated sample.
    pub nfe_per_sample: NfeLedger,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let steps: Vec<String> = self.steps.iter().map(u64::to_string).collect();
        let fr: Vec<String> = self.frechet.iter().map(|f| format!("{f:e}")).collect();
        let n = &self.nfe_per_sample;
        format!(
            "checkpoints = {}\nfrechet = {}\nfrechet_mean = {:e}\nuntrained_frechet = {:e}\n\
             holdout_mse = {:e}\nmean_predictor_mse = {:e}\nblock_passes = {}\ndenoise_passes = {}\n\
             raw_nfe = {}\nlayer_weighted_nfe = {}\n",
            steps.join(","),
            fr.join(","),
            self.frechet_mean,
            self.untrained_frechet,
            self.holdout.model_mse,
            self.holdout.mean_predictor_mse,
            n.block_passes,
            n.denoise_passes,
            n.raw_passes(),
            n.layer_weighted(),
        )
    }
}

fn frechet_of(
    cfg: &RunConfig,
    snap: &Snapshot,
    prompts: &[Sample],
    reference: &FrechetStats,
) -> Result<(f64, NfeLedger)> {
    let (grids, ledger) = generate_samples(cfg, &snap.model, Some(&snap.ema), prompts, cfg.eval.samples)?;
    let stats = FrechetStats::from_grids(&grids)?;
    Ok((frechet_distance(&stats, reference)?, ledger))
}

/// Latent Fréchet distance averaged over `snapshots`, the untrained baseline
/// and the held-out MSE of the last snapshot.
pub fn evaluate(cfg: &RunConfig, snapshots: &[Snapshot]) -> Result<EvalReport> {
    let last = snapshots
        .last()
        .ok_or_else(|| AppError::Config("no checkpoints to evaluate".into()))?;
    let reference = reference_samples(cfg, cfg.eval.reference)?;
    let ref_grids: Vec<LatentGrid> = reference.iter().map(|s| s.latent.clone()).collect();
    let ref_stats = FrechetStats::from_grids(&ref_grids)?;
    let mut frechet = Vec::new();
    let mut ledger = NfeLedger::new(cfg.model.n_layers, cfg.model.diffusion_depth);
    for snap in snapshots {
        let (f, l) = frechet_of(cfg, snap, &reference, &ref_stats)?;
        frechet.push(f);
        ledger = l;
    }
    let init = Snapshot::of(&TrainState::new(Model::new(cfg.model.clone(), cfg.train.seed)?));
    let (untrained_frechet, _) = frechet_of(cfg, &init, &reference, &ref_stats)?;
    let sched = madformer_core::NoiseSchedule::ddpm_default();
    let mean = channel_mean(&reference, cfg.model.latent_channels);
    let holdout = holdout_image_mse(
        &last.sampling_weights(cfg.sampler.use_ema)?,
        &reference,
        &sched,
        cfg.train.seed,
        &mean,
    )?;
    let samples = cfg.eval.samples.max(1) as u64;
    let nfe_per_sample = NfeLedger {
        block_passes: ledger.block_passes / samples,
        denoise_passes: ledger.denoise_passes / samples,
        ..ledger
    };
    Ok(EvalReport {
        steps: snapshots.iter().map(|s| s.step).collect(),
        frechet_mean: frechet.iter().sum::<f64>() / frechet.len() as f64,
        frechet,
        untrained_frechet,
        holdout,
        nfe_per_sample,
    })
}

/// State checkpoints in `dir`, oldest first.
pub fn list_state_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(AppError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".state"))
        })
        .collect();
    found.sort();
    Ok(found)
}

/// Evaluates the last `eval.last_checkpoints` state checkpoints in `dir`.
pub fn eval_dir(cfg: &RunConfig, dir: &Path) -> Result<EvalReport> {
    let all = list_state_checkpoints(dir)?;
    if all.is_empty() {
        return Err(AppError::Config(format!("no ckpt_*.state files in {}", dir.display())));
    }
    let keep = all.len().saturating_sub(cfg.eval.last_checkpoints);
    let mut snaps = Vec::new();
    for p in &all[keep..] {
        let ck = checkpoint::load(p)?;
        if ck.config.digest() != cfg.model.digest() {
            return Err(AppError::Config(format!(
                "{} does not match the configured model",
                p.display()
            )));
        }
        let st = ck.train_state()?;
        snaps.push(Snapshot::of(&st));
    }
    evaluate(cfg, &snaps)
}
