//! Sweeps over model, loss and sampler axes; one CSV row per cell.

use std::path::Path;

use madformer_core::backbone::Model;
use madformer_core::config::{MaskMode, TowerMode};
use madformer_core::trainer::TrainState;

use crate::config::{mask_name, towers_name, RunConfig};
use crate::error::{AppError, Result};
use crate::run::{evaluate, train_loop, EvalReport, Snapshot};

pub const SCHEMA_VERSION: u32 = 1;

pub const ABLATION_HEADER: [&str; 25] = [
    "schema_version",
    "cell",
    "seed",
    "n_layers",
    "diffusion_depth",
    "ar_length",
    "clean_blocks",
    "condition",
    "towers",
    "mask_mode",
    "lambda_hidden",
    "lambda_tower",
    "sampler_steps",
    "train_steps",
    "final_total",
    "holdout_mse",
    "mean_predictor_mse",
    "frechet",
    "untrained_frechet",
    "checkpoints",
    "block_passes",
    "denoise_passes",
    "raw_nfe",
    "layer_weighted_nfe",
    "status",
];

/// One point of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub seed: u64,
    pub config: RunConfig,
}

/// DDIM steps per block whose layer-weighted NFE per sample is closest to
/// `budget`, at least 1.
pub fn steps_for_budget(budget: f64, n_layers: usize, depth: usize, ar_length: usize) -> usize {
    let (n, d, l) = (n_layers as f64, depth as f64, ar_length as f64);
    let s = (budget / l - (n - d) / n) * n / d;
    (s.round().max(1.0)) as usize
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// A grid point, or the reason its configuration is invalid.
#[derive(Debug, Clone, PartialEq)]
pub enum Planned {
    Ready(Cell),
    Invalid(Cell, String),
}

impl Planned {
    pub fn cell(&self) -> &Cell {
        match self {
            Planned::Ready(c) | Planned::Invalid(c, _) => c,
        }
    }

    pub fn ready(self) -> Option<Cell> {
        match self {
            Planned::Ready(c) => Some(c),
            Planned::Invalid(..) => None,
        }
    }
}

/// Expands `base.ablate` into cells; invalid combinations are kept and
/// reported when run.
pub fn expand(base: &RunConfig) -> Vec<Planned> {
    let a = &base.ablate;
    let m = &base.model;
    let depths = axis(&a.diffusion_depth, m.diffusion_depth);
    let lengths = axis(&a.ar_length, m.ar_length);
    let cleans = axis(&a.clean_blocks, m.variant.clean_blocks);
    let conds = axis(&a.condition, m.variant.condition);
    let towers = axis(&a.towers, m.towers);
    let masks = axis(&a.mask_mode, m.variant.mask_mode);
    let hiddens = axis(&a.lambda_hidden, base.train.loss.hidden);
    let tower_ws = axis(&a.lambda_tower, base.train.loss.tower);
    let steps = axis(&a.sampler_steps, base.sampler.num_inference_steps);
    let seeds = axis(&a.seeds, base.train.seed);

    let mut cells = Vec::new();
    for &depth in &depths {
        for &len in &lengths {
            for &clean in &cleans {
                for &cond in &conds {
                    for &tw in &towers {
                        for &mask in &masks {
                            for &lh in &hiddens {
                                for &lt in &tower_ws {
                                    for &st in &steps {
                                        for &seed in &seeds {
                                            cells.push(make_cell(
                                                base,
                                                cells.len(),
                                                (depth, len, clean, cond, tw, mask, lh, lt, st, seed),
                                            ));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

type Point = (usize, usize, bool, bool, TowerMode, MaskMode, f64, f64, usize, u64);

fn make_cell(base: &RunConfig, index: usize, p: Point) -> Planned {
    let (depth, len, clean, cond, tw, mask, lh, lt, st, seed) = p;
    let mut c = base.clone();
    c.ablate = Default::default();
    c.model.diffusion_depth = depth;
    c.model.ar_length = len;
    c.model.variant.clean_blocks = clean;
    c.model.variant.condition = cond;
    c.model.towers = tw;
    c.model.variant.mask_mode = mask;
    c.train.loss.hidden = lh;
    c.train.loss.tower = lt;
    c.train.seed = seed;
    c.sampler.seed = seed;
    c.sampler.num_inference_steps = st;
    c.sampler_clean_blocks = None;
    c.sampler_condition = None;
    let mut err = None;
    if let Some(b) = base.ablate.nfe_budget {
        if depth == 0 || len == 0 {
            err = Some("nfe budget needs depth and ar_length >= 1".to_string());
        } else {
            c.sampler.num_inference_steps = steps_for_budget(b, c.model.n_layers, depth, len);
        }
    }
    if err.is_none() {
        if let Err(e) = c.finish() {
            err = Some(e.to_string());
        }
    }
    let cell = Cell { index, seed, config: c };
    match err {
        None => Planned::Ready(cell),
        Some(e) => Planned::Invalid(cell, e),
    }
}

/// Trains a cell in memory and evaluates its last checkpoints.
pub fn run_cell(cell: &Cell) -> Result<(f64, EvalReport)> {
    let cfg = &cell.config;
    let every = cfg.train.checkpoint_every;
    let total = cfg.train.steps;
    let keep = cfg.eval.last_checkpoints;
    let mut snaps: Vec<Snapshot> = Vec::new();
    let mut final_total = f64::NAN;
    let init = TrainState::new(Model::new(cfg.model.clone(), cfg.train.seed)?);
    train_loop(cfg, init, |r, st| {
        if (every > 0 && r.step % every == 0) || r.step == total {
            snaps.push(Snapshot::of(st));
            if snaps.len() > keep {
                snaps.remove(0);
            }
        }
        final_total = r.loss.total;
        Ok(())
    })?;
    Ok((final_total, evaluate(cfg, &snaps)?))
}

fn row(cell: &Cell, outcome: &std::result::Result<(f64, EvalReport), String>) -> Vec<String> {
    let c = &cell.config;
    let m = &c.model;
    let mut r = vec![
        SCHEMA_VERSION.to_string(),
        cell.index.to_string(),
        cell.seed.to_string(),
        m.n_layers.to_string(),
        m.diffusion_depth.to_string(),
        m.ar_length.to_string(),
        m.variant.clean_blocks.to_string(),
        m.variant.condition.to_string(),
        towers_name(m.towers).to_string(),
        mask_name(m.variant.mask_mode).to_string(),
        format!("{:e}", c.train.loss.hidden),
        format!("{:e}", c.train.loss.tower),
        c.sampler.num_inference_steps.to_string(),
        c.train.steps.to_string(),
    ];
    match outcome {
        Ok((total, e)) => {
            let n = &e.nfe_per_sample;
            let steps: Vec<String> = e.steps.iter().map(u64::to_string).collect();
            r.extend([
                format!("{total:e}"),
                format!("{:e}", e.holdout.model_mse),
                format!("{:e}", e.holdout.mean_predictor_mse),
                format!("{:e}", e.frechet_mean),
                format!("{:e}", e.untrained_frechet),
                steps.join(";"),
                n.block_passes.to_string(),
                n.denoise_passes.to_string(),
                n.raw_passes().to_string(),
                format!("{:e}", n.layer_weighted()),
                "ok".to_string(),
            ]);
        }
        Err(msg) => {
            r.extend(std::iter::repeat_n(String::new(), 10));
            r.push(format!("error: {msg}"));
        }
    }
    r
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<(f64, EvalReport), String>,
}

/// Runs every cell in order, writing each row as soon as it finishes. A
/// failing cell is recorded and the sweep continues.
pub fn run_ablation(base: &RunConfig, out: &Path, mut progress: impl FnMut(&CellResult)) -> Result<Vec<CellResult>> {
    let mut w = csv::Writer::from_path(out).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::Io {
            path: out.to_path_buf(),
            source: io,
        },
        other => AppError::Config(format!("{other:?}")),
    })?;
    w.write_record(ABLATION_HEADER)?;
    let mut results = Vec::new();
    for entry in expand(base) {
        let res = match entry {
            Planned::Ready(cell) => {
                let outcome = run_cell(&cell).map_err(|e| e.to_string());
                CellResult { cell, outcome }
            }
            Planned::Invalid(cell, msg) => CellResult {
                cell,
                outcome: Err(msg),
            },
        };
        w.write_record(row(&res.cell, &res.outcome))?;
        w.flush().map_err(AppError::io(out))?;
        progress(&res);
        results.push(res);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_inverts_ledger_formula() {
        // l·(N−D)/N + l·S·D/N with N=8, D=2, l=4, S=5 → 3 + 5 = 8
        assert_eq!(steps_for_budget(8.0, 8, 2, 4), 5);
        assert_eq!(steps_for_budget(0.0, 8, 2, 4), 1);
        assert_eq!(steps_for_budget(4.0 * 6.0, 4, 4, 4), 6);
    }

    #[test]
    fn grid_is_cartesian_product() {
        let mut base = RunConfig::default();
        base.ablate.diffusion_depth = vec![1, 2];
        base.ablate.seeds = vec![0, 1, 2];
        base.ablate.condition = vec![true, false];
        let cells = expand(&base);
        assert_eq!(cells.len(), 12);
        assert!(cells.iter().all(|c| matches!(c, Planned::Ready(_))));
        let c = cells[11].cell();
        assert_eq!(
            (c.config.model.diffusion_depth, c.seed, c.config.model.variant.condition),
            (2, 2, false)
        );
        assert!(!c.config.sampler.condition);
    }

    #[test]
    fn invalid_cells_are_reported() {
        let mut base = RunConfig::default();
        base.ablate.diffusion_depth = vec![1, 99];
        let cells = expand(&base);
        assert!(matches!(cells[0], Planned::Ready(_)));
        assert!(matches!(cells[1], Planned::Invalid(..)));
    }

    #[test]
    fn single_cell_header_and_row_widths() {
        let cell = Cell {
            index: 0,
            seed: 0,
            config: RunConfig::default(),
        };
        assert_eq!(row(&cell, &Err("x".into())).len(), ABLATION_HEADER.len());
    }
}
