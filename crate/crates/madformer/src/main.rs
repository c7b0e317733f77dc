use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use madformer::ablation::run_ablation;
use madformer::config::RunConfig;
use madformer::run;
use madformer::{AppError, Result};
use madformer_core::layout::{build_block_layout, plan_sequence, Role};
use madformer_core::mask::{build_mask, MaskMode};
use madformer_core::schedule::spacing;
use madformer_core::NoiseSchedule;

#[derive(Parser)]
#[command(
    name = "madformer",
    version,
    about = "Hybrid autoregressive/diffusion transformer toolkit"
)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and sampler.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Mlp,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, state checkpoints and final.ckpt.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Continue from a `.state` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint into a dump file (plus a .pgm).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the last checkpoints of a training directory.
    Eval {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the ablation grid from the config's `ablate.*` keys.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the attention mask of a sequence plan.
    MaskDump {
        #[arg(long, default_value_t = 2)]
        ar_length: usize,
        #[arg(long, default_value_t = 2)]
        tokens_per_block: usize,
        /// Include clean blocks in the plan.
        #[arg(long)]
        clean: bool,
        #[arg(long, default_value_t = 0)]
        text_len: usize,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        /// Show text and delimiter rows too (default: image tokens only).
        #[arg(long)]
        with_delimiters: bool,
    },
    /// Print the DDIM timesteps and the schedule at those steps.
    ScheduleDump {
        #[arg(long, default_value_t = 25)]
        steps: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.finish()?;
            c
        }
    };
    Ok(cfg.with_seed(cli.seed))
}

fn mask_dump(
    ar_length: usize,
    tpb: usize,
    clean: bool,
    text_len: usize,
    mode: Mode,
    with_delimiters: bool,
) -> Result<String> {
    if ar_length == 0 || tpb == 0 {
        return Err(AppError::Config("ar-length and tokens-per-block must be >= 1".into()));
    }
    let layout = build_block_layout(1, ar_length * tpb, ar_length)?;
    let plan = plan_sequence(&layout, text_len, clean);
    let mode = match mode {
        Mode::Full => MaskMode::Full,
        Mode::Mlp => MaskMode::MlpAblation,
    };
    let mask = build_mask(&plan, mode);
    let tokens: Vec<usize> = (0..plan.len())
        .filter(|&t| with_delimiters || matches!(plan.role(t), Role::CleanBlock(_) | Role::NoisyBlock(_)))
        .collect();
    Ok(mask.render(&tokens))
}

fn schedule_dump(steps: usize) -> Result<String> {
    let s = NoiseSchedule::ddpm_default();
    let ts = spacing(s.train_steps, steps)?;
    let list: Vec<String> = ts.iter().map(usize::to_string).collect();
    let mut out = format!("[{}]\n", list.join(","));
    out.push_str("t,beta,alpha_bar,sigma\n");
    for &t in &ts {
        out.push_str(&format!(
            "{t},{:e},{:e},{:e}\n",
            s.beta[t - 1],
            s.alpha_bar[t],
            s.sigma[t - 1]
        ));
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MaskDump {
            ar_length,
            tokens_per_block,
            clean,
            text_len,
            mode,
            with_delimiters,
        } => {
            load_config(&cli)?;
            print!(
                "{}",
                mask_dump(
                    *ar_length,
                    *tokens_per_block,
                    *clean,
                    *text_len,
                    *mode,
                    *with_delimiters
                )?
            );
        }
        Command::ScheduleDump { steps } => {
            load_config(&cli)?;
            print!("{}", schedule_dump(*steps)?);
        }
        Command::Train { out, resume } => {
            let cfg = load_config(&cli)?;
            let outcome = run::train(&cfg, out, resume.as_deref())?;
            println!(
                "trained to step {} ({} checkpoints), checksum {:016x}",
                outcome.state.step,
                outcome.checkpoints.len(),
                outcome.state.checksum()
            );
        }
        Command::Sample { checkpoint, count, out } => {
            let cfg = load_config(&cli)?;
            let ledger = run::sample(&cfg, checkpoint, *count, out)?;
            println!(
                "wrote {count} samples to {}; block_passes={} denoise_passes={} layer_weighted={}",
                out.display(),
                ledger.block_passes,
                ledger.denoise_passes,
                ledger.layer_weighted()
            );
        }
        Command::Eval { dir } => {
            let cfg = load_config(&cli)?;
            let report = run::eval_dir(&cfg, dir)?;
            let text = report.to_text();
            let path = dir.join("eval.txt");
            std::fs::write(&path, &text).map_err(AppError::io(&path))?;
            print!("{text}");
        }
        Command::Ablate { out } => {
            let cfg = load_config(&cli)?;
            let results = run_ablation(&cfg, out, |r| match &r.outcome {
                Ok((_, e)) => eprintln!("cell {}: frechet {:.4}", r.cell.index, e.frechet_mean),
                Err(msg) => eprintln!("cell {}: {msg}", r.cell.index),
            })?;
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} cells, {failed} failed; results in {}", results.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
