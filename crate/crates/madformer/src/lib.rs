//! File formats, drivers and the command line around `madformer-core`.
//!
//! - [`config`]: flat `key = value` run configuration
//! - [`checkpoint`]: binary checkpoints with a config digest
//! - [`metrics`]: latent Fréchet distance and the per-step metrics CSV
//! - [`dump`]: sample dumps and PGM previews
//! - [`run`]: train / sample / eval drivers
//! - [`ablation`]: grid sweeps written as CSV

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dump;
pub mod error;
pub mod metrics;
pub mod run;

pub use config::RunConfig;
pub use error::{AppError, Result};
