//! Core of a hybrid autoregressive/diffusion transformer for block-partitioned
//! image latents.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece of the
//! model: block layouts and sequence plans, the hybrid attention mask, the DDPM
//! schedule with deterministic DDIM steps, a small tape-based reverse-mode
//! autodiff engine, the transformer backbone with modality towers, the four-term
//! objective, optimizer/EMA/learning-rate math, a synthetic latent generator and
//! the block-autoregressive sampler.
//!
//! File formats, the training driver and the command line live in the
//! `madformer` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod layout;
pub mod linalg;
pub mod mask;
pub mod math;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rope;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use config::{MaskMode, ModelConfig, TowerMode, Variant};
pub use error::{Error, Result};
pub use layout::{BlockLayout, LatentBlock, LatentGrid, SequencePlan};
pub use mask::AttentionMask;
pub use schedule::NoiseSchedule;
pub use tensor::Matrix;
