use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::layout::{build_block_layout, BlockLayout, Role};
pub use crate::mask::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TowerMode {
    /// One parameter set for every token.
    #[default]
    Shared,
    /// Disjoint text, clean-image and noisy-image parameter sets.
    Separate,
}

/// Which parameter set processes a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Text = 0,
    Clean = 1,
    Noise = 2,
}

impl Tower {
    pub const ALL: [Tower; 3] = [Tower::Text, Tower::Clean, Tower::Noise];

    pub fn of(role: Role) -> Tower {
        match role {
            Role::Text | Role::Boi | Role::Eoi => Tower::Text,
            Role::CleanBlock(_) => Tower::Clean,
            Role::NoisyBlock(_) => Tower::Noise,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tower::Text => "text",
            Tower::Clean => "clean",
            Tower::Noise => "noise",
        }
    }
}

/// Architectural switches covered by the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    /// Prepend clean copies of the blocks to the sequence.
    pub clean_blocks: bool,
    /// Add the autoregressive condition to the noisy latents.
    pub condition: bool,
    pub mask_mode: MaskMode,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            clean_blocks: true,
            condition: true,
            mask_mode: MaskMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total decoder layers (N).
    pub n_layers: usize,
    /// Trailing layers run at every denoising step (D).
    pub diffusion_depth: usize,
    pub hidden_width: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub latent_channels: usize,
    /// Includes the two reserved delimiter ids at the top of the range.
    pub text_vocab: usize,
    pub max_text_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Number of blocks (l).
    pub ar_length: usize,
    pub towers: TowerMode,
    pub time_dim: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
    pub init_std: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    /// The small configuration used throughout tests and the default CLI run.
    fn default() -> Self {
        Self {
            n_layers: 4,
            diffusion_depth: 2,
            hidden_width: 32,
            n_heads: 2,
            ffn_width: 64,
            latent_channels: 2,
            text_vocab: 6,
            max_text_len: 1,
            grid_h: 4,
            grid_w: 4,
            ar_length: 4,
            towers: TowerMode::Shared,
            time_dim: 16,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
            init_std: 0.02,
            variant: Variant::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.diffusion_depth == 0 || self.diffusion_depth > self.n_layers {
            return bad(format!(
                "diffusion_depth {} must be in 1..={}",
                self.diffusion_depth, self.n_layers
            ));
        }
        if self.n_heads == 0 || !self.hidden_width.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden_width {} not divisible by n_heads {}",
                self.hidden_width, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(4) {
            return bad(format!("head_dim {} must be divisible by 4", self.head_dim()));
        }
        if self.text_vocab < 3 {
            return bad(format!("text_vocab {} leaves no room beside BOI/EOI", self.text_vocab));
        }
        if self.latent_channels == 0 || self.ffn_width == 0 || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(String::from(
                "latent_channels, ffn_width must be positive and time_dim even",
            ));
        }
        if !(self.init_std > 0.0 && self.rms_eps > 0.0 && self.rope_theta > 1.0) {
            return bad(String::from("init_std, rms_eps must be positive and rope_theta > 1"));
        }
        build_block_layout(self.grid_h, self.grid_w, self.ar_length)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_width / self.n_heads.max(1)
    }

    /// Layers that run once per block (N − D).
    pub fn ar_layers(&self) -> usize {
        self.n_layers - self.diffusion_depth
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        build_block_layout(self.grid_h, self.grid_w, self.ar_length)
    }

    pub fn boi_id(&self) -> usize {
        self.text_vocab - 2
    }

    pub fn eoi_id(&self) -> usize {
        self.text_vocab - 1
    }

    /// Ordinary (non-delimiter) text ids.
    pub fn plain_vocab(&self) -> usize {
        self.text_vocab - 2
    }

    /// Whether the autoregressive condition reaches the denoiser at all.
    pub fn conditions_active(&self) -> bool {
        self.variant.condition && self.ar_layers() > 0
    }

    pub fn param_tower(&self, tower: Tower) -> Tower {
        match self.towers {
            TowerMode::Shared => Tower::Text,
            TowerMode::Separate => tower,
        }
    }

    /// Canonical text form; its hash is stored in checkpoint headers.
    pub fn canonical(&self) -> String {
        format!(
            "n_layers={};diffusion_depth={};hidden_width={};n_heads={};ffn_width={};latent_channels={};\
             text_vocab={};max_text_len={};grid={}x{};ar_length={};towers={:?};time_dim={};rope_theta={};\
             rms_eps={};clean_blocks={};condition={};mask_mode={:?}",
            self.n_layers,
            self.diffusion_depth,
            self.hidden_width,
            self.n_heads,
            self.ffn_width,
            self.latent_channels,
            self.text_vocab,
            self.max_text_len,
            self.grid_h,
            self.grid_w,
            self.ar_length,
            self.towers,
            self.time_dim,
            self.rope_theta,
            self.rms_eps,
            self.variant.clean_blocks,
            self.variant.condition,
            self.variant.mask_mode,
        )
    }

    /// 64-bit FNV-1a of [`Self::canonical`].
    pub fn digest(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
