use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("grid {grid_h}x{grid_w} cannot be split into {ar_length} equal rectangular blocks")]
    NonDivisibleGrid {
        grid_h: usize,
        grid_w: usize,
        ar_length: usize,
    },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timesteps must satisfy 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")]
    TimestepOrder { t: usize, t_prev: usize },
    #[error("invalid step count {count} for {max} train timesteps")]
    InvalidCount { count: usize, max: usize },
    #[error("no supervised positions for any weighted loss term")]
    EmptySupervision,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("condition cache: {0}")]
    CacheInvalidation(String),
}

pub(crate) fn shape_err(what: &'static str, expected: impl core::fmt::Debug, found: impl core::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        what,
        expected: alloc::format!("{expected:?}"),
        found: alloc::format!("{found:?}"),
    }
}
