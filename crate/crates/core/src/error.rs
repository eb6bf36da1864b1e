use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum IdtError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "transverse sampling violates Nyquist on {axis}: pitch {pitch_um} um exceeds \
         lambda/(4 NA) = {max_pitch_um} um"
    )]
    Nyquist {
        axis: &'static str,
        pitch_um: f64,
        max_pitch_um: f64,
    },

    #[error("LED ({p}, {q}) lies outside the propagating cone: |u| = {u_norm} >= k = {k}")]
    OutsidePropagatingCone { p: i32, q: i32, u_norm: f64, k: f64 },

    #[error("LED ({p}, {q}) is not a brightfield LED: |u| = {u_norm} > NA k0 = {cutoff}")]
    NotBrightfield { p: i32, q: i32, u_norm: f64, cutoff: f64 },

    #[error("no LED falls inside the brightfield cone (NA {na})")]
    EmptyIllumination { na: f64 },

    #[error("ring {ring} holds {available} LEDs but {requested} were requested")]
    RingShortage {
        ring: usize,
        available: usize,
        requested: usize,
    },

    #[error("quadrant {quadrant} holds {available} LEDs but {requested} were requested")]
    QuadrantShortage {
        quadrant: usize,
        available: usize,
        requested: usize,
    },

    #[error("pattern request invalid: {0}")]
    InvalidPattern(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("slice depths must be strictly increasing with uniform spacing dz = {dz}: {detail}")]
    NonUniformSlices { dz: f64, detail: String },

    #[error("background intensity for LED {index} is not positive ({value})")]
    NonPositiveBackground { index: usize, value: f64 },

    #[error("LED ordering mismatch at position {position}: ({expected_p}, {expected_q}) vs ({found_p}, {found_q})")]
    MisalignedLeds {
        position: usize,
        expected_p: i32,
        expected_q: i32,
        found_p: i32,
        found_q: i32,
    },

    #[error(
        "transfer-function stack needs {required} bytes, budget is {budget}; \
         use streamed accumulation (reconstruct) instead"
    )]
    MemoryBudget { required: u64, budget: u64 },

    #[error("regularization parameters must be positive (alpha = {alpha}, beta = {beta})")]
    Regularization { alpha: f64, beta: f64 },

    #[error("reconstruction keeps {relative} relative imaginary energy, limit {limit}")]
    ImaginaryResidual { relative: f64, limit: f64 },

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error("invalid container {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl IdtError {
    /// Stable machine-readable tag, used in CLI error records and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            IdtError::InvalidConfig(_) => "invalid_config",
            IdtError::Nyquist { .. } => "nyquist",
            IdtError::OutsidePropagatingCone { .. } => "outside_propagating_cone",
            IdtError::NotBrightfield { .. } => "not_brightfield",
            IdtError::EmptyIllumination { .. } => "empty_illumination",
            IdtError::RingShortage { .. } => "ring_shortage",
            IdtError::QuadrantShortage { .. } => "quadrant_shortage",
            IdtError::InvalidPattern(_) => "invalid_pattern",
            IdtError::ShapeMismatch(_) => "shape_mismatch",
            IdtError::NonUniformSlices { .. } => "non_uniform_slices",
            IdtError::NonPositiveBackground { .. } => "non_positive_background",
            IdtError::MisalignedLeds { .. } => "misaligned_leds",
            IdtError::MemoryBudget { .. } => "memory_budget",
            IdtError::Regularization { .. } => "regularization",
            IdtError::ImaginaryResidual { .. } => "imaginary_residual",
            IdtError::Phantom(_) => "phantom",
            IdtError::Container { .. } => "container",
            IdtError::Io(_) => "io",
            IdtError::Json(_) => "json",
            IdtError::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, IdtError>;
