//! Slice-wise intensity diffraction tomography.
//!
//! Simulates angled-illumination intensity images of a complex permittivity
//! volume (first-Born and multislice) and recovers phase and absorption slices
//! from intensity-only stacks with a closed-form, per-slice Tikhonov solve.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod fft;
pub mod forward;
pub mod illumination;
pub mod io;
pub mod metrics;
pub mod optics;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod transfer;

pub use error::{IdtError, Result};
pub use illumination::{
    led_to_frequency, pattern_pseudorandom, pattern_symmetric, select_brightfield, IlluminationSet, Led, LedArray,
    Pattern,
};
pub use optics::{FrequencyGrid, OpticalConfig, Pupil};
