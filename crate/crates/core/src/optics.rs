//! Optical configuration, the DFT frequency grid and the objective pupil.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::fft::angular_frequency;

/// Relative slack applied to every cutoff comparison so that points sitting on a
/// circle boundary are classified the same way from either side.
pub(crate) const CUTOFF_SLACK: f64 = 1e-12;

/// Microscope and sampling geometry. Lengths in micrometers, magnification-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOpticalConfig")]
pub struct OpticalConfig {
    wavelength_um: f64,
    na: f64,
    medium_index: f64,
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
}

#[derive(Deserialize)]
struct RawOpticalConfig {
    wavelength_um: f64,
    na: f64,
    medium_index: f64,
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
}

impl TryFrom<RawOpticalConfig> for OpticalConfig {
    type Error = IdtError;

    fn try_from(raw: RawOpticalConfig) -> Result<Self> {
        OpticalConfig::new(
            raw.wavelength_um,
            raw.na,
            raw.medium_index,
            (raw.ny, raw.nx),
            (raw.dy, raw.dx),
        )
    }
}

impl OpticalConfig {
    /// `shape` is `(ny, nx)`, `pitch` is `(dy, dx)`.
    pub fn new(
        wavelength_um: f64,
        na: f64,
        medium_index: f64,
        shape: (usize, usize),
        pitch: (f64, f64),
    ) -> Result<Self> {
        let (ny, nx) = shape;
        let (dy, dx) = pitch;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(IdtError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("wavelength_um", wavelength_um)?;
        positive("medium_index", medium_index)?;
        positive("dx", dx)?;
        positive("dy", dy)?;
        if !(na > 0.0 && na < 1.0) {
            return Err(IdtError::InvalidConfig(format!("NA must lie in (0, 1), got {na}")));
        }
        if na >= medium_index {
            return Err(IdtError::InvalidConfig(format!(
                "NA {na} must stay below the medium index {medium_index}"
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(IdtError::InvalidConfig("grid dimensions must be nonzero".into()));
        }
        let max_pitch = wavelength_um / (4.0 * na);
        for (axis, pitch) in [("x", dx), ("y", dy)] {
            if pitch > max_pitch * (1.0 + CUTOFF_SLACK) {
                return Err(IdtError::Nyquist {
                    axis,
                    pitch_um: pitch,
                    max_pitch_um: max_pitch,
                });
            }
        }
        Ok(Self {
            wavelength_um,
            na,
            medium_index,
            nx,
            ny,
            dx,
            dy,
        })
    }

    /// Same optics on a different grid.
    pub fn with_grid(&self, shape: (usize, usize), pitch: (f64, f64)) -> Result<Self> {
        Self::new(self.wavelength_um, self.na, self.medium_index, shape, pitch)
    }

    pub fn wavelength_um(&self) -> f64 {
        self.wavelength_um
    }
    pub fn na(&self) -> f64 {
        self.na
    }
    pub fn medium_index(&self) -> f64 {
        self.medium_index
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dy(&self) -> f64 {
        self.dy
    }
    /// `(ny, nx)`
    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    /// Free-space wavenumber 2 pi / lambda.
    pub fn k0(&self) -> f64 {
        2.0 * PI / self.wavelength_um
    }

    /// Wavenumber in the medium, n0 k0.
    pub fn k(&self) -> f64 {
        self.medium_index * self.k0()
    }

    /// Background permittivity n0^2.
    pub fn eps0(&self) -> f64 {
        self.medium_index * self.medium_index
    }

    /// Pupil radius NA k0 in rad/um.
    pub fn pupil_cutoff(&self) -> f64 {
        self.na * self.k0()
    }
}

/// Axial frequency sqrt(k^2 - |u|^2), zero on evanescent frequencies.
pub fn axial_frequency(k: f64, ux: f64, uy: f64) -> f64 {
    let s = k * k - (ux * ux + uy * uy);
    if s > 0.0 {
        s.sqrt()
    } else {
        0.0
    }
}

pub(crate) fn within_radius(ux: f64, uy: f64, radius: f64) -> bool {
    ux * ux + uy * uy <= radius * radius * (1.0 + CUTOFF_SLACK)
}

/// Transverse frequencies of the DFT bins plus the matching axial frequencies.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    ux: Vec<f64>,
    uy: Vec<f64>,
    eta: Array2<f64>,
    k: f64,
}

impl FrequencyGrid {
    pub fn new(cfg: &OpticalConfig) -> Self {
        let ux: Vec<f64> = (0..cfg.nx).map(|i| angular_frequency(i, cfg.nx, cfg.dx)).collect();
        let uy: Vec<f64> = (0..cfg.ny).map(|i| angular_frequency(i, cfg.ny, cfg.dy)).collect();
        let k = cfg.k();
        let eta = Array2::from_shape_fn((cfg.ny, cfg.nx), |(iy, ix)| axial_frequency(k, ux[ix], uy[iy]));
        Self { ux, uy, eta, k }
    }

    pub fn ux(&self) -> &[f64] {
        &self.ux
    }
    pub fn uy(&self) -> &[f64] {
        &self.uy
    }
    /// `(uy, ux)` at bin `(iy, ix)`.
    pub fn u(&self, iy: usize, ix: usize) -> (f64, f64) {
        (self.uy[iy], self.ux[ix])
    }
    pub fn eta(&self) -> &Array2<f64> {
        &self.eta
    }
    pub fn k(&self) -> f64 {
        self.k
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.uy.len(), self.ux.len())
    }
    pub fn du(&self) -> (f64, f64) {
        let d = |v: &[f64]| if v.len() > 1 { v[1] } else { 0.0 };
        (d(&self.uy), d(&self.ux))
    }
}

#[derive(Debug, Clone)]
enum PupilKind {
    Ideal,
    Sampled(Array2<Complex64>),
}

/// Objective pupil P(u). The ideal pupil is evaluated analytically, so shifted
/// copies P(u - u_i) are exact for off-grid illumination frequencies.
#[derive(Debug, Clone)]
pub struct Pupil {
    cutoff: f64,
    kind: PupilKind,
    du: (f64, f64),
}

impl Pupil {
    pub fn ideal(cfg: &OpticalConfig) -> Self {
        let grid = FrequencyGrid::new(cfg);
        Self {
            cutoff: cfg.pupil_cutoff(),
            kind: PupilKind::Ideal,
            du: grid.du(),
        }
    }

    /// Tabulated pupil on the DFT grid; off-grid arguments use the nearest bin.
    pub fn from_samples(cfg: &OpticalConfig, values: Array2<Complex64>) -> Result<Self> {
        if values.dim() != cfg.shape() {
            return Err(IdtError::ShapeMismatch(format!(
                "pupil samples {:?} vs grid {:?}",
                values.dim(),
                cfg.shape()
            )));
        }
        if let Some(v) = values.iter().find(|v| v.norm() > 1.0 + 1e-12) {
            return Err(IdtError::InvalidConfig(format!(
                "pupil magnitude {} exceeds 1",
                v.norm()
            )));
        }
        let grid = FrequencyGrid::new(cfg);
        Ok(Self {
            cutoff: cfg.pupil_cutoff(),
            kind: PupilKind::Sampled(values),
            du: grid.du(),
        })
    }

    pub fn is_ideal(&self) -> bool {
        matches!(self.kind, PupilKind::Ideal)
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn eval(&self, ux: f64, uy: f64) -> Complex64 {
        match &self.kind {
            PupilKind::Ideal => {
                if within_radius(ux, uy, self.cutoff) {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }
            PupilKind::Sampled(values) => {
                let (ny, nx) = values.dim();
                let bin = |u: f64, du: f64, n: usize| -> usize {
                    if du == 0.0 {
                        return 0;
                    }
                    (u / du).round().rem_euclid(n as f64) as usize
                };
                values[[bin(uy, self.du.0, ny), bin(ux, self.du.1, nx)]]
            }
        }
    }

    /// Pupil sampled on the DFT grid.
    pub fn values(&self, grid: &FrequencyGrid) -> Array2<Complex64> {
        let (ny, nx) = grid.shape();
        Array2::from_shape_fn((ny, nx), |(iy, ix)| {
            let (uy, ux) = grid.u(iy, ix);
            self.eval(ux, uy)
        })
    }
}
