//! Intensity simulation under tilted plane-wave illumination.
//!
//! Every path works in the illumination frame: the physical field at the
//! focal plane is `exp(-i u_i . x) psi(x)`, so `psi` stays periodic on the
//! grid even when `u_i` is not a DFT frequency. Bin `v` of `psi`'s spectrum
//! carries the physical frequency `v - u_i`. Intensities are unaffected by the
//! carrier.

mod born;
mod multislice;

pub use born::{born_scattered_field, simulate_intensity_born, simulate_intensity_linear};
pub use multislice::{multislice_exit_field, simulate_intensity_multislice, MultisliceOptions, ScatteringOperator};

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::fft::Fft2;
use crate::illumination::{IlluminationSet, Led};
use crate::optics::{axial_frequency, FrequencyGrid, OpticalConfig};

/// Relative tolerance on slice spacing checks.
const SPACING_TOL: f64 = 1e-9;

/// Complex permittivity contrast `delta_eps = re + i im` sampled on slices.
///
/// Slices are uniformly spaced; the spacing is an integer multiple of the
/// quadrature thickness `dz` (equal to it for a dense stack, larger for a
/// sparse set of thin layers).
#[derive(Debug, Clone, PartialEq)]
pub struct PermittivityVolume {
    delta_eps: Array3<Complex64>,
    slice_z: Vec<f64>,
    dz: f64,
}

impl PermittivityVolume {
    /// `delta_eps` has shape `(n_slices, ny, nx)`.
    pub fn new(delta_eps: Array3<Complex64>, slice_z: Vec<f64>, dz: f64) -> Result<Self> {
        check_slices(&slice_z, dz)?;
        if delta_eps.len_of(Axis(0)) != slice_z.len() {
            return Err(IdtError::ShapeMismatch(format!(
                "{} slabs for {} slice depths",
                delta_eps.len_of(Axis(0)),
                slice_z.len()
            )));
        }
        if delta_eps.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(IdtError::InvalidConfig("permittivity contrast must be finite".into()));
        }
        Ok(Self { delta_eps, slice_z, dz })
    }

    pub fn zeros(shape: (usize, usize), slice_z: Vec<f64>, dz: f64) -> Result<Self> {
        let n = slice_z.len();
        Self::new(Array3::zeros((n, shape.0, shape.1)), slice_z, dz)
    }

    pub fn n_slices(&self) -> usize {
        self.slice_z.len()
    }
    pub fn shape(&self) -> (usize, usize) {
        let d = self.delta_eps.dim();
        (d.1, d.2)
    }
    pub fn slice_z(&self) -> &[f64] {
        &self.slice_z
    }
    pub fn dz(&self) -> f64 {
        self.dz
    }
    pub fn delta_eps(&self) -> &Array3<Complex64> {
        &self.delta_eps
    }
    pub fn slice(&self, m: usize) -> ArrayView2<'_, Complex64> {
        self.delta_eps.index_axis(Axis(0), m)
    }
    pub fn slice_mut(&mut self, m: usize) -> ArrayViewMut2<'_, Complex64> {
        self.delta_eps.index_axis_mut(Axis(0), m)
    }
    pub fn real_part(&self, m: usize) -> Array2<f64> {
        self.slice(m).mapv(|v| v.re)
    }
    pub fn imag_part(&self, m: usize) -> Array2<f64> {
        self.slice(m).mapv(|v| v.im)
    }
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            delta_eps: self.delta_eps.mapv(|v| v * factor),
            slice_z: self.slice_z.clone(),
            dz: self.dz,
        }
    }
    pub fn is_passive(&self) -> bool {
        self.delta_eps.iter().all(|v| v.im >= 0.0)
    }

    pub(crate) fn check_grid(&self, cfg: &OpticalConfig) -> Result<()> {
        if self.shape() != cfg.shape() {
            return Err(IdtError::ShapeMismatch(format!(
                "volume is {:?}, grid is {:?}",
                self.shape(),
                cfg.shape()
            )));
        }
        Ok(())
    }
}

/// Validates strictly increasing, uniform depths whose step is a whole number
/// of `dz`.
pub fn check_slices(slice_z: &[f64], dz: f64) -> Result<()> {
    let fail = |detail: String| Err(IdtError::NonUniformSlices { dz, detail });
    if !(dz > 0.0 && dz.is_finite()) {
        return fail("dz must be positive".into());
    }
    if slice_z.is_empty() {
        return fail("no slices".into());
    }
    if slice_z.iter().any(|z| !z.is_finite()) {
        return fail("non-finite depth".into());
    }
    if slice_z.len() < 2 {
        return Ok(());
    }
    let step = slice_z[1] - slice_z[0];
    if step <= 0.0 {
        return fail(format!("depths not increasing ({} then {})", slice_z[0], slice_z[1]));
    }
    let ratio = step / dz;
    if (ratio - ratio.round()).abs() > SPACING_TOL * ratio.max(1.0) || ratio.round() < 1.0 {
        return fail(format!("step {step} is not a whole multiple of dz"));
    }
    for (m, w) in slice_z.windows(2).enumerate() {
        let s = w[1] - w[0];
        if (s - step).abs() > SPACING_TOL * step.abs().max(1.0) {
            return fail(format!("step {s} between slices {m} and {} differs from {step}", m + 1));
        }
    }
    Ok(())
}

/// Origin of an intensity stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    BornSim,
    MultisliceSim,
    External,
}

/// Additive white Gaussian noise applied after simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sigma: f64,
    pub seed: u64,
}

/// Per-LED intensity images, index-aligned with `illum`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityDataset {
    images: Vec<Array2<f64>>,
    background: Option<Vec<f64>>,
    illum: IlluminationSet,
    cfg: OpticalConfig,
    provenance: Provenance,
    noise: Option<NoiseRecord>,
}

impl IntensityDataset {
    /// Validates shapes, nonnegative finite images and positive backgrounds.
    pub fn new(
        images: Vec<Array2<f64>>,
        background: Option<Vec<f64>>,
        illum: IlluminationSet,
        cfg: OpticalConfig,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.len() != illum.len() {
            return Err(IdtError::ShapeMismatch(format!(
                "{} images for {} LEDs",
                images.len(),
                illum.len()
            )));
        }
        for (l, img) in images.iter().enumerate() {
            if img.dim() != cfg.shape() {
                return Err(IdtError::ShapeMismatch(format!(
                    "image {l} is {:?}, grid is {:?}",
                    img.dim(),
                    cfg.shape()
                )));
            }
            if img.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(IdtError::InvalidConfig(format!(
                    "image {l} holds negative or non-finite intensities"
                )));
            }
        }
        if let Some(bg) = &background {
            if bg.len() != images.len() {
                return Err(IdtError::ShapeMismatch(format!(
                    "{} backgrounds for {} images",
                    bg.len(),
                    images.len()
                )));
            }
            for (index, &value) in bg.iter().enumerate() {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(IdtError::NonPositiveBackground { index, value });
                }
            }
        }
        Ok(Self {
            images,
            background,
            illum,
            cfg,
            provenance,
            noise: None,
        })
    }

    /// Simulation output; skips the nonnegativity check since the first-order
    /// model can dip below zero for strong objects.
    pub(crate) fn simulated(
        images: Vec<Array2<f64>>,
        background: Vec<f64>,
        illum: &IlluminationSet,
        cfg: &OpticalConfig,
        provenance: Provenance,
    ) -> Self {
        Self {
            images,
            background: Some(background),
            illum: illum.clone(),
            cfg: cfg.clone(),
            provenance,
            noise: None,
        }
    }

    pub(crate) fn from_parts(
        images: Vec<Array2<f64>>,
        background: Option<Vec<f64>>,
        illum: IlluminationSet,
        cfg: OpticalConfig,
        provenance: Provenance,
        noise: Option<NoiseRecord>,
    ) -> Self {
        Self {
            images,
            background,
            illum,
            cfg,
            provenance,
            noise,
        }
    }

    pub fn images(&self) -> &[Array2<f64>] {
        &self.images
    }
    pub fn background(&self) -> Option<&[f64]> {
        self.background.as_deref()
    }
    pub fn illumination(&self) -> &IlluminationSet {
        &self.illum
    }
    pub fn config(&self) -> &OpticalConfig {
        &self.cfg
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn noise(&self) -> Option<NoiseRecord> {
        self.noise
    }
    pub fn len(&self) -> usize {
        self.images.len()
    }
    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Same images for a subset of LED positions.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let illum = self.illum.select(positions)?;
        Ok(Self {
            images: positions.iter().map(|&i| self.images[i].clone()).collect(),
            background: self
                .background
                .as_ref()
                .map(|bg| positions.iter().map(|&i| bg[i]).collect()),
            illum,
            cfg: self.cfg.clone(),
            provenance: self.provenance,
            noise: self.noise,
        })
    }

    /// Adds zero-mean Gaussian noise of standard deviation `sigma` and clips at
    /// zero. Each LED draws from its own stream, so the result does not depend
    /// on scheduling.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(IdtError::InvalidConfig(format!("noise sigma {sigma} is invalid")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| IdtError::InvalidConfig(format!("noise: {e}")))?;
        let images = self
            .images
            .iter()
            .enumerate()
            .map(|(l, img)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(l as u64);
                img.mapv(|v| (v + normal.sample(&mut rng)).max(0.0))
            })
            .collect();
        Ok(Self {
            images,
            noise: Some(NoiseRecord { sigma, seed }),
            ..self.clone()
        })
    }
}

/// Axial frequencies `eta(v - u_i)` of the illumination-frame grid.
pub(crate) fn shifted_eta(grid: &FrequencyGrid, u_i: [f64; 2]) -> Array2<f64> {
    let k = grid.k();
    Array2::from_shape_fn(grid.shape(), |(iy, ix)| {
        let (uy, ux) = grid.u(iy, ix);
        axial_frequency(k, ux - u_i[0], uy - u_i[1])
    })
}

/// Carrier `exp(-i u_i . x)` on the sample grid.
pub(crate) fn carrier(cfg: &OpticalConfig, u_i: [f64; 2]) -> Array2<Complex64> {
    Array2::from_shape_fn(cfg.shape(), |(iy, ix)| {
        let (x, y) = (ix as f64 * cfg.dx(), iy as f64 * cfg.dy());
        Complex64::from_polar(1.0, -(u_i[0] * x + u_i[1] * y))
    })
}

/// Illumination-frame propagation: multiplies the spectrum by
/// `exp(i eta(v - u_i) d)` and zeros evanescent bins.
pub(crate) fn propagate_spectrum(spec: &mut Array2<Complex64>, eta: &Array2<f64>, d: f64) {
    ndarray::Zip::from(spec).and(eta).for_each(|s, &e| {
        *s = if e > 0.0 {
            *s * Complex64::from_polar(1.0, e * d)
        } else {
            Complex64::new(0.0, 0.0)
        };
    });
}

/// Angular-spectrum propagation of a field sampled on the grid by `distance`
/// (um). Evanescent components are removed.
pub fn angular_spectrum_propagate(
    field: &Array2<Complex64>,
    distance: f64,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
) -> Result<Array2<Complex64>> {
    if !distance.is_finite() {
        return Err(IdtError::InvalidConfig(format!("propagation distance {distance}")));
    }
    if field.dim() != cfg.shape() || grid.shape() != cfg.shape() {
        return Err(IdtError::ShapeMismatch(format!(
            "field {:?} vs grid {:?}",
            field.dim(),
            cfg.shape()
        )));
    }
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let mut spec = field.clone();
    fft.forward(&mut spec);
    propagate_spectrum(&mut spec, grid.eta(), distance);
    fft.inverse(&mut spec);
    Ok(spec)
}

pub(crate) fn check_leds(illum: &IlluminationSet, cfg: &OpticalConfig) -> Result<()> {
    illum.check_brightfield(cfg)
}

pub(crate) fn background_of(led: &Led, p_back: Complex64) -> f64 {
    led.source_intensity * p_back.norm_sqr()
}
