//! Angle-dependent, per-slice phase and absorption transfer functions.
//!
//! For illumination `u_i` and a slice at depth `z`,
//!
//! ```text
//! t1(u) = P*(-u_i) P(u - u_i) exp(-i [eta(u - u_i) - eta_i] z) / eta(u - u_i)
//! t2(u) = P(-u_i) P*(-u - u_i) exp(+i [eta(u + u_i) - eta_i] z) / eta(u + u_i)
//! H_Re  = (i k0^2 / 2) S (t1 - t2)
//! H_Im  = -(k0^2 / 2) S (t1 + t2)
//! ```
//!
//! Shifted pupils are evaluated on the continuous frequency `u -/+ u_i`, so
//! illumination frequencies need not sit on DFT bins. Evanescent arguments
//! (`eta = 0`) contribute nothing.

use std::borrow::Cow;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{IdtError, Result};
use crate::fft::mirror_index;
use crate::illumination::{IlluminationSet, Led};
use crate::optics::{axial_frequency, FrequencyGrid, OpticalConfig, Pupil};

/// Default ceiling for a materialized stack (bytes).
pub const DEFAULT_TF_BUDGET: u64 = 4 << 30;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Per-LED constants shared by every pixel and depth.
#[derive(Debug, Clone, Copy)]
pub struct TfKernel {
    u_i: [f64; 2],
    eta_i: f64,
    p_back: Complex64,
    half_k0_sq_s: f64,
    k: f64,
}

impl TfKernel {
    pub fn new(led: &Led, pupil: &Pupil, cfg: &OpticalConfig) -> Self {
        let k0 = cfg.k0();
        Self {
            u_i: led.u,
            eta_i: led.eta,
            p_back: pupil.eval(-led.u[0], -led.u[1]),
            half_k0_sq_s: 0.5 * k0 * k0 * led.source_intensity,
            k: cfg.k(),
        }
    }

    /// `(H_Re, H_Im)` at transverse frequency `(ux, uy)` and depth `z`.
    #[inline]
    pub fn eval(&self, pupil: &Pupil, ux: f64, uy: f64, z: f64) -> (Complex64, Complex64) {
        let [uix, uiy] = self.u_i;

        let (ax, ay) = (ux - uix, uy - uiy);
        let mut t1 = ZERO;
        let p1 = pupil.eval(ax, ay);
        if p1 != ZERO {
            let eta1 = axial_frequency(self.k, ax, ay);
            if eta1 > 0.0 {
                let phase = Complex64::from_polar(1.0 / eta1, -(eta1 - self.eta_i) * z);
                t1 = self.p_back.conj() * p1 * phase;
            }
        }

        let (bx, by) = (ux + uix, uy + uiy);
        let mut t2 = ZERO;
        let p2 = pupil.eval(-bx, -by);
        if p2 != ZERO {
            let eta2 = axial_frequency(self.k, bx, by);
            if eta2 > 0.0 {
                let phase = Complex64::from_polar(1.0 / eta2, (eta2 - self.eta_i) * z);
                t2 = self.p_back * p2.conj() * phase;
            }
        }

        let c = self.half_k0_sq_s;
        let h_re = Complex64::new(0.0, c) * (t1 - t2);
        let h_im = Complex64::new(-c, 0.0) * (t1 + t2);
        (h_re, h_im)
    }
}

/// `(H_Re, H_Im)` for one LED and one depth on the full grid.
pub fn compute_tf_slice(
    led: &Led,
    z: f64,
    pupil: &Pupil,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
) -> (Array2<Complex64>, Array2<Complex64>) {
    let kernel = TfKernel::new(led, pupil, cfg);
    let shape = grid.shape();
    let mut h_re = Array2::zeros(shape);
    let mut h_im = Array2::zeros(shape);
    for iy in 0..shape.0 {
        for ix in 0..shape.1 {
            let (uy, ux) = grid.u(iy, ix);
            let (r, i) = kernel.eval(pupil, ux, uy, z);
            h_re[[iy, ix]] = r;
            h_im[[iy, ix]] = i;
        }
    }
    (h_re, h_im)
}

/// Per-LED background `I_i = S(u_i) |P(-u_i)|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundIntensity {
    values: Vec<f64>,
}

impl BackgroundIntensity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(IdtError::NonPositiveBackground { index, value });
            }
        }
        Ok(Self { values })
    }

    pub fn from_illumination(illum: &IlluminationSet, pupil: &Pupil) -> Result<Self> {
        Self::new(
            illum
                .leds()
                .iter()
                .map(|l| l.source_intensity * pupil.eval(-l.u[0], -l.u[1]).norm_sqr())
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum TfStorage {
    Dense {
        h_re: Vec<Array2<Complex64>>,
        h_im: Vec<Array2<Complex64>>,
    },
    Lazy {
        illum: IlluminationSet,
        pupil: Pupil,
        grid: FrequencyGrid,
        cfg: OpticalConfig,
    },
}

/// Transfer functions indexed `[led][slice]`, either materialized or produced
/// slab by slab on request (identical values either way).
#[derive(Debug, Clone)]
pub struct TransferFunctionStack {
    storage: TfStorage,
    led_keys: Vec<(i32, i32)>,
    slice_z: Vec<f64>,
    shape: (usize, usize),
    /// Per-LED divisor applied by normalization (1 before).
    divisors: Vec<f64>,
    normalized: bool,
}

impl TransferFunctionStack {
    /// Stack that computes each `(l, m)` slab on demand.
    pub fn lazy(
        illum: &IlluminationSet,
        slice_z: &[f64],
        pupil: &Pupil,
        grid: &FrequencyGrid,
        cfg: &OpticalConfig,
    ) -> Result<Self> {
        check_stack_inputs(illum, slice_z)?;
        Ok(Self {
            storage: TfStorage::Lazy {
                illum: illum.clone(),
                pupil: pupil.clone(),
                grid: grid.clone(),
                cfg: cfg.clone(),
            },
            led_keys: illum.leds().iter().map(Led::key).collect(),
            slice_z: slice_z.to_vec(),
            shape: grid.shape(),
            divisors: vec![1.0; illum.len()],
            normalized: false,
        })
    }

    pub fn n_leds(&self) -> usize {
        self.led_keys.len()
    }
    pub fn n_slices(&self) -> usize {
        self.slice_z.len()
    }
    pub fn slice_z(&self) -> &[f64] {
        &self.slice_z
    }
    pub fn led_keys(&self) -> &[(i32, i32)] {
        &self.led_keys
    }
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
    pub fn is_materialized(&self) -> bool {
        matches!(self.storage, TfStorage::Dense { .. })
    }

    /// `(h_re, h_im)` for LED position `l` and slice `m`.
    pub fn slab(&self, l: usize, m: usize) -> (Cow<'_, Array2<Complex64>>, Cow<'_, Array2<Complex64>>) {
        assert!(l < self.n_leds() && m < self.n_slices(), "slab index out of range");
        match &self.storage {
            TfStorage::Dense { h_re, h_im } => {
                let idx = l * self.slice_z.len() + m;
                (Cow::Borrowed(&h_re[idx]), Cow::Borrowed(&h_im[idx]))
            }
            TfStorage::Lazy {
                illum,
                pupil,
                grid,
                cfg,
            } => {
                let (mut re, mut im) = compute_tf_slice(&illum.leds()[l], self.slice_z[m], pupil, grid, cfg);
                if self.normalized {
                    let d = self.divisors[l];
                    re.mapv_inplace(|v| v / d);
                    im.mapv_inplace(|v| v / d);
                }
                (Cow::Owned(re), Cow::Owned(im))
            }
        }
    }
}

fn check_stack_inputs(illum: &IlluminationSet, slice_z: &[f64]) -> Result<()> {
    if illum.is_empty() || slice_z.is_empty() {
        return Err(IdtError::ShapeMismatch(
            "transfer-function stack needs at least one LED and one slice".into(),
        ));
    }
    if let Some(z) = slice_z.iter().find(|z| !z.is_finite()) {
        return Err(IdtError::InvalidConfig(format!("non-finite slice depth {z}")));
    }
    Ok(())
}

/// Bytes needed to materialize a stack.
pub fn stack_bytes(n_leds: usize, n_slices: usize, shape: (usize, usize)) -> u64 {
    2 * (n_leds * n_slices * shape.0 * shape.1 * std::mem::size_of::<Complex64>()) as u64
}

pub fn compute_tf_stack(
    illum: &IlluminationSet,
    slice_z: &[f64],
    pupil: &Pupil,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
) -> Result<TransferFunctionStack> {
    compute_tf_stack_with_budget(illum, slice_z, pupil, grid, cfg, DEFAULT_TF_BUDGET)
}

/// Materialized stack; fails when it would exceed `budget_bytes`.
pub fn compute_tf_stack_with_budget(
    illum: &IlluminationSet,
    slice_z: &[f64],
    pupil: &Pupil,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
    budget_bytes: u64,
) -> Result<TransferFunctionStack> {
    check_stack_inputs(illum, slice_z)?;
    let required = stack_bytes(illum.len(), slice_z.len(), grid.shape());
    if required > budget_bytes {
        return Err(IdtError::MemoryBudget {
            required,
            budget: budget_bytes,
        });
    }
    let m_count = slice_z.len();
    let (h_re, h_im): (Vec<_>, Vec<_>) = (0..illum.len() * m_count)
        .into_par_iter()
        .map(|idx| {
            let (l, m) = (idx / m_count, idx % m_count);
            compute_tf_slice(&illum.leds()[l], slice_z[m], pupil, grid, cfg)
        })
        .unzip();
    Ok(TransferFunctionStack {
        storage: TfStorage::Dense { h_re, h_im },
        led_keys: illum.leds().iter().map(Led::key).collect(),
        slice_z: slice_z.to_vec(),
        shape: grid.shape(),
        divisors: vec![1.0; illum.len()],
        normalized: false,
    })
}

/// Divides every `[l, m]` slab by the LED background `I_l`.
pub fn normalize_tf(stack: &TransferFunctionStack, bg: &BackgroundIntensity) -> Result<TransferFunctionStack> {
    if stack.normalized {
        return Err(IdtError::InvalidConfig("transfer functions already normalized".into()));
    }
    if bg.values().len() != stack.n_leds() {
        return Err(IdtError::ShapeMismatch(format!(
            "{} backgrounds for {} LEDs",
            bg.values().len(),
            stack.n_leds()
        )));
    }
    let m_count = stack.n_slices();
    let storage = match &stack.storage {
        TfStorage::Dense { h_re, h_im } => {
            let scale = |slabs: &Vec<Array2<Complex64>>| -> Vec<Array2<Complex64>> {
                slabs
                    .par_iter()
                    .enumerate()
                    .map(|(idx, s)| {
                        let d = bg.values()[idx / m_count];
                        s.mapv(|v| v / d)
                    })
                    .collect()
            };
            TfStorage::Dense {
                h_re: scale(h_re),
                h_im: scale(h_im),
            }
        }
        lazy => lazy.clone(),
    };
    Ok(TransferFunctionStack {
        storage,
        led_keys: stack.led_keys.clone(),
        slice_z: stack.slice_z.clone(),
        shape: stack.shape,
        divisors: bg.values().to_vec(),
        normalized: true,
    })
}

/// Lateral support width `4 NA / lambda` and axial support
/// `2 (n0 - sqrt(n0^2 - NA^2)) / lambda`, both in cycles/um.
///
/// The lateral value is the full diameter of the incoherent band; its radius,
/// `2 NA k0` in rad/um, is what bounds the TF support.
pub fn band_support(cfg: &OpticalConfig) -> (f64, f64) {
    let (na, n0, lambda) = (cfg.na(), cfg.medium_index(), cfg.wavelength_um());
    let lateral = 4.0 * na / lambda;
    let axial = 2.0 * (n0 - (n0 * n0 - na * na).sqrt()) / lambda;
    (lateral, axial)
}

/// Residuals of the focal-plane symmetry of a TF pair, each relative to the
/// peak magnitude of its array.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SymmetryReport {
    /// max |Re H_Re| / max |H_Re|
    pub phase_real_part: f64,
    /// max |H_Re(u) + H_Re(-u)| / max |H_Re|
    pub phase_antisymmetry: f64,
    /// max |Im H_Im| / max |H_Im|
    pub absorption_imag_part: f64,
    /// max |H_Im(u) - H_Im(-u)| / max |H_Im|
    pub absorption_symmetry: f64,
}

impl SymmetryReport {
    pub fn worst(&self) -> f64 {
        self.phase_real_part
            .max(self.phase_antisymmetry)
            .max(self.absorption_imag_part)
            .max(self.absorption_symmetry)
    }
}

pub fn symmetry_report(h_re: &Array2<Complex64>, h_im: &Array2<Complex64>) -> SymmetryReport {
    let (ny, nx) = h_re.dim();
    let peak = |a: &Array2<Complex64>| a.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let rel = |num: f64, den: f64| if den > 0.0 { num / den } else { num };
    let (pr, pi) = (peak(h_re), peak(h_im));
    let mut report = SymmetryReport {
        phase_real_part: 0.0,
        phase_antisymmetry: 0.0,
        absorption_imag_part: 0.0,
        absorption_symmetry: 0.0,
    };
    for iy in 0..ny {
        for ix in 0..nx {
            let (my, mx) = (mirror_index(iy, ny), mirror_index(ix, nx));
            let (a, b) = (h_re[[iy, ix]], h_re[[my, mx]]);
            let (c, d) = (h_im[[iy, ix]], h_im[[my, mx]]);
            report.phase_real_part = report.phase_real_part.max(a.re.abs());
            report.phase_antisymmetry = report.phase_antisymmetry.max((a + b).norm());
            report.absorption_imag_part = report.absorption_imag_part.max(c.im.abs());
            report.absorption_symmetry = report.absorption_symmetry.max((c - d).norm());
        }
    }
    report.phase_real_part = rel(report.phase_real_part, pr);
    report.phase_antisymmetry = rel(report.phase_antisymmetry, pr);
    report.absorption_imag_part = rel(report.absorption_imag_part, pi);
    report.absorption_symmetry = rel(report.absorption_symmetry, pi);
    report
}
