use ndarray::{Array1, Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    background_of, check_leds, propagate_spectrum, shifted_eta, IntensityDataset, PermittivityVolume, Provenance,
};
use crate::error::Result;
use crate::fft::Fft2;
use crate::illumination::{IlluminationSet, Led};
use crate::optics::{FrequencyGrid, OpticalConfig, Pupil};

/// How a thin slice acts on the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatteringOperator {
    /// Multiply by `t = exp(i k0 dz delta_eps / (2 n0))`.
    #[default]
    Paraxial,
    /// Add `(k / eta) * FT[(t - 1) psi]` in the spectral domain, which matches
    /// the first-Born obliquity factor `k0^2 / (2 eta)` to first order.
    Obliquity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultisliceOptions {
    #[serde(default)]
    pub operator: ScatteringOperator,
    /// Width (pixels) of a raised-cosine edge taper applied after every
    /// propagation step; 0 disables it.
    #[serde(default)]
    pub edge_taper_px: usize,
}

struct Stepper<'a> {
    fft: &'a Fft2,
    eta: Array2<f64>,
    taper: Option<Array2<f64>>,
}

impl Stepper<'_> {
    fn propagate(&self, psi: &mut Array2<Complex64>, d: f64) {
        self.fft.forward(psi);
        propagate_spectrum(psi, &self.eta, d);
        self.fft.inverse(psi);
        if let Some(w) = &self.taper {
            Zip::from(psi).and(w).for_each(|p, &w| *p *= w);
        }
    }
}

fn taper_window(shape: (usize, usize), width: usize) -> Option<Array2<f64>> {
    if width == 0 {
        return None;
    }
    let axis = |n: usize| -> Array1<f64> {
        Array1::from_shape_fn(n, |i| {
            let edge = i.min(n - 1 - i);
            if edge >= width {
                1.0
            } else {
                0.5 * (1.0 - (std::f64::consts::PI * (edge as f64 + 0.5) / width as f64).cos())
            }
        })
    };
    let (wy, wx) = (axis(shape.0), axis(shape.1));
    Some(Array2::from_shape_fn(shape, |(iy, ix)| wy[iy] * wx[ix]))
}

/// Illumination-frame field at `z = 0` after the last slice, before the pupil.
fn exit_field(
    vol: &PermittivityVolume,
    led: &Led,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
    opts: &MultisliceOptions,
    fft: &Fft2,
    pupil: Option<&Pupil>,
) -> Array2<Complex64> {
    let stepper = Stepper {
        fft,
        eta: shifted_eta(grid, led.u),
        taper: taper_window(cfg.shape(), opts.edge_taper_px),
    };
    let z = vol.slice_z();
    let phase_coef = cfg.k0() * vol.dz() / (2.0 * cfg.medium_index());
    let mut psi = Array2::from_elem(
        cfg.shape(),
        Complex64::from_polar(led.source_intensity.sqrt(), led.eta * z[0]),
    );
    let mut pending = 0.0;
    for m in 0..vol.n_slices() {
        if m > 0 {
            pending += z[m] - z[m - 1];
        }
        let slab = vol.slice(m);
        if slab.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
            continue;
        }
        if pending != 0.0 {
            stepper.propagate(&mut psi, pending);
            pending = 0.0;
        }
        match opts.operator {
            ScatteringOperator::Paraxial => {
                Zip::from(&mut psi).and(&slab).for_each(|p, &e| {
                    *p *= (Complex64::i() * phase_coef * e).exp();
                });
            }
            ScatteringOperator::Obliquity => {
                let mut scattered = Array2::zeros(cfg.shape());
                Zip::from(&mut scattered).and(&psi).and(&slab).for_each(|s, &p, &e| {
                    *s = ((Complex64::i() * phase_coef * e).exp() - 1.0) * p;
                });
                fft.forward(&mut scattered);
                let k = cfg.k();
                Zip::from(&mut scattered).and(&stepper.eta).for_each(|s, &e| {
                    *s = if e > 0.0 {
                        *s * (k / e)
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                });
                fft.inverse(&mut scattered);
                psi += &scattered;
            }
        }
    }
    pending -= z[z.len() - 1];

    fft.forward(&mut psi);
    propagate_spectrum(&mut psi, &stepper.eta, pending);
    if let Some(pupil) = pupil {
        for ((iy, ix), v) in psi.indexed_iter_mut() {
            let (uy, ux) = grid.u(iy, ix);
            *v *= pupil.eval(ux - led.u[0], uy - led.u[1]);
        }
    }
    fft.inverse(&mut psi);
    psi
}

/// Field in the illumination frame (carrier `exp(-i u_i . x)` removed) at the
/// focal plane, before pupil filtering.
pub fn multislice_exit_field(
    vol: &PermittivityVolume,
    led: &Led,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
    opts: &MultisliceOptions,
) -> Result<Array2<Complex64>> {
    vol.check_grid(cfg)?;
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    Ok(exit_field(vol, led, grid, cfg, opts, &fft, None))
}

/// Split-step beam-propagation images: transmit through each slice, propagate
/// between slices, back-propagate to the focal plane, filter by the pupil.
pub fn simulate_intensity_multislice(
    vol: &PermittivityVolume,
    illum: &IlluminationSet,
    pupil: &Pupil,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
    opts: &MultisliceOptions,
) -> Result<IntensityDataset> {
    vol.check_grid(cfg)?;
    check_leds(illum, cfg)?;
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let empty = PermittivityVolume::zeros(cfg.shape(), vol.slice_z().to_vec(), vol.dz())?;
    let (images, background): (Vec<_>, Vec<_>) = illum
        .leds()
        .par_iter()
        .map(|led| {
            let psi = exit_field(vol, led, grid, cfg, opts, &fft, Some(pupil));
            let bg = if opts.edge_taper_px == 0 {
                background_of(led, pupil.eval(-led.u[0], -led.u[1]))
            } else {
                let e = exit_field(&empty, led, grid, cfg, opts, &fft, Some(pupil));
                e.iter().map(|v| v.norm_sqr()).sum::<f64>() / e.len() as f64
            };
            (psi.mapv(|v| v.norm_sqr()), bg)
        })
        .unzip();
    Ok(IntensityDataset::simulated(
        images,
        background,
        illum,
        cfg,
        Provenance::MultisliceSim,
    ))
}
