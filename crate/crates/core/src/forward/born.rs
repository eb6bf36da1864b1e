use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use super::{background_of, carrier, check_leds, shifted_eta, IntensityDataset, PermittivityVolume, Provenance};
use crate::error::{IdtError, Result};
use crate::fft::Fft2;
use crate::illumination::{IlluminationSet, Led};
use crate::optics::{FrequencyGrid, OpticalConfig, Pupil};
use crate::transfer::TransferFunctionStack;

/// Illumination-frame spectrum of the first-Born scattered field at `z = 0`:
/// `(i k0^2/2) sqrt(S) sum_m dz eps_m(v) exp(-i [eta(v-u_i) - eta_i] z_m) / eta(v-u_i)`.
fn scattered_spectrum(
    spectra: &[Array2<Complex64>],
    vol: &PermittivityVolume,
    led: &Led,
    eta: &Array2<f64>,
    k0: f64,
) -> Array2<Complex64> {
    let coef = Complex64::new(0.0, 0.5 * k0 * k0 * led.source_intensity.sqrt() * vol.dz());
    let mut out = Array2::zeros(eta.dim());
    for (spec, &z) in spectra.iter().zip(vol.slice_z()) {
        Zip::from(&mut out).and(spec).and(eta).for_each(|o, &s, &e| {
            if e > 0.0 {
                *o += s * Complex64::from_polar(1.0 / e, -(e - led.eta) * z);
            }
        });
    }
    out.mapv_inplace(|v| v * coef);
    out
}

fn slice_spectra(vol: &PermittivityVolume, fft: &Fft2) -> Vec<Array2<Complex64>> {
    (0..vol.n_slices())
        .into_par_iter()
        .map(|m| {
            let mut s = vol.slice(m).to_owned();
            fft.forward(&mut s);
            s
        })
        .collect()
}

/// First-Born scattered field `f_s(x, 0 | u_i)` (before the pupil), including
/// the illumination carrier `exp(-i u_i . x)`.
pub fn born_scattered_field(
    vol: &PermittivityVolume,
    led: &Led,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
) -> Result<Array2<Complex64>> {
    vol.check_grid(cfg)?;
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let spectra = slice_spectra(vol, &fft);
    let eta = shifted_eta(grid, led.u);
    let mut psi = scattered_spectrum(&spectra, vol, led, &eta, cfg.k0());
    fft.inverse(&mut psi);
    Ok(psi * &carrier(cfg, led.u))
}

/// Born intensity images. With `keep_ss = false` the scattered-scattered term
/// is dropped: `I = I_i + 2 Re{conj(f_i * h) (f_s * h)}`.
pub fn simulate_intensity_born(
    vol: &PermittivityVolume,
    illum: &IlluminationSet,
    pupil: &Pupil,
    grid: &FrequencyGrid,
    cfg: &OpticalConfig,
    keep_ss: bool,
) -> Result<IntensityDataset> {
    vol.check_grid(cfg)?;
    check_leds(illum, cfg)?;
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let spectra = slice_spectra(vol, &fft);
    let (images, background): (Vec<_>, Vec<_>) = illum
        .leds()
        .par_iter()
        .map(|led| {
            let eta = shifted_eta(grid, led.u);
            let mut psi = scattered_spectrum(&spectra, vol, led, &eta, cfg.k0());
            for ((iy, ix), v) in psi.indexed_iter_mut() {
                let (uy, ux) = grid.u(iy, ix);
                *v *= pupil.eval(ux - led.u[0], uy - led.u[1]);
            }
            fft.inverse(&mut psi);
            let p_back = pupil.eval(-led.u[0], -led.u[1]);
            let psi_i = led.source_intensity.sqrt() * p_back;
            let bg = background_of(led, p_back);
            let img = if keep_ss {
                psi.mapv(|s| (psi_i + s).norm_sqr())
            } else {
                psi.mapv(|s| bg + 2.0 * (psi_i.conj() * s).re)
            };
            (img, bg)
        })
        .unzip();
    Ok(IntensityDataset::simulated(
        images,
        background,
        illum,
        cfg,
        Provenance::BornSim,
    ))
}

/// Images from the transfer-function model:
/// `I^(u) = I_i delta(u) + sum_m dz [H_Re eps_Re^ + H_Im eps_Im^]`.
pub fn simulate_intensity_linear(
    vol: &PermittivityVolume,
    tf: &TransferFunctionStack,
    illum: &IlluminationSet,
    pupil: &Pupil,
    cfg: &OpticalConfig,
) -> Result<IntensityDataset> {
    vol.check_grid(cfg)?;
    check_leds(illum, cfg)?;
    if tf.is_normalized() {
        return Err(IdtError::InvalidConfig(
            "linear simulation needs unnormalized transfer functions".into(),
        ));
    }
    if tf.shape() != cfg.shape() {
        return Err(IdtError::ShapeMismatch(format!(
            "TF grid {:?} vs {:?}",
            tf.shape(),
            cfg.shape()
        )));
    }
    check_alignment(tf, illum)?;
    let same_slices = tf.n_slices() == vol.n_slices()
        && tf
            .slice_z()
            .iter()
            .zip(vol.slice_z())
            .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
    if !same_slices {
        return Err(IdtError::ShapeMismatch(format!(
            "TF slices {:?} differ from volume slices {:?}",
            tf.slice_z(),
            vol.slice_z()
        )));
    }
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let spectra: Vec<(Array2<Complex64>, Array2<Complex64>)> = (0..vol.n_slices())
        .map(|m| (fft.forward_real(&vol.real_part(m)), fft.forward_real(&vol.imag_part(m))))
        .collect();
    let n_pix = (cfg.nx() * cfg.ny()) as f64;
    let dz = vol.dz();
    let (images, background): (Vec<_>, Vec<_>) = illum
        .leds()
        .par_iter()
        .enumerate()
        .map(|(l, led)| {
            let mut spec = Array2::<Complex64>::zeros(cfg.shape());
            for (m, (re, im)) in spectra.iter().enumerate() {
                let (h_re, h_im) = tf.slab(l, m);
                Zip::from(&mut spec)
                    .and(&*h_re)
                    .and(&*h_im)
                    .and(re)
                    .and(im)
                    .for_each(|s, &hr, &hi, &er, &ei| *s += dz * (hr * er + hi * ei));
            }
            let bg = background_of(led, pupil.eval(-led.u[0], -led.u[1]));
            spec[[0, 0]] += n_pix * bg;
            fft.inverse(&mut spec);
            (spec.mapv(|v| v.re), bg)
        })
        .unzip();
    Ok(IntensityDataset::simulated(
        images,
        background,
        illum,
        cfg,
        Provenance::BornSim,
    ))
}

pub(crate) fn check_alignment(tf: &TransferFunctionStack, illum: &IlluminationSet) -> Result<()> {
    if tf.n_leds() != illum.len() {
        return Err(IdtError::ShapeMismatch(format!(
            "{} TF LEDs for {} illumination LEDs",
            tf.n_leds(),
            illum.len()
        )));
    }
    for (position, (a, b)) in tf.led_keys().iter().zip(illum.leds()).enumerate() {
        if *a != b.key() {
            return Err(IdtError::MisalignedLeds {
                position,
                expected_p: a.0,
                expected_q: a.1,
                found_p: b.p,
                found_q: b.q,
            });
        }
    }
    Ok(())
}
