//! Background normalization and the closed-form slice-wise Tikhonov inverse.
//!
//! Per slice and frequency the unknowns `(x_r, x_i)` minimize
//! `sum_l |g_l - h_Re,l x_r - h_Im,l x_i|^2 + alpha |x_r|^2 + beta |x_i|^2`,
//! whose solution is
//!
//! ```text
//! x_r = [(a_ii + beta) b_r - conj(a_ri) b_i] / A
//! x_i = [(a_rr + alpha) b_i - a_ri b_r] / A
//! A   = (a_rr + alpha)(a_ii + beta) - |a_ri|^2
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use ndarray::{Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IdtError, Result};
use crate::fft::Fft2;
use crate::forward::{check_slices, IntensityDataset, Provenance};
use crate::illumination::Led;
use crate::optics::{FrequencyGrid, OpticalConfig, Pupil};
use crate::transfer::{BackgroundIntensity, TfKernel, TransferFunctionStack};

/// Imaginary-residue limit for simulated data.
pub const SIMULATED_IMAG_LIMIT: f64 = 1e-8;
/// Imaginary-residue limit for external data.
pub const EXTERNAL_IMAG_LIMIT: f64 = 1e-2;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Spectra of `g = (I - I_i) / I_i`, one per LED, in dataset order.
#[derive(Debug, Clone)]
pub struct NormalizedData {
    g_hat: Vec<Array2<Complex64>>,
    leds: Vec<Led>,
    background: Vec<f64>,
    provenance: Provenance,
}

impl NormalizedData {
    pub fn g_hat(&self) -> &[Array2<Complex64>] {
        &self.g_hat
    }
    pub fn background(&self) -> &[f64] {
        &self.background
    }
    pub fn led_keys(&self) -> Vec<(i32, i32)> {
        self.leds.iter().map(Led::key).collect()
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Largest `|g^(0)| / max|g^|` over LEDs.
    pub fn dc_ratio(&self) -> f64 {
        self.g_hat
            .iter()
            .map(|g| {
                let peak = g.iter().fold(0.0f64, |m, v| m.max(v.norm()));
                if peak > 0.0 {
                    g[[0, 0]].norm() / peak
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Per-LED `I_i`: the recorded background, or the image mean when none was
/// recorded.
pub fn dataset_background(ds: &IntensityDataset) -> Result<Vec<f64>> {
    let bg: Vec<f64> = match ds.background() {
        Some(bg) => bg.to_vec(),
        None => ds.images().iter().map(|i| i.mean().unwrap_or(0.0)).collect(),
    };
    Ok(BackgroundIntensity::new(bg)?.values().to_vec())
}

fn normalized_image(img: &Array2<f64>, bg: f64, fft: &Fft2) -> Array2<Complex64> {
    let mut g = img.mapv(|v| Complex64::new((v - bg) / bg, 0.0));
    fft.forward(&mut g);
    g
}

pub fn normalize_dataset(ds: &IntensityDataset) -> Result<NormalizedData> {
    let bg = dataset_background(ds)?;
    let cfg = ds.config();
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let g_hat = ds
        .images()
        .par_iter()
        .zip(bg.par_iter())
        .map(|(img, &b)| normalized_image(img, b, &fft))
        .collect();
    Ok(NormalizedData {
        g_hat,
        leds: ds.illumination().leds().to_vec(),
        background: bg,
        provenance: ds.provenance(),
    })
}

/// The five Tikhonov sums for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSums {
    pub a_rr: Array2<f64>,
    pub a_ii: Array2<f64>,
    pub a_ri: Array2<Complex64>,
    pub b_r: Array2<Complex64>,
    pub b_i: Array2<Complex64>,
}

impl SliceSums {
    fn zeros(shape: (usize, usize)) -> Self {
        Self {
            a_rr: Array2::zeros(shape),
            a_ii: Array2::zeros(shape),
            a_ri: Array2::zeros(shape),
            b_r: Array2::zeros(shape),
            b_i: Array2::zeros(shape),
        }
    }

    /// Adds one LED's already weighted TF pair.
    fn add(&mut self, h_re: &Array2<Complex64>, h_im: &Array2<Complex64>, g: &Array2<Complex64>) {
        let (ny, nx) = g.dim();
        for iy in 0..ny {
            for ix in 0..nx {
                self.add_px(iy, ix, h_re[[iy, ix]], h_im[[iy, ix]], g[[iy, ix]]);
            }
        }
    }

    #[inline]
    fn add_px(&mut self, iy: usize, ix: usize, hr: Complex64, hi: Complex64, g: Complex64) {
        let at = [iy, ix];
        self.a_rr[at] += hr.norm_sqr();
        self.a_ii[at] += hi.norm_sqr();
        self.a_ri[at] += hr * hi.conj();
        self.b_r[at] += hr.conj() * g;
        self.b_i[at] += hi.conj() * g;
    }

    fn bytes(shape: (usize, usize)) -> u64 {
        let n = (shape.0 * shape.1) as u64;
        n * (2 * 8 + 3 * 16)
    }
}

/// Per-slice sums over LEDs. `dz` is folded into the TFs before summing.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulators {
    slices: Vec<SliceSums>,
    slice_z: Vec<f64>,
    dz: f64,
    shape: (usize, usize),
    led_keys: Vec<(i32, i32)>,
    imag_limit: f64,
}

impl Accumulators {
    pub fn new(shape: (usize, usize), slice_z: &[f64], dz: f64) -> Result<Self> {
        check_slices(slice_z, dz)?;
        Ok(Self {
            slices: (0..slice_z.len()).map(|_| SliceSums::zeros(shape)).collect(),
            slice_z: slice_z.to_vec(),
            dz,
            shape,
            led_keys: Vec::new(),
            imag_limit: SIMULATED_IMAG_LIMIT,
        })
    }

    pub fn slices(&self) -> &[SliceSums] {
        &self.slices
    }
    pub fn slice_z(&self) -> &[f64] {
        &self.slice_z
    }
    pub fn dz(&self) -> f64 {
        self.dz
    }
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }
    pub fn led_keys(&self) -> &[(i32, i32)] {
        &self.led_keys
    }
    pub fn imag_limit(&self) -> f64 {
        self.imag_limit
    }
    pub fn set_imag_limit(&mut self, limit: f64) {
        self.imag_limit = limit;
    }
    /// Resident bytes of the sums.
    pub fn bytes(&self) -> u64 {
        self.slices.len() as u64 * SliceSums::bytes(self.shape)
    }

    /// Adds one LED given its normalized (unweighted) TFs for every slice.
    pub fn add_led(
        &mut self,
        key: (i32, i32),
        tfs: &[(Array2<Complex64>, Array2<Complex64>)],
        g_hat: &Array2<Complex64>,
    ) -> Result<()> {
        if tfs.len() != self.slices.len() {
            return Err(IdtError::ShapeMismatch(format!(
                "{} TF slices for {} accumulator slices",
                tfs.len(),
                self.slices.len()
            )));
        }
        self.check_shape(g_hat.dim())?;
        let dz = self.dz;
        self.slices
            .par_iter_mut()
            .zip(tfs.par_iter())
            .for_each(|(s, (hr, hi))| {
                s.add(&hr.mapv(|v| v * dz), &hi.mapv(|v| v * dz), g_hat);
            });
        self.led_keys.push(key);
        Ok(())
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape != self.shape {
            return Err(IdtError::ShapeMismatch(format!("{shape:?} vs {:?}", self.shape)));
        }
        Ok(())
    }

    /// Streamed update: TFs are evaluated pixel by pixel and never stored.
    fn add_led_streamed(
        &mut self,
        led: &Led,
        background: f64,
        g_hat: &Array2<Complex64>,
        pupil: &Pupil,
        grid: &FrequencyGrid,
        cfg: &OpticalConfig,
    ) {
        let kernel = TfKernel::new(led, pupil, cfg);
        let dz = self.dz;
        let (ny, nx) = self.shape;
        self.slices
            .par_iter_mut()
            .zip(self.slice_z.par_iter())
            .for_each(|(s, &z)| {
                for iy in 0..ny {
                    for ix in 0..nx {
                        let (uy, ux) = grid.u(iy, ix);
                        let (hr, hi) = kernel.eval(pupil, ux, uy, z);
                        if hr == ZERO && hi == ZERO {
                            continue;
                        }
                        s.add_px(iy, ix, hr / background * dz, hi / background * dz, g_hat[[iy, ix]]);
                    }
                }
            });
        self.led_keys.push(led.key());
    }
}

/// LED positions sorted by `(p, q)`: the fixed reduction order.
fn key_order(keys: &[(i32, i32)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    order
}

/// Batch accumulation from a normalized TF stack, reduced in `(p, q)` order.
pub fn accumulate(norm: &NormalizedData, tf: &TransferFunctionStack, dz: f64) -> Result<Accumulators> {
    if !tf.is_normalized() {
        return Err(IdtError::InvalidConfig(
            "accumulation needs normalized transfer functions".into(),
        ));
    }
    let keys = norm.led_keys();
    if keys.len() != tf.n_leds() {
        return Err(IdtError::ShapeMismatch(format!(
            "{} data LEDs for {} TF LEDs",
            keys.len(),
            tf.n_leds()
        )));
    }
    for (position, (a, b)) in tf.led_keys().iter().zip(&keys).enumerate() {
        if a != b {
            return Err(IdtError::MisalignedLeds {
                position,
                expected_p: a.0,
                expected_q: a.1,
                found_p: b.0,
                found_q: b.1,
            });
        }
    }
    let mut acc = Accumulators::new(tf.shape(), tf.slice_z(), dz)?;
    acc.imag_limit = imag_limit_for(norm.provenance);
    let order = key_order(&keys);
    acc.slices.par_iter_mut().enumerate().for_each(|(m, s)| {
        for &l in &order {
            let (hr, hi) = tf.slab(l, m);
            s.add(&hr.mapv(|v| v * dz), &hi.mapv(|v| v * dz), &norm.g_hat[l]);
        }
    });
    acc.led_keys = order.iter().map(|&l| keys[l]).collect();
    Ok(acc)
}

fn imag_limit_for(p: Provenance) -> f64 {
    match p {
        Provenance::External => EXTERNAL_IMAG_LIMIT,
        _ => SIMULATED_IMAG_LIMIT,
    }
}

/// How the Tikhonov weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Regularization {
    Absolute {
        alpha: f64,
        beta: f64,
    },
    /// Multiples of `max_u a_rr` over all slices.
    RelativeToPhase {
        alpha: f64,
        beta: f64,
    },
    /// Multiples of `max_u (a_rr + a_ii)` over all slices.
    RelativeToTotal {
        alpha: f64,
        beta: f64,
    },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::RelativeToTotal {
            alpha: 1e-2,
            beta: 1e-2,
        }
    }
}

impl Regularization {
    /// Absolute `(alpha, beta)` for the given sums.
    pub fn resolve(&self, acc: &Accumulators) -> Result<(f64, f64)> {
        let max_over = |f: &dyn Fn(&SliceSums, (usize, usize)) -> f64| {
            acc.slices.iter().fold(0.0f64, |m, s| {
                s.a_rr.indexed_iter().fold(m, |m, (idx, _)| m.max(f(s, idx)))
            })
        };
        let (alpha, beta) = match *self {
            Regularization::Absolute { alpha, beta } => (alpha, beta),
            Regularization::RelativeToPhase { alpha, beta } => {
                let s = max_over(&|s, i| s.a_rr[i]);
                (alpha * s, beta * s)
            }
            Regularization::RelativeToTotal { alpha, beta } => {
                let s = max_over(&|s, i| s.a_rr[i] + s.a_ii[i]);
                (alpha * s, beta * s)
            }
        };
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(IdtError::Regularization { alpha, beta });
        }
        Ok((alpha, beta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconParams {
    #[serde(default)]
    pub regularization: Regularization,
    pub slice_z: Vec<f64>,
    pub dz: f64,
}

impl ReconParams {
    pub fn new(slice_z: Vec<f64>, dz: f64) -> Result<Self> {
        check_slices(&slice_z, dz)?;
        Ok(Self {
            regularization: Regularization::default(),
            slice_z,
            dz,
        })
    }

    pub fn with_regularization(mut self, r: Regularization) -> Self {
        self.regularization = r;
        self
    }
}

/// Reconstructed contrast slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionVolume {
    pub phase: Array3<f64>,
    pub absorption: Array3<f64>,
    pub slice_z: Vec<f64>,
    pub dz: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Relative imaginary energy discarded from the spatial solution.
    pub imag_residual: f64,
}

impl ReconstructionVolume {
    pub fn n_slices(&self) -> usize {
        self.slice_z.len()
    }
    pub fn shape(&self) -> (usize, usize) {
        let d = self.phase.dim();
        (d.1, d.2)
    }

    /// `n = sqrt(eps0 + delta_eps)` on the principal branch, returned as
    /// (real part, imaginary part).
    pub fn refractive_index(&self, eps0: f64) -> (Array3<f64>, Array3<f64>) {
        let mut n_re = Array3::zeros(self.phase.dim());
        let mut n_im = Array3::zeros(self.phase.dim());
        Zip::from(&mut n_re)
            .and(&mut n_im)
            .and(&self.phase)
            .and(&self.absorption)
            .for_each(|r, i, &p, &a| {
                let n = Complex64::new(eps0 + p, a).sqrt();
                *r = n.re;
                *i = n.im;
            });
        (n_re, n_im)
    }
}

/// Solves every slice; consumes the sums.
pub fn solve_tikhonov(acc: Accumulators, params: &ReconParams) -> Result<ReconstructionVolume> {
    let (alpha, beta) = params.regularization.resolve(&acc)?;
    let limit = acc.imag_limit;
    solve_with(acc, alpha, beta, limit)
}

fn solve_with(acc: Accumulators, alpha: f64, beta: f64, limit: f64) -> Result<ReconstructionVolume> {
    let (ny, nx) = acc.shape;
    let fft = Fft2::new(ny, nx);
    let m_count = acc.slices.len();
    let solved: Vec<(Array2<f64>, Array2<f64>, f64, f64)> = acc
        .slices
        .into_par_iter()
        .map(|s| {
            let SliceSums {
                a_rr,
                a_ii,
                a_ri,
                mut b_r,
                mut b_i,
            } = s;
            Zip::from(&mut b_r)
                .and(&mut b_i)
                .and(&a_rr)
                .and(&a_ii)
                .and(&a_ri)
                .for_each(|br, bi, &rr, &ii, &ri| {
                    let (pr, pi) = (rr + alpha, ii + beta);
                    let det = pr * pi - ri.norm_sqr();
                    assert!(det > 0.0, "Tikhonov determinant vanished");
                    let xr = (pi * *br - ri.conj() * *bi) / det;
                    let xi = (pr * *bi - ri * *br) / det;
                    *br = xr;
                    *bi = xi;
                });
            fft.inverse(&mut b_r);
            fft.inverse(&mut b_i);
            let energy = |a: &Array2<Complex64>| -> (f64, f64) {
                a.iter()
                    .fold((0.0, 0.0), |(r, i), v| (r + v.re * v.re, i + v.im * v.im))
            };
            let (er, ir) = energy(&b_r);
            let (ea, ia) = energy(&b_i);
            (b_r.mapv(|v| v.re), b_i.mapv(|v| v.re), er + ea, ir + ia)
        })
        .collect();
    let (total, imag) = solved.iter().fold((0.0, 0.0), |(t, i), s| (t + s.2 + s.3, i + s.3));
    let residual = if total > 0.0 { imag / total } else { 0.0 };
    if residual > limit {
        return Err(IdtError::ImaginaryResidual {
            relative: residual,
            limit,
        });
    }
    let mut phase = Array3::zeros((m_count, ny, nx));
    let mut absorption = Array3::zeros((m_count, ny, nx));
    for (m, (p, a, _, _)) in solved.into_iter().enumerate() {
        phase.index_axis_mut(Axis(0), m).assign(&p);
        absorption.index_axis_mut(Axis(0), m).assign(&a);
    }
    Ok(ReconstructionVolume {
        phase,
        absorption,
        slice_z: acc.slice_z,
        dz: acc.dz,
        alpha,
        beta,
        imag_residual: residual,
    })
}

/// Tracks bytes of the large buffers held by the streamed reconstructor.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    current: AtomicU64,
    peak: AtomicU64,
}

impl MemoryMeter {
    pub fn acquire(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }
    pub fn release(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }
    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }
    pub fn current(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }
}

/// Instrumentation of one streamed reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    pub n_leds: usize,
    pub n_slices: usize,
    /// Bytes of one complex slab on this grid.
    pub slab_bytes: u64,
    pub accumulator_bytes: u64,
    /// Peak of accumulators plus per-LED working buffers.
    pub peak_bytes: u64,
    pub accumulate_seconds: f64,
    pub solve_seconds: f64,
}

impl ReconStats {
    /// Peak expressed in complex slabs per slice.
    pub fn peak_slabs_per_slice(&self) -> f64 {
        self.peak_bytes as f64 / (self.slab_bytes as f64 * self.n_slices as f64)
    }
}

/// Streamed reconstruction: normalize each image, evaluate its TFs on the fly,
/// fold it into the sums, then solve. The full TF stack is never formed.
pub fn reconstruct(ds: &IntensityDataset, pupil: &Pupil, params: &ReconParams) -> Result<ReconstructionVolume> {
    reconstruct_with_stats(ds, pupil, params).map(|(v, _)| v)
}

pub fn reconstruct_with_stats(
    ds: &IntensityDataset,
    pupil: &Pupil,
    params: &ReconParams,
) -> Result<(ReconstructionVolume, ReconStats)> {
    let cfg = ds.config();
    ds.illumination().check_brightfield(cfg)?;
    let grid = FrequencyGrid::new(cfg);
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let bg = dataset_background(ds)?;
    let meter = MemoryMeter::default();
    let n_pix = (cfg.nx() * cfg.ny()) as u64;
    let slab_bytes = 16 * n_pix;

    let start = Instant::now();
    let mut acc = Accumulators::new(cfg.shape(), &params.slice_z, params.dz)?;
    acc.imag_limit = imag_limit_for(ds.provenance());
    let acc_bytes = acc.bytes();
    meter.acquire(acc_bytes);

    let leds = ds.illumination().leds();
    let keys: Vec<(i32, i32)> = leds.iter().map(Led::key).collect();
    for l in key_order(&keys) {
        meter.acquire(slab_bytes);
        let g_hat = normalized_image(&ds.images()[l], bg[l], &fft);
        acc.add_led_streamed(&leds[l], bg[l], &g_hat, pupil, &grid, cfg);
        drop(g_hat);
        meter.release(slab_bytes);
    }
    let accumulate_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let (alpha, beta) = params.regularization.resolve(&acc)?;
    let limit = acc.imag_limit;
    let vol = solve_with(acc, alpha, beta, limit)?;
    meter.release(acc_bytes);
    let stats = ReconStats {
        n_leds: leds.len(),
        n_slices: params.slice_z.len(),
        slab_bytes,
        accumulator_bytes: acc_bytes,
        peak_bytes: meter.peak(),
        accumulate_seconds,
        solve_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((vol, stats))
}

/// Pattern height `h = delta_eps * dz / (n_ph^2 - 1)` from a phase slice, in
/// the units of `dz`. Zero-mean, since the phase DC is not measured.
pub fn height_map(recon: &ReconstructionVolume, slice_index: usize, n_ph: f64, dz: f64) -> Result<Array2<f64>> {
    if !(n_ph > 1.0) {
        return Err(IdtError::InvalidConfig(format!("pattern index {n_ph} must exceed 1")));
    }
    if slice_index >= recon.n_slices() {
        return Err(IdtError::ShapeMismatch(format!(
            "slice {slice_index} of {}",
            recon.n_slices()
        )));
    }
    let scale = dz / (n_ph * n_ph - 1.0);
    Ok(recon.phase.index_axis(Axis(0), slice_index).mapv(|v| v * scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_intensity_born, simulate_intensity_linear, PermittivityVolume};
    use crate::illumination::{select_brightfield, IlluminationSet, LedArray};
    use crate::transfer::{compute_tf_stack, normalize_tf};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig(n: usize) -> (OpticalConfig, FrequencyGrid, Pupil, IlluminationSet) {
        let cfg = OpticalConfig::new(0.63, 0.25, 1.0, (n, n), (0.5, 0.5)).unwrap();
        let grid = FrequencyGrid::new(&cfg);
        let pupil = Pupil::ideal(&cfg);
        let illum = select_brightfield(&LedArray::default(), &cfg).unwrap();
        (cfg, grid, pupil, illum)
    }

    fn blobs(n: usize, z: Vec<f64>, dz: f64, phase: f64, absorb: f64, seed: u64) -> PermittivityVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vol = PermittivityVolume::zeros((n, n), z, dz).unwrap();
        for m in 0..vol.n_slices() {
            let margin = (n / 4) as f64;
            for _ in 0..4 {
                let (cy, cx) = (
                    rng.random_range(margin..n as f64 - margin),
                    rng.random_range(margin..n as f64 - margin),
                );
                let r: f64 = rng.random_range(1.5..3.0);
                let mut s = vol.slice_mut(m);
                for ((iy, ix), v) in s.indexed_iter_mut() {
                    let d2 = (iy as f64 - cy).powi(2) + (ix as f64 - cx).powi(2);
                    let w = (-d2 / (r * r)).exp();
                    *v += Complex64::new(phase * w, absorb * w);
                }
            }
        }
        vol
    }

    fn batch_acc(ds: &IntensityDataset, pupil: &Pupil, z: &[f64], dz: f64) -> Accumulators {
        let cfg = ds.config();
        let grid = FrequencyGrid::new(cfg);
        let norm = normalize_dataset(ds).unwrap();
        let tf = compute_tf_stack(ds.illumination(), z, pupil, &grid, cfg).unwrap();
        let bg = BackgroundIntensity::new(norm.background().to_vec()).unwrap();
        accumulate(&norm, &normalize_tf(&tf, &bg).unwrap(), dz).unwrap()
    }

    /// In-band correlation over `0 < |u| <= 2 NA k0`.
    fn band_corr(a: &Array2<f64>, b: &Array2<f64>, cfg: &OpticalConfig) -> f64 {
        let grid = FrequencyGrid::new(cfg);
        let fft = Fft2::new(cfg.ny(), cfg.nx());
        let (fa, fb) = (fft.forward_real(a), fft.forward_real(b));
        let r = 2.0 * cfg.pupil_cutoff();
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for ((iy, ix), x) in fa.indexed_iter() {
            let (uy, ux) = grid.u(iy, ix);
            let q = ux.hypot(uy);
            if q == 0.0 || q > r {
                continue;
            }
            let y = fb[[iy, ix]];
            ab += (x * y.conj()).re;
            aa += x.norm_sqr();
            bb += y.norm_sqr();
        }
        ab / (aa * bb).sqrt()
    }

    #[test]
    fn flat_images_give_zero_spectra() {
        let (cfg, grid, pupil, illum) = rig(16);
        let vol = PermittivityVolume::zeros((16, 16), vec![0.0], 1.0).unwrap();
        let ds = simulate_intensity_born(&vol, &illum.select(&[0, 5]).unwrap(), &pupil, &grid, &cfg, false).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        assert!(norm.g_hat().iter().all(|g| g.iter().all(|v| v.norm() < 1e-13)));
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let (cfg, grid, pupil, illum) = rig(16);
        let vol = blobs(16, vec![0.0], 1.0, 1e-3, 0.0, 1);
        let sub = illum.select(&[3, 9]).unwrap();
        let ds = simulate_intensity_born(&vol, &sub, &pupil, &grid, &cfg, false).unwrap();
        let scaled = IntensityDataset::new(
            ds.images().iter().map(|i| i * 10.0).collect(),
            Some(ds.background().unwrap().iter().map(|b| b * 10.0).collect()),
            sub,
            cfg,
            Provenance::BornSim,
        )
        .unwrap();
        let (a, b) = (normalize_dataset(&ds).unwrap(), normalize_dataset(&scaled).unwrap());
        for (x, y) in a.g_hat().iter().zip(b.g_hat()) {
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.norm()));
            for (p, q) in x.iter().zip(y.iter()) {
                assert!((p - q).norm() <= 1e-12 * peak);
            }
        }
    }

    #[test]
    fn born_data_has_no_dc() {
        let (cfg, grid, pupil, illum) = rig(32);
        let vol = blobs(32, vec![0.0], 1.0, 1e-4, 0.0, 2);
        let ds = simulate_intensity_born(&vol, &illum.select(&[10, 40]).unwrap(), &pupil, &grid, &cfg, false).unwrap();
        assert!(normalize_dataset(&ds).unwrap().dc_ratio() <= 1e-10);
    }

    #[test]
    fn external_data_uses_image_mean() {
        let (cfg, _, _, illum) = rig(8);
        let sub = illum.select(&[0]).unwrap();
        let img = Array2::from_shape_fn((8, 8), |(y, x)| 2.0 + ((x + y) % 2) as f64);
        let ds = IntensityDataset::new(vec![img], None, sub.clone(), cfg.clone(), Provenance::External).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        assert_eq!(norm.background(), &[2.5]);
        assert!(norm.g_hat()[0][[0, 0]].norm() < 1e-14);
        let dark = IntensityDataset::new(vec![Array2::zeros((8, 8))], None, sub, cfg, Provenance::External).unwrap();
        assert!(matches!(
            normalize_dataset(&dark),
            Err(IdtError::NonPositiveBackground { .. })
        ));
    }

    #[test]
    fn single_led_sums_are_products() {
        let (cfg, grid, pupil, illum) = rig(8);
        let sub = illum.select(&[20]).unwrap();
        let vol = blobs(8, vec![0.0], 1.0, 1e-3, 1e-4, 3);
        let ds = simulate_intensity_born(&vol, &sub, &pupil, &grid, &cfg, false).unwrap();
        let acc = batch_acc(&ds, &pupil, &[0.0], 1.0);
        let (hr, hi) = crate::transfer::compute_tf_slice(&sub.leds()[0], 0.0, &pupil, &grid, &cfg);
        let g = &normalize_dataset(&ds).unwrap().g_hat()[0].clone();
        let s = &acc.slices()[0];
        for ((iy, ix), &r) in hr.indexed_iter() {
            let i = hi[[iy, ix]];
            assert_eq!(s.a_rr[[iy, ix]], r.norm_sqr());
            assert_eq!(s.a_ii[[iy, ix]], i.norm_sqr());
            assert_eq!(s.a_ri[[iy, ix]], r * i.conj());
            assert_eq!(s.b_r[[iy, ix]], r.conj() * g[[iy, ix]]);
            assert_eq!(s.b_i[[iy, ix]], i.conj() * g[[iy, ix]]);
        }
    }

    #[test]
    fn two_leds_in_either_order() {
        let (cfg, grid, pupil, illum) = rig(16);
        let z = [0.0, 2.0];
        let vol = blobs(16, z.to_vec(), 2.0, 1e-3, 1e-4, 4);
        let sub = illum.select(&[7, 61]).unwrap();
        let ds = simulate_intensity_born(&vol, &sub, &pupil, &grid, &cfg, false).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        let tf_for = |led: &Led| -> Vec<(Array2<Complex64>, Array2<Complex64>)> {
            z.iter()
                .map(|&zz| {
                    let (a, b) = crate::transfer::compute_tf_slice(led, zz, &pupil, &grid, &cfg);
                    (a, b)
                })
                .collect()
        };
        let mut fwd = Accumulators::new((16, 16), &z, 2.0).unwrap();
        let mut rev = fwd.clone();
        for l in [0, 1] {
            fwd.add_led(sub.leds()[l].key(), &tf_for(&sub.leds()[l]), &norm.g_hat()[l])
                .unwrap();
        }
        for l in [1, 0] {
            rev.add_led(sub.leds()[l].key(), &tf_for(&sub.leds()[l]), &norm.g_hat()[l])
                .unwrap();
        }
        for (a, b) in fwd.slices().iter().zip(rev.slices()) {
            for (x, y) in a.b_r.iter().zip(b.b_r.iter()) {
                assert!((x - y).norm() <= 1e-13 * x.norm().max(1e-300));
            }
            for (x, y) in a.a_rr.iter().zip(b.a_rr.iter()) {
                assert!((x - y).abs() <= 1e-13 * x.abs());
            }
        }
    }

    #[test]
    fn joint_permutation_is_bitwise_invariant() {
        let (cfg, grid, pupil, illum) = rig(16);
        let vol = blobs(16, vec![0.0], 1.0, 1e-3, 1e-4, 5);
        let picks = [3usize, 50, 17, 80, 33];
        let ds = simulate_intensity_born(&vol, &illum.select(&picks).unwrap(), &pupil, &grid, &cfg, false).unwrap();
        let perm = ds.select(&[4, 2, 0, 3, 1]).unwrap();
        let a = batch_acc(&ds, &pupil, &[0.0], 1.0);
        let b = batch_acc(&perm, &pupil, &[0.0], 1.0);
        assert_eq!(a.slices(), b.slices());
        assert_eq!(a.led_keys(), b.led_keys());
    }

    #[test]
    fn misaligned_stack_is_rejected() {
        let (cfg, grid, pupil, illum) = rig(8);
        let vol = blobs(8, vec![0.0], 1.0, 1e-3, 0.0, 6);
        let ds = simulate_intensity_born(&vol, &illum.select(&[1, 2]).unwrap(), &pupil, &grid, &cfg, false).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        let other = illum.select(&[2, 1]).unwrap();
        let tf = compute_tf_stack(&other, &[0.0], &pupil, &grid, &cfg).unwrap();
        let tf = normalize_tf(&tf, &BackgroundIntensity::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(
            accumulate(&norm, &tf, 1.0),
            Err(IdtError::MisalignedLeds { .. })
        ));
        let raw = compute_tf_stack(&illum.select(&[1, 2]).unwrap(), &[0.0], &pupil, &grid, &cfg).unwrap();
        assert!(accumulate(&norm, &raw, 1.0).is_err());
    }

    #[test]
    fn zero_data_gives_zero_volume() {
        let (cfg, grid, pupil, illum) = rig(16);
        let vol = PermittivityVolume::zeros((16, 16), vec![0.0], 1.0).unwrap();
        let sub = illum.select(&[0, 10, 20]).unwrap();
        let ds = simulate_intensity_born(&vol, &sub, &pupil, &grid, &cfg, false).unwrap();
        let params = ReconParams::new(vec![-1.0, 0.0], 1.0).unwrap();
        let rec = reconstruct(&ds, &pupil, &params).unwrap();
        assert!(rec.phase.iter().chain(rec.absorption.iter()).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn closed_form_matches_dense_two_by_two_solve() {
        // Random sums on a 1x1 grid versus Gaussian elimination of the
        // regularized normal equations.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n_leds = rng.random_range(1..5);
            let c = |rng: &mut ChaCha8Rng| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let h: Vec<(Complex64, Complex64, Complex64)> =
                (0..n_leds).map(|_| (c(&mut rng), c(&mut rng), c(&mut rng))).collect();
            let mut acc = Accumulators::new((1, 1), &[0.0], 1.0).unwrap();
            for (l, (hr, hi, g)) in h.iter().enumerate() {
                let one = |v: Complex64| Array2::from_elem((1, 1), v);
                acc.add_led((l as i32, 0), &[(one(*hr), one(*hi))], &one(*g)).unwrap();
            }
            let (alpha, beta) = (rng.random_range(1e-3..1.0), rng.random_range(1e-3..1.0));
            let s = &acc.slices()[0];
            let (rr, ii, ri, br, bi) = (
                s.a_rr[[0, 0]],
                s.a_ii[[0, 0]],
                s.a_ri[[0, 0]],
                s.b_r[[0, 0]],
                s.b_i[[0, 0]],
            );

            // [[rr+a, conj(ri)], [ri, ii+b]] x = [br, bi] via partial pivoting.
            let mut m = [
                [Complex64::new(rr + alpha, 0.0), ri.conj(), br],
                [ri, Complex64::new(ii + beta, 0.0), bi],
            ];
            if m[1][0].norm() > m[0][0].norm() {
                m.swap(0, 1);
            }
            let f = m[1][0] / m[0][0];
            let pivot = m[0];
            for (a, p) in m[1].iter_mut().zip(pivot) {
                *a -= f * p;
            }
            let x_i = m[1][2] / m[1][1];
            let x_r = (m[0][2] - m[0][1] * x_i) / m[0][0];

            let (pr, pi) = (rr + alpha, ii + beta);
            let det = pr * pi - ri.norm_sqr();
            let cr = (pi * br - ri.conj() * bi) / det;
            let ci = (pr * bi - ri * br) / det;
            assert!((cr - x_r).norm() <= 1e-12 * x_r.norm().max(1e-12));
            assert!((ci - x_i).norm() <= 1e-12 * x_i.norm().max(1e-12));
        }
    }

    #[test]
    fn streamed_matches_batch() {
        let (cfg, grid, pupil, illum) = rig(32);
        let z = vec![-4.0, 0.0, 4.0];
        let vol = blobs(32, z.clone(), 4.0, 2e-4, 2e-5, 8);
        let sub = illum.select(&[0, 11, 22, 33, 44, 55, 66, 77, 88]).unwrap();
        let ds = simulate_intensity_born(&vol, &sub, &pupil, &grid, &cfg, false).unwrap();
        let params = ReconParams::new(z.clone(), 4.0).unwrap();
        let streamed = reconstruct(&ds, &pupil, &params).unwrap();
        let batch = solve_tikhonov(batch_acc(&ds, &pupil, &z, 4.0), &params).unwrap();
        let scale = batch.phase.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in streamed.phase.iter().zip(batch.phase.iter()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
        for (a, b) in streamed.absorption.iter().zip(batch.absorption.iter()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
        let _ = grid;
    }

    #[test]
    fn pure_phase_round_trip() {
        let (cfg, grid, pupil, illum) = rig(64);
        let vol = blobs(64, vec![0.0], 1.0, 1e-4, 0.0, 9);
        let ds = simulate_intensity_born(&vol, &illum, &pupil, &grid, &cfg, false).unwrap();
        let params = ReconParams::new(vec![0.0], 1.0)
            .unwrap()
            .with_regularization(Regularization::RelativeToPhase {
                alpha: 1e-3,
                beta: 1e-3,
            });
        let rec = reconstruct(&ds, &pupil, &params).unwrap();
        let truth = vol.real_part(0);
        let got = rec.phase.index_axis(Axis(0), 0).to_owned();
        let corr = band_corr(&got, &truth, &cfg);
        assert!(corr > 0.99, "{corr}");
        let e = |a: &Array3<f64>| a.iter().map(|v| v * v).sum::<f64>();
        let centered = &got - got.mean().unwrap();
        let leak = e(&rec.absorption) / centered.iter().map(|v| v * v).sum::<f64>();
        assert!(leak < 0.05, "{leak}");
        assert!(rec.imag_residual <= SIMULATED_IMAG_LIMIT);
    }

    #[test]
    fn exact_recovery_in_the_measured_band() {
        let (cfg, grid, pupil, illum) = rig(32);
        let vol = blobs(32, vec![0.0], 1.0, 1e-4, 3e-5, 10);
        let tf = compute_tf_stack(&illum, &[0.0], &pupil, &grid, &cfg).unwrap();
        let ds = simulate_intensity_linear(&vol, &tf, &illum, &pupil, &cfg).unwrap();
        let acc = batch_acc(&ds, &pupil, &[0.0], 1.0);
        let well_posed = {
            let s = &acc.slices()[0];
            let peak = s.a_rr.iter().fold(0.0f64, |m, v| m.max(*v));
            Array2::from_shape_fn((32, 32), |i| {
                let (rr, ii, ri) = (s.a_rr[i], s.a_ii[i], s.a_ri[i].norm_sqr());
                let tr = rr + ii;
                let det = rr * ii - ri;
                let min_eig = tr / 2.0 - ((tr / 2.0).powi(2) - det).max(0.0).sqrt();
                min_eig > 1e-6 * peak
            })
        };
        assert!(well_posed.iter().filter(|v| **v).count() > 100);
        let params = ReconParams::new(vec![0.0], 1.0)
            .unwrap()
            .with_regularization(Regularization::RelativeToPhase {
                alpha: 1e-12,
                beta: 1e-12,
            });
        let rec = solve_tikhonov(acc, &params).unwrap();
        let fft = Fft2::new(32, 32);
        for (got, truth) in [
            (rec.phase.index_axis(Axis(0), 0).to_owned(), vol.real_part(0)),
            (rec.absorption.index_axis(Axis(0), 0).to_owned(), vol.imag_part(0)),
        ] {
            let (g, t) = (fft.forward_real(&got), fft.forward_real(&truth));
            let (mut err, mut norm) = (0.0, 0.0);
            for ((idx, a), b) in g.indexed_iter().zip(t.iter()) {
                if well_posed[idx] {
                    err += (a - b).norm_sqr();
                    norm += b.norm_sqr();
                }
            }
            assert!((err / norm).sqrt() <= 1e-6, "{}", (err / norm).sqrt());
        }
    }

    #[test]
    fn larger_alpha_shrinks_phase() {
        let (cfg, grid, pupil, illum) = rig(16);
        let vol = blobs(16, vec![0.0], 1.0, 1e-4, 1e-5, 11);
        let ds =
            simulate_intensity_born(&vol, &illum.select(&[0, 30, 60]).unwrap(), &pupil, &grid, &cfg, false).unwrap();
        let acc = batch_acc(&ds, &pupil, &[0.0], 1.0);
        let mut prev = f64::INFINITY;
        for a in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let p = ReconParams::new(vec![0.0], 1.0)
                .unwrap()
                .with_regularization(Regularization::RelativeToPhase { alpha: a, beta: 1e-3 });
            let rec = solve_tikhonov(acc.clone(), &p).unwrap();
            let n = rec.phase.iter().map(|v| v * v).sum::<f64>();
            assert!(n <= prev * (1.0 + 1e-12));
            prev = n;
        }
    }

    #[test]
    fn regularization_must_be_positive() {
        let acc = Accumulators::new((4, 4), &[0.0], 1.0).unwrap();
        let p = ReconParams::new(vec![0.0], 1.0).unwrap();
        // All-zero sums make relative weights vanish.
        assert!(matches!(
            solve_tikhonov(acc.clone(), &p),
            Err(IdtError::Regularization { .. })
        ));
        let p = p.with_regularization(Regularization::Absolute { alpha: 1.0, beta: -1.0 });
        assert!(solve_tikhonov(acc, &p).is_err());
    }

    #[test]
    fn height_conversion() {
        let rec = ReconstructionVolume {
            phase: Array3::from_elem((1, 2, 2), 6.552e-3),
            absorption: Array3::zeros((1, 2, 2)),
            slice_z: vec![0.0],
            dz: 10.0,
            alpha: 1.0,
            beta: 1.0,
            imag_residual: 0.0,
        };
        let h = height_map(&rec, 0, 1.52, 10.0).unwrap();
        assert!((h[[0, 0]] - 0.05).abs() < 1e-12);
        assert!(height_map(&rec, 0, 1.0, 10.0).is_err());
        assert!(height_map(&rec, 1, 1.5, 10.0).is_err());
        let zero = ReconstructionVolume {
            phase: Array3::zeros((1, 2, 2)),
            ..rec
        };
        assert!(height_map(&zero, 0, 1.52, 10.0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn refractive_index_view() {
        let rec = ReconstructionVolume {
            phase: Array3::from_elem((1, 1, 1), 0.21),
            absorption: Array3::zeros((1, 1, 1)),
            slice_z: vec![0.0],
            dz: 1.0,
            alpha: 1.0,
            beta: 1.0,
            imag_residual: 0.0,
        };
        let (n, k) = rec.refractive_index(1.0);
        assert!((n[[0, 0, 0]] - 1.1).abs() < 1e-12);
        assert_eq!(k[[0, 0, 0]], 0.0);
    }

    #[test]
    fn stats_bound_memory_independent_of_leds() {
        let (cfg, grid, pupil, illum) = rig(16);
        let vol = blobs(16, vec![0.0, 1.0, 2.0], 1.0, 1e-4, 0.0, 12);
        let z = vec![0.0, 1.0, 2.0];
        let params = ReconParams::new(z, 1.0).unwrap();
        let mut peaks = Vec::new();
        for n in [4usize, 16, 64] {
            let sub = illum.select(&(0..n).collect::<Vec<_>>()).unwrap();
            let ds = simulate_intensity_born(&vol, &sub, &pupil, &grid, &cfg, false).unwrap();
            let (_, st) = reconstruct_with_stats(&ds, &pupil, &params).unwrap();
            assert!(st.peak_slabs_per_slice() <= 6.0);
            assert_eq!(st.n_leds, n);
            peaks.push(st.peak_bytes);
        }
        assert!(peaks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn meter_tracks_peak() {
        let m = MemoryMeter::default();
        m.acquire(10);
        m.acquire(5);
        m.release(5);
        m.acquire(3);
        assert_eq!((m.current(), m.peak()), (13, 15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn determinant_is_positive(rr in 0.0f64..10.0, ii in 0.0f64..10.0, t in 0.0f64..1.0, ph in 0.0f64..6.3, a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
            // Cauchy-Schwarz keeps |a_ri|^2 <= a_rr a_ii.
            let ri = Complex64::from_polar((rr * ii).sqrt() * t, ph);
            prop_assert!((rr + a) * (ii + b) - ri.norm_sqr() > 0.0);
        }
    }
}
