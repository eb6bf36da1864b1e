//! Image-quality measures used by the report command and the test suites.
//!
//! "In band" means `0 < |u| <= 2 NA k0`, the lateral support of the transfer
//! functions; DC is excluded because the phase DC is never measured.

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::fft::Fft2;
use crate::optics::{FrequencyGrid, OpticalConfig};
use crate::phantom::BarOrientation;

fn in_band_mask(cfg: &OpticalConfig) -> Array2<bool> {
    let grid = FrequencyGrid::new(cfg);
    let r = 2.0 * cfg.pupil_cutoff();
    Array2::from_shape_fn(cfg.shape(), |(iy, ix)| {
        let (uy, ux) = grid.u(iy, ix);
        let q = ux.hypot(uy);
        q > 0.0 && q <= r
    })
}

fn spectra(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &OpticalConfig) -> (Array2<Complex64>, Array2<Complex64>) {
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    (fft.forward_real(&a.to_owned()), fft.forward_real(&b.to_owned()))
}

/// Normalized in-band correlation of two real images (0 when either is empty).
pub fn band_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &OpticalConfig) -> f64 {
    let (fa, fb) = spectra(a, b, cfg);
    let mask = in_band_mask(cfg);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for ((x, y), &m) in fa.iter().zip(fb.iter()).zip(mask.iter()) {
        if m {
            ab += (x * y.conj()).re;
            aa += x.norm_sqr();
            bb += y.norm_sqr();
        }
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// In-band `||F(a) - F(b)|| / ||F(b)||`; the absolute norm when `b` has no
/// in-band content.
pub fn band_nrmse(a: ArrayView2<f64>, truth: ArrayView2<f64>, cfg: &OpticalConfig) -> f64 {
    let (fa, fb) = spectra(a, truth, cfg);
    let mask = in_band_mask(cfg);
    let n = (cfg.nx() * cfg.ny()) as f64;
    let (mut diff, mut bb) = (0.0, 0.0);
    for ((x, y), &m) in fa.iter().zip(fb.iter()).zip(mask.iter()) {
        if m {
            diff += (x - y).norm_sqr();
            bb += y.norm_sqr();
        }
    }
    if bb == 0.0 {
        (diff / n).sqrt()
    } else {
        (diff / bb).sqrt()
    }
}

/// In-band energy `sum |F(a)|^2 / N` (Parseval-scaled).
pub fn band_energy(a: ArrayView2<f64>, cfg: &OpticalConfig) -> f64 {
    let fft = Fft2::new(cfg.ny(), cfg.nx());
    let fa = fft.forward_real(&a.to_owned());
    let mask = in_band_mask(cfg);
    let n = (cfg.nx() * cfg.ny()) as f64;
    fa.iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(x, _)| x.norm_sqr())
        .sum::<f64>()
        / n
}

/// Total energy `sum |a|^2`.
pub fn energy(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Row (`Axis(0)`) or column (`Axis(1)`) through an image.
pub fn cutline(img: ArrayView2<f64>, axis: Axis, index: usize) -> Vec<f64> {
    img.index_axis(axis, index).to_vec()
}

/// Profile across a bar group: positions (um, relative to the group centre)
/// and values averaged along the middle half of the bar length.
pub fn bar_profile(
    img: ArrayView2<f64>,
    cfg: &OpticalConfig,
    orientation: BarOrientation,
    center: (f64, f64),
    length_um: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (img, pitch_across, pitch_along, c_across, c_along) = match orientation {
        BarOrientation::Vertical => (img.view(), cfg.dx(), cfg.dy(), center.1, center.0),
        BarOrientation::Horizontal => (img.t(), cfg.dy(), cfg.dx(), center.0, center.1),
    };
    let (n_along, n_across) = img.dim();
    let rows: Vec<usize> = (0..n_along)
        .filter(|&i| (i as f64 * pitch_along - c_along).abs() <= length_um / 4.0)
        .collect();
    let mut pos = Vec::with_capacity(n_across);
    let mut val = Vec::with_capacity(n_across);
    for j in 0..n_across {
        pos.push(j as f64 * pitch_across - c_across);
        let s: f64 = rows.iter().map(|&i| img[[i, j]]).sum();
        val.push(if rows.is_empty() { 0.0 } else { s / rows.len() as f64 });
    }
    (pos, val)
}

/// Magnitude of the `1 / period` component of a mean-removed profile.
pub fn fundamental_amplitude(pos: &[f64], val: &[f64], period_um: f64) -> f64 {
    if val.is_empty() {
        return 0.0;
    }
    let mean = val.iter().sum::<f64>() / val.len() as f64;
    let w = 2.0 * std::f64::consts::PI / period_um;
    let acc = pos.iter().zip(val).fold(Complex64::new(0.0, 0.0), |a, (&x, &v)| {
        a + (v - mean) * Complex64::from_polar(1.0, -w * x)
    });
    acc.norm() / val.len() as f64
}

/// Modulation depth of a reconstructed bar group: ratio of its fundamental
/// amplitude to that of the ground truth.
pub fn modulation_depth(
    recon: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    cfg: &OpticalConfig,
    period_um: f64,
    orientation: BarOrientation,
    center: (f64, f64),
    length_um: f64,
) -> f64 {
    let (pr, vr) = bar_profile(recon, cfg, orientation, center, length_um);
    let (pt, vt) = bar_profile(truth, cfg, orientation, center, length_um);
    let t = fundamental_amplitude(&pt, &vt, period_um);
    if t == 0.0 {
        0.0
    } else {
        fundamental_amplitude(&pr, &vr, period_um) / t
    }
}

/// Binary erosion with a `(2r + 1)^2` square.
pub fn erode(mask: &Array2<bool>, r: usize) -> Array2<bool> {
    let (ny, nx) = mask.dim();
    Array2::from_shape_fn((ny, nx), |(iy, ix)| {
        if iy < r || ix < r || iy + r >= ny || ix + r >= nx {
            return false;
        }
        (iy - r..=iy + r).all(|y| (ix - r..=ix + r).all(|x| mask[[y, x]]))
    })
}

/// Mean inside fully covered pixels minus mean over the uncovered pixels of
/// the pattern's bounding box, both eroded by `erosion_px`.
pub fn plateau_step(img: ArrayView2<f64>, coverage: &Array2<f64>, erosion_px: usize) -> f64 {
    let inside = coverage.mapv(|c| c >= 1.0);
    let mut bbox = (usize::MAX, 0usize, usize::MAX, 0usize);
    for ((iy, ix), &c) in coverage.indexed_iter() {
        if c > 0.0 {
            bbox = (bbox.0.min(iy), bbox.1.max(iy), bbox.2.min(ix), bbox.3.max(ix));
        }
    }
    if bbox.0 == usize::MAX {
        return 0.0;
    }
    let outside = Array2::from_shape_fn(coverage.dim(), |(iy, ix)| {
        coverage[[iy, ix]] == 0.0 && iy >= bbox.0 && iy <= bbox.1 && ix >= bbox.2 && ix <= bbox.3
    });
    let mean_over = |m: &Array2<bool>| {
        let (s, n) = img
            .iter()
            .zip(m.iter())
            .filter(|(_, &k)| k)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    mean_over(&erode(&inside, erosion_px)) - mean_over(&erode(&outside, erosion_px))
}
