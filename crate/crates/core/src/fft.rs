//! Two-dimensional DFT on row-major `(ny, nx)` arrays.
//!
//! Forward: `F[k] = sum_n f[n] exp(-i u_k . x_n)` (unnormalized).
//! Inverse: `f[n] = (1/N) sum_k F[k] exp(+i u_k . x_n)`.
//! Bins follow the standard DFT ordering `0, 1, .., n/2 - 1, -n/2, .., -1`.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    ny: usize,
    nx: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("ny", &self.ny)
            .field("nx", &self.nx)
            .finish()
    }
}

impl Fft2 {
    pub fn new(ny: usize, nx: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            ny,
            nx,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.transform(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut Array2<Complex64>) {
        self.transform(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.nx * self.ny) as f64;
        data.mapv_inplace(|v| v * scale);
    }

    pub fn forward_real(&self, data: &Array2<f64>) -> Array2<Complex64> {
        let mut out = data.mapv(|v| Complex64::new(v, 0.0));
        self.forward(&mut out);
        out
    }

    fn transform(&self, data: &mut Array2<Complex64>, rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.dim(), (self.ny, self.nx), "FFT plan/array shape mismatch");
        if !data.is_standard_layout() {
            *data = data.as_standard_layout().to_owned();
        }
        let slice = data.as_slice_mut().expect("standard layout arrays are contiguous");
        rows.process(slice);

        let mut column = vec![Complex64::new(0.0, 0.0); self.ny];
        let mut scratch = vec![Complex64::new(0.0, 0.0); cols.get_inplace_scratch_len()];
        for mut lane in data.axis_iter_mut(Axis(1)) {
            for (dst, src) in column.iter_mut().zip(lane.iter()) {
                *dst = *src;
            }
            cols.process_with_scratch(&mut column, &mut scratch);
            for (dst, src) in lane.iter_mut().zip(column.iter()) {
                *dst = *src;
            }
        }
    }
}

/// Angular frequency (rad/um) of DFT bin `index` for `n` samples at pitch `d`.
pub fn angular_frequency(index: usize, n: usize, d: f64) -> f64 {
    let signed = if index < n.div_ceil(2) {
        index as i64
    } else {
        index as i64 - n as i64
    };
    signed as f64 * (2.0 * std::f64::consts::PI / (n as f64 * d))
}

/// Index of the bin holding `-u` for bin `index`. The Nyquist bin of an even
/// length maps onto itself.
pub fn mirror_index(index: usize, n: usize) -> usize {
    (n - index) % n
}
