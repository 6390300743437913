//! 2-D FFT on the periodic unit square.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    fn transform(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        rows.process(data);
        let mut col = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = data[r * w + c];
            }
            cols.process(&mut col);
            for r in 0..h {
                data[r * w + c] = col[r];
            }
        }
    }

    /// Unnormalized forward transform, row-major `[H, W]`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform including the 1/(HW) normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.row_inv, &self.col_inv);
        let s = 1.0 / (self.h * self.w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn forward_real(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    pub fn inverse_real(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut buf = spec.to_vec();
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Signed integer wavenumbers `(ky, kx)` of flat index `i`.
    pub fn wavenumber(&self, i: usize) -> (f64, f64) {
        (signed(i / self.w, self.h), signed(i % self.w, self.w))
    }

    /// True for Nyquist rows/columns on even grids (no derivative there).
    pub fn is_nyquist(&self, i: usize) -> bool {
        let (r, c) = (i / self.w, i % self.w);
        (self.h % 2 == 0 && r == self.h / 2) || (self.w % 2 == 0 && c == self.w / 2)
    }
}

fn signed(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}
