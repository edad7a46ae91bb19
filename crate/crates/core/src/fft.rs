//! Thin multi-dimensional wrappers over `rustfft`.
//!
//! Arrays are row-major with the last axis fastest. Transforms are
//! unnormalized in both directions, matching `rustfft`.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

pub(crate) struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft(n, FftDirection::Forward),
            inverse: planner.plan_fft(n, FftDirection::Inverse),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.n
    }

    /// In-place transform of an `n x n` array.
    pub(crate) fn process(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * n);
        let plan = if inverse { &self.inverse } else { &self.forward };
        // rows
        plan.process(data);
        // columns
        let mut column = vec![Complex64::new(0.0, 0.0); n];
        for col in 0..n {
            for row in 0..n {
                column[row] = data[row * n + col];
            }
            plan.process(&mut column);
            for row in 0..n {
                data[row * n + col] = column[row];
            }
        }
    }
}

/// Unnormalized transform of a 1-D or 2-D array with `n` points per axis.
pub(crate) fn transform(data: &mut [Complex64], dim: usize, n: usize, inverse: bool) {
    match dim {
        1 => {
            let mut planner = FftPlanner::new();
            let direction = if inverse {
                FftDirection::Inverse
            } else {
                FftDirection::Forward
            };
            planner.plan_fft(n, direction).process(data);
        }
        2 => Fft2::new(n).process(data, inverse),
        _ => unreachable!("only 1-D and 2-D grids are supported"),
    }
}

/// Signed wavenumber of FFT bin `index` on an `n`-point periodic grid.
pub(crate) fn signed_wavenumber(index: usize, n: usize) -> i64 {
    if index <= n / 2 {
        index as i64
    } else {
        index as i64 - n as i64
    }
}

/// FFT bin holding signed wavenumber `k` on an `n`-point grid.
pub(crate) fn bin(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}
