//! Internal 2D FFT helpers on top of rustfft.
//!
//! Plans are cached globally per (length, direction). Inverse transforms are
//! normalized by `1 / (rows * cols)` so that `ifft2(fft2(x)) == x`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

type PlanKey = (usize, bool);

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            let direction = if inverse {
                FftDirection::Inverse
            } else {
                FftDirection::Forward
            };
            planner.plan_fft(len, direction)
        })
        .clone()
}

/// Smallest 5-smooth integer `>= n` (sizes rustfft handles without Bluestein).
pub(crate) fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2usize, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// In-place 2D FFT over both axes of a complex matrix.
pub(crate) fn fft2(a: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = a.dim();
    let row_fft = plan(cols, inverse);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for mut row in a.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        row_fft.process_with_scratch(slice, &mut scratch);
    }
    let col_fft = plan(rows, inverse);
    scratch.resize(col_fft.get_inplace_scratch_len().max(1), Complex64::default());
    let mut col_buf = vec![Complex64::default(); rows];
    for j in 0..cols {
        for i in 0..rows {
            col_buf[i] = a[[i, j]];
        }
        col_fft.process_with_scratch(&mut col_buf, &mut scratch);
        for i in 0..rows {
            a[[i, j]] = col_buf[i];
        }
    }
    if inverse {
        let scale = 1.0 / (rows * cols) as f64;
        a.mapv_inplace(|v| v * scale);
    }
}

/// Forward 2D FFT of a real matrix zero-padded into `shape`.
pub(crate) fn fft2_real_padded(x: &Array2<f64>, shape: (usize, usize)) -> Array2<Complex64> {
    let mut buf = Array2::from_elem(shape, Complex64::default());
    for ((i, j), &v) in x.indexed_iter() {
        buf[[i, j]] = Complex64::new(v, 0.0);
    }
    fft2(&mut buf, false);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn roundtrip_recovers_input() {
        let x = Array2::from_shape_fn((7, 5), |(i, j)| (i * 5 + j) as f64 * 0.37 - 3.0);
        let mut buf = x.mapv(|v| Complex64::new(v, 0.0));
        fft2(&mut buf, false);
        fft2(&mut buf, true);
        for ((i, j), v) in buf.indexed_iter() {
            assert_relative_eq!(v.re, x[[i, j]], epsilon = 1e-12);
            assert_relative_eq!(v.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fast_len_is_five_smooth_and_minimal() {
        assert_eq!(next_fast_len(1), 1);
        assert_eq!(next_fast_len(59), 60);
        assert_eq!(next_fast_len(60), 60);
        assert_eq!(next_fast_len(97), 100);
        assert_eq!(next_fast_len(159), 160);
    }

    #[test]
    fn dc_component_is_the_sum() {
        let x = Array2::from_elem((3, 4), 2.0);
        let hat = fft2_real_padded(&x, (3, 4));
        assert_relative_eq!(hat[[0, 0]].re, 24.0, epsilon = 1e-12);
        assert_relative_eq!(hat[[0, 0]].im, 0.0, epsilon = 1e-12);
    }
}
