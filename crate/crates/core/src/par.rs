//! Deterministic parallel reductions.
//!
//! Floating-point sums over samples are accumulated in fixed-size index
//! chunks; chunk partial sums are combined sequentially in index order, so
//! results are bit-identical regardless of thread count or scheduling.

use ndarray::Array2;
use rayon::prelude::*;

/// Number of samples accumulated sequentially per parallel chunk.
const CHUNK: usize = 8;

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Sums `term(i)` into a matrix accumulator for `i` in `0..n`.
pub(crate) fn par_sum_array2<F>(n: usize, shape: (usize, usize), term: F) -> Array2<f64>
where
    F: Fn(usize, &mut Array2<f64>) + Sync,
{
    let partials: Vec<Array2<f64>> = chunk_ranges(n)
        .into_par_iter()
        .map(|range| {
            let mut acc = Array2::zeros(shape);
            for i in range {
                term(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = Array2::zeros(shape);
    for p in partials {
        total += &p;
    }
    total
}

/// Sums `term(i)` for `i` in `0..n`.
pub(crate) fn par_sum_f64<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = chunk_ranges(n)
        .into_par_iter()
        .map(|range| range.map(&term).sum::<f64>())
        .collect();
    partials.iter().sum()
}

/// Maps `i -> f(i)` in parallel, preserving index order.
pub(crate) fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
