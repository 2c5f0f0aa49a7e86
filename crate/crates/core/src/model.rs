//! Core data types and shifted partial tracing.
//!
//! Samples are `k1 x k2` matrices `X`, and covariances of such samples are
//! fourth-order tensors `C[i,j,k,l] = cov(X[i,j], X[k,l])`. The shifted
//! partial traces contract one index pair of such a tensor along an off-set
//! diagonal:
//!
//! ```text
//! T1^d(C)[i,k] = sum_{j < k2-d} C[i, j, k, j+d]        (k1 x k1)
//! T2^d(C)[j,l] = sum_{i < k1-d} C[i, j, i+d, l]        (k2 x k2)
//! T^d(C)       = sum_{i < k1-d, j < k2-d} C[i, j, i+d, j+d]
//! ```
//!
//! For the empirical covariance of a sample stack these contractions never
//! require the dense tensor: per sample they reduce to products of shifted
//! sub-blocks of `X`, costing `O(k^3)` time and `O(k^2)` memory. The dense
//! [`CovTensor4`] versions are retained as brute-force oracles for small
//! grids and are guarded by an explicit size cap.

use ndarray::{s, Array2, Array3, Array4, ArrayView2};

use crate::error::{Result, SptError};
use crate::par;

/// Default cap on `k1 * k2` for dense fourth-order tensors.
///
/// A dense covariance takes `(k1*k2)^2` doubles; the cap keeps that at
/// a 256 x 256 grid of points (0.5 MB), enough for every oracle test while
/// making accidental `O(K^4)` materialization at production sizes an error.
pub const DEFAULT_ORACLE_CAP: usize = 256;

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SptError::NonFinite {
            context: context.to_string(),
        })
    }
}

fn check_bandwidth(d: usize, max: usize) -> Result<()> {
    if d > max {
        Err(SptError::BandwidthOutOfRange { d, max })
    } else {
        Ok(())
    }
}

/// Bandwidth of the banded covariance component.
///
/// A tensor `B` is banded by `d` when `B[i,j,k,l] = 0` whenever
/// `max(|i-k|, |j-l|) >= d`; `d = 0` is the zero tensor and `d = 1` keeps
/// only the per-cell diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Bandwidth(pub usize);

impl Bandwidth {
    /// Validates `d <= min(k1, k2)`.
    pub fn validate(self, k1: usize, k2: usize) -> Result<()> {
        check_bandwidth(self.0, k1.min(k2))
    }
}

impl std::fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A stack of `n` matrix-valued samples on a common `k1 x k2` grid.
#[derive(Debug, Clone)]
pub struct SampleStack {
    data: Array3<f64>,
    centered: bool,
}

impl SampleStack {
    /// Wraps an `n x k1 x k2` array of samples. Entries must be finite.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        Self::with_centered(data, false)
    }

    /// Wraps sample data carrying a `centered` marker.
    ///
    /// When `centered` is set, the per-cell sample mean must already be zero
    /// to within `1e-10 * max|entry|`.
    pub fn with_centered(data: Array3<f64>, centered: bool) -> Result<Self> {
        let (n, k1, k2) = data.dim();
        if n == 0 || k1 == 0 || k2 == 0 {
            return Err(SptError::ShapeMismatch {
                expected: "nonempty stack (n, k1, k2 all positive)".into(),
                got: format!("{} x {} x {}", n, k1, k2),
            });
        }
        check_finite(data.as_slice().expect("stack is standard layout"), "sample stack")?;
        let stack = SampleStack { data, centered };
        if centered {
            let scale = stack.max_abs();
            let mean = stack.mean_surface();
            let worst = mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if worst > 1e-10 * scale {
                return Err(SptError::InvalidConfig(format!(
                    "stack marked centered but per-cell mean reaches {worst:.3e}"
                )));
            }
        }
        Ok(stack)
    }

    pub fn n(&self) -> usize {
        self.data.dim().0
    }

    pub fn k1(&self) -> usize {
        self.data.dim().1
    }

    pub fn k2(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn sample(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), i)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Per-cell sample mean surface.
    pub fn mean_surface(&self) -> Array2<f64> {
        let n = self.n() as f64;
        let mut mean = Array2::zeros((self.k1(), self.k2()));
        for i in 0..self.n() {
            mean += &self.sample(i);
        }
        mean / n
    }

    /// Returns a copy with the per-cell mean subtracted from every sample.
    ///
    /// Already-centered stacks are returned unchanged (cheap clone of the
    /// marker state aside, re-centering would only add rounding noise).
    pub fn center(&self) -> SampleStack {
        if self.centered {
            return self.clone();
        }
        let mean = self.mean_surface();
        let mut data = self.data.clone();
        for mut sample in data.outer_iter_mut() {
            sample -= &mean;
        }
        SampleStack {
            data,
            centered: true,
        }
    }
}

/// Symmetric `k x k` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Validates squareness, finiteness, and symmetry to `1e-8` relative.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(SptError::ShapeMismatch {
                expected: "square matrix".into(),
                got: format!("{} x {}", r, c),
            });
        }
        check_finite(data.as_slice().expect("standard layout"), "symmetric matrix")?;
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-8 * scale;
        for i in 0..r {
            for j in (i + 1)..r {
                if (data[[i, j]] - data[[j, i]]).abs() > tol {
                    return Err(SptError::ShapeMismatch {
                        expected: "symmetric matrix".into(),
                        got: format!(
                            "asymmetry {:.3e} at ({}, {})",
                            (data[[i, j]] - data[[j, i]]).abs(),
                            i,
                            j
                        ),
                    });
                }
            }
        }
        Ok(SymMatrix { data })
    }

    pub fn identity(k: usize) -> SymMatrix {
        SymMatrix {
            data: Array2::eye(k),
        }
    }

    pub fn zeros(k: usize) -> SymMatrix {
        SymMatrix {
            data: Array2::zeros((k, k)),
        }
    }

    pub fn k(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Shifted trace `sum_i A[i, i+d]` of the `d`-th superdiagonal.
    pub fn shifted_trace(&self, d: usize) -> f64 {
        shifted_trace(self.data.view(), d)
    }

    pub fn fro_norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix {
            data: &self.data * c,
        }
    }
}

/// Symmetrizes a square matrix: `(A + A^T) / 2`, exactly symmetric entrywise.
pub fn symmetrize(a: ArrayView2<'_, f64>) -> Result<SymMatrix> {
    let (r, c) = a.dim();
    if r != c {
        return Err(SptError::ShapeMismatch {
            expected: "square matrix".into(),
            got: format!("{} x {}", r, c),
        });
    }
    check_finite(
        a.as_standard_layout().as_slice().expect("standard layout"),
        "symmetrize",
    )?;
    let mut out = Array2::zeros((r, r));
    for i in 0..r {
        out[[i, i]] = a[[i, i]];
        for j in (i + 1)..r {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(SymMatrix { data: out })
}

/// Shifted trace `sum_i a[i, i+d]` of a (not necessarily symmetric) matrix.
pub fn shifted_trace(a: ArrayView2<'_, f64>, d: usize) -> f64 {
    let k = a.nrows().min(a.ncols());
    if d >= k {
        return 0.0;
    }
    (0..k - d).map(|i| a[[i, i + d]]).sum()
}

// ---------------------------------------------------------------------------
// Per-sample shifted partial traces
// ---------------------------------------------------------------------------

/// First shifted partial trace of a single sample:
/// `out[i,k] = sum_{j < k2-d} x[i,j] * x[k,j+d]`.
///
/// Equals `T1^d(x (x) x)` for the rank-one tensor of the sample, computed as
/// the `k1 x k1` product of `x[:, :k2-d]` with the transpose of `x[:, d:]`.
pub fn spt1_sample(x: ArrayView2<'_, f64>, d: usize) -> Result<Array2<f64>> {
    let (k1, k2) = x.dim();
    check_bandwidth(d, k2)?;
    if d == k2 {
        return Ok(Array2::zeros((k1, k1)));
    }
    let left = x.slice(s![.., ..k2 - d]);
    let right = x.slice(s![.., d..]);
    Ok(left.dot(&right.t()))
}

/// Second shifted partial trace of a single sample:
/// `out[j,l] = sum_{i < k1-d} x[i,j] * x[i+d,l]`.
pub fn spt2_sample(x: ArrayView2<'_, f64>, d: usize) -> Result<Array2<f64>> {
    let (k1, k2) = x.dim();
    check_bandwidth(d, k1)?;
    if d == k1 {
        return Ok(Array2::zeros((k2, k2)));
    }
    let top = x.slice(s![..k1 - d, ..]);
    let bottom = x.slice(s![d.., ..]);
    Ok(top.t().dot(&bottom))
}

/// Shifted trace of a single sample:
/// `sum_{i < k1-d, j < k2-d} x[i,j] * x[i+d,j+d]`.
pub fn strace_sample(x: ArrayView2<'_, f64>, d: usize) -> Result<f64> {
    let (k1, k2) = x.dim();
    check_bandwidth(d, k1.min(k2))?;
    if d == k1 || d == k2 {
        return Ok(0.0);
    }
    let a = x.slice(s![..k1 - d, ..k2 - d]);
    let b = x.slice(s![d.., d..]);
    Ok((&a * &b).sum())
}

// ---------------------------------------------------------------------------
// Stack averages
// ---------------------------------------------------------------------------

/// `(1/N) sum_n spt1_sample(X_n, d)`, parallelized across samples.
pub fn spt1_stack(samples: &SampleStack, d: usize) -> Result<Array2<f64>> {
    check_bandwidth(d, samples.k2())?;
    let k1 = samples.k1();
    let n = samples.n();
    let sum = par::par_sum_array2(n, (k1, k1), |i, acc| {
        *acc += &spt1_sample(samples.sample(i), d).expect("bandwidth checked");
    });
    Ok(sum / n as f64)
}

/// `(1/N) sum_n spt2_sample(X_n, d)`, parallelized across samples.
pub fn spt2_stack(samples: &SampleStack, d: usize) -> Result<Array2<f64>> {
    check_bandwidth(d, samples.k1())?;
    let k2 = samples.k2();
    let n = samples.n();
    let sum = par::par_sum_array2(n, (k2, k2), |i, acc| {
        *acc += &spt2_sample(samples.sample(i), d).expect("bandwidth checked");
    });
    Ok(sum / n as f64)
}

/// `(1/N) sum_n strace_sample(X_n, d)`.
pub fn strace_stack(samples: &SampleStack, d: usize) -> Result<f64> {
    check_bandwidth(d, samples.k1().min(samples.k2()))?;
    let n = samples.n();
    let sum = par::par_sum_f64(n, |i| {
        strace_sample(samples.sample(i), d).expect("bandwidth checked")
    });
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Dense fourth-order tensors (oracle scale)
// ---------------------------------------------------------------------------

/// Dense covariance tensor `C[i,j,k,l]` on a `k1 x k2` grid.
///
/// Construction is refused above a grid-point cap so that production paths
/// can never silently allocate `O(K^4)` memory; the dense representation
/// exists to serve as a brute-force oracle and for tiny-problem diagnostics.
#[derive(Debug, Clone)]
pub struct CovTensor4 {
    data: Array4<f64>,
}

impl CovTensor4 {
    /// Wraps a `k1 x k2 x k1 x k2` array, enforcing [`DEFAULT_ORACLE_CAP`].
    pub fn new(data: Array4<f64>) -> Result<Self> {
        Self::with_cap(data, DEFAULT_ORACLE_CAP)
    }

    /// Wraps a dense tensor under an explicit grid-point cap.
    pub fn with_cap(data: Array4<f64>, cap: usize) -> Result<Self> {
        let (a, b, c, d) = data.dim();
        if a != c || b != d {
            return Err(SptError::ShapeMismatch {
                expected: "tensor with matching index pairs (k1, k2, k1, k2)".into(),
                got: format!("{} x {} x {} x {}", a, b, c, d),
            });
        }
        let points = a * b;
        if points > cap {
            return Err(SptError::OracleCapExceeded { points, cap });
        }
        check_finite(data.as_slice().expect("standard layout"), "dense tensor")?;
        Ok(CovTensor4 { data })
    }

    /// Zero tensor on a `k1 x k2` grid (subject to the default cap).
    pub fn zeros(k1: usize, k2: usize) -> Result<Self> {
        Self::new(Array4::zeros((k1, k2, k1, k2)))
    }

    pub fn k1(&self) -> usize {
        self.data.dim().0
    }

    pub fn k2(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[[i, j, k, l]]
    }

    /// Applies the tensor to a surface: `y[i,j] = sum_{k,l} C[i,j,k,l] x[k,l]`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (k1, k2) = (self.k1(), self.k2());
        if x.dim() != (k1, k2) {
            return Err(SptError::ShapeMismatch {
                expected: format!("{} x {}", k1, k2),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        let m = self
            .data
            .view()
            .into_shape_with_order((k1 * k2, k1 * k2))
            .expect("standard layout");
        let xv = x.to_owned().into_shape_with_order(k1 * k2).expect("shape");
        let y = m.dot(&xv);
        Ok(y.into_shape_with_order((k1, k2)).expect("shape"))
    }

    pub fn fro_norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute deviation from pair symmetry `C[i,j,k,l] = C[k,l,i,j]`.
    pub fn pair_asymmetry(&self) -> f64 {
        let (k1, k2) = (self.k1(), self.k2());
        let mut worst = 0.0f64;
        for i in 0..k1 {
            for j in 0..k2 {
                for k in 0..k1 {
                    for l in 0..k2 {
                        worst = worst.max((self.data[[i, j, k, l]] - self.data[[k, l, i, j]]).abs());
                    }
                }
            }
        }
        worst
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &CovTensor4, c: f64) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(SptError::ShapeMismatch {
                expected: format!("{:?}", self.data.dim()),
                got: format!("{:?}", other.data.dim()),
            });
        }
        self.data.scaled_add(c, &other.data);
        Ok(())
    }
}

/// First shifted partial trace of a dense tensor (brute force).
pub fn spt1_tensor(t: &CovTensor4, d: usize) -> Result<Array2<f64>> {
    let (k1, k2) = (t.k1(), t.k2());
    check_bandwidth(d, k2)?;
    let mut out = Array2::zeros((k1, k1));
    for i in 0..k1 {
        for k in 0..k1 {
            let mut acc = 0.0;
            for j in 0..k2.saturating_sub(d) {
                acc += t.at(i, j, k, j + d);
            }
            out[[i, k]] = acc;
        }
    }
    Ok(out)
}

/// Second shifted partial trace of a dense tensor (brute force).
pub fn spt2_tensor(t: &CovTensor4, d: usize) -> Result<Array2<f64>> {
    let (k1, k2) = (t.k1(), t.k2());
    check_bandwidth(d, k1)?;
    let mut out = Array2::zeros((k2, k2));
    for j in 0..k2 {
        for l in 0..k2 {
            let mut acc = 0.0;
            for i in 0..k1.saturating_sub(d) {
                acc += t.at(i, j, i + d, l);
            }
            out[[j, l]] = acc;
        }
    }
    Ok(out)
}

/// Shifted trace of a dense tensor (brute force).
pub fn strace_tensor(t: &CovTensor4, d: usize) -> Result<f64> {
    let (k1, k2) = (t.k1(), t.k2());
    check_bandwidth(d, k1.min(k2))?;
    let mut acc = 0.0;
    for i in 0..k1.saturating_sub(d) {
        for j in 0..k2.saturating_sub(d) {
            acc += t.at(i, j, i + d, j + d);
        }
    }
    Ok(acc)
}

/// Dense separable tensor `T[i,j,k,l] = a1[i,k] * a2[j,l]` (oracle scale).
pub fn separable_tensor(a1: &SymMatrix, a2: &SymMatrix) -> Result<CovTensor4> {
    let (k1, k2) = (a1.k(), a2.k());
    let mut data = Array4::zeros((k1, k2, k1, k2));
    for i in 0..k1 {
        for j in 0..k2 {
            for k in 0..k1 {
                for l in 0..k2 {
                    data[[i, j, k, l]] = a1.as_array()[[i, k]] * a2.as_array()[[j, l]];
                }
            }
        }
    }
    CovTensor4::new(data)
}

/// Dense empirical covariance `(1/N) sum_n X_n (x) X_n` (oracle scale).
///
/// With `center` set the per-cell mean surface is subtracted first.
pub fn empirical_cov(samples: &SampleStack, center: bool) -> Result<CovTensor4> {
    let (n, k1, k2) = (samples.n(), samples.k1(), samples.k2());
    let points = k1 * k2;
    if points > DEFAULT_ORACLE_CAP {
        return Err(SptError::OracleCapExceeded {
            points,
            cap: DEFAULT_ORACLE_CAP,
        });
    }
    let centered;
    let stack = if center && !samples.is_centered() {
        centered = samples.center();
        &centered
    } else {
        samples
    };
    let mut data = Array4::zeros((k1, k2, k1, k2));
    for s in 0..n {
        let x = stack.sample(s);
        for i in 0..k1 {
            for j in 0..k2 {
                let xij = x[[i, j]];
                for k in 0..k1 {
                    for l in 0..k2 {
                        data[[i, j, k, l]] += xij * x[[k, l]];
                    }
                }
            }
        }
    }
    data /= n as f64;
    CovTensor4::new(data)
}
