//! Estimation pipelines for the separable-plus-banded model and baselines.
//!
//! Given centered samples with covariance `C = A1 (x) A2 + B` where `B` is
//! banded by `d`, the shifted partial traces at lag `d` annihilate `B` and
//! satisfy `T^d(C) * A1 (x) A2 = T1^d(C) (x) T2^d(C)`, so
//!
//! ```text
//! a1 = sym(T1^d(C_N))          a2 = sym(T2^d(C_N)) / T^d(C_N)
//! ```
//!
//! estimates the separable part from the empirical covariance without ever
//! forming it. The banded part is then recovered either as the Toeplitz
//! average of the residual (stationary kind), or as the dense in-band
//! residual slices (banded kind). Baselines: plain partial tracing (`d = 0`),
//! nearest Kronecker product via alternating least squares, and the raw
//! empirical covariance (oracle scale only).

use ndarray::{Array2, Array4, ArrayView2};

use crate::error::{Result, SptError};
use crate::model::{
    self, symmetrize, Bandwidth, CovTensor4, SampleStack, SymMatrix,
};
use crate::par;
use crate::solver;
use crate::stationary::{
    psd_project_symbol, topavg_sample, topavg_separable, topavg_stack, StationarySymbol,
};

/// Relative threshold under which a shifted trace counts as degenerate.
const TRACE_TOL: f64 = 1e-12;

/// Which banded component [`estimate_full`] fits alongside the separable part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandedKind {
    /// No banded component; the fit is purely separable.
    None,
    /// Stationary (two-level Toeplitz) component from Toeplitz averaging.
    Stationary,
    /// Dense in-band residual slices (non-stationary).
    Banded,
}

impl std::fmt::Display for BandedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BandedKind::None => write!(f, "none"),
            BandedKind::Stationary => write!(f, "stationary"),
            BandedKind::Banded => write!(f, "banded"),
        }
    }
}

/// Banded component of a fitted model.
#[derive(Debug, Clone)]
pub enum BandedPart {
    None,
    Stationary(StationarySymbol),
    Banded(BandedTensor),
}

impl BandedPart {
    pub fn kind(&self) -> BandedKind {
        match self {
            BandedPart::None => BandedKind::None,
            BandedPart::Stationary(_) => BandedKind::Stationary,
            BandedPart::Banded(_) => BandedKind::Banded,
        }
    }
}

/// Records which factor absorbs the `1 / T^d(C_N)` normalization.
///
/// Only the product `a1 (x) a2` is identified; this tag travels with fitted
/// models so downstream consumers do not read meaning into factor scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// `a2` carries the reciprocal shifted trace.
    A2CarriesInverseTrace,
}

/// Fitted (or ground-truth) separable-plus-banded covariance.
#[derive(Debug, Clone)]
pub struct SepPlusBandedCov {
    a1: SymMatrix,
    a2: SymMatrix,
    banded: BandedPart,
    d: Bandwidth,
    scale_convention: ScaleConvention,
}

impl SepPlusBandedCov {
    /// Assembles a model, validating grid sizes and band consistency.
    pub fn new(a1: SymMatrix, a2: SymMatrix, banded: BandedPart, d: Bandwidth) -> Result<Self> {
        d.validate(a1.k(), a2.k())?;
        match &banded {
            BandedPart::None => {}
            BandedPart::Stationary(sym) => {
                if sym.k1() != a1.k() || sym.k2() != a2.k() {
                    return Err(SptError::ShapeMismatch {
                        expected: format!("symbol on {} x {} grid", a1.k(), a2.k()),
                        got: format!("{} x {}", sym.k1(), sym.k2()),
                    });
                }
                if let Some(b) = sym.band() {
                    if b != d.0 {
                        return Err(SptError::InvalidConfig(format!(
                            "symbol band {b} does not match model bandwidth {d}"
                        )));
                    }
                }
            }
            BandedPart::Banded(bt) => {
                if bt.k1() != a1.k() || bt.k2() != a2.k() {
                    return Err(SptError::ShapeMismatch {
                        expected: format!("banded tensor on {} x {} grid", a1.k(), a2.k()),
                        got: format!("{} x {}", bt.k1(), bt.k2()),
                    });
                }
                if bt.d() != d.0 {
                    return Err(SptError::InvalidConfig(format!(
                        "banded tensor band {} does not match model bandwidth {d}",
                        bt.d()
                    )));
                }
            }
        }
        Ok(SepPlusBandedCov {
            a1,
            a2,
            banded,
            d,
            scale_convention: ScaleConvention::A2CarriesInverseTrace,
        })
    }

    pub fn a1(&self) -> &SymMatrix {
        &self.a1
    }

    pub fn a2(&self) -> &SymMatrix {
        &self.a2
    }

    pub fn banded(&self) -> &BandedPart {
        &self.banded
    }

    pub fn d(&self) -> Bandwidth {
        self.d
    }

    pub fn scale_convention(&self) -> ScaleConvention {
        self.scale_convention
    }

    pub fn k1(&self) -> usize {
        self.a1.k()
    }

    pub fn k2(&self) -> usize {
        self.a2.k()
    }

    /// Dense tensor `a1 (x) a2 + B` (oracle scale).
    pub fn to_dense(&self) -> Result<CovTensor4> {
        let mut t = model::separable_tensor(&self.a1, &self.a2)?;
        match &self.banded {
            BandedPart::None => {}
            BandedPart::Stationary(sym) => t.add_scaled(&sym.to_dense()?, 1.0)?,
            BandedPart::Banded(bt) => t.add_scaled(&bt.to_dense()?, 1.0)?,
        }
        Ok(t)
    }
}

/// Dense in-band residual slices of a non-stationary banded component.
///
/// Stores `b[i, j, p, q] = B[i, j, i+p, j+q]` for lag offsets
/// `p, q in (-d, d)`, laid out as a `k1 x k2 x (2d-1) x (2d-1)` array with
/// lag `(p, q)` at `[.., .., p+d-1, q+d-1]`. Entries whose partner index
/// `(i+p, j+q)` falls off the grid are structural zeros.
#[derive(Debug, Clone)]
pub struct BandedTensor {
    k1: usize,
    k2: usize,
    d: usize,
    b: Array4<f64>,
}

impl BandedTensor {
    /// Validates shape, structural zeros, and the pair symmetry
    /// `b[i,j,p,q] = b[i+p, j+q, -p, -q]` (to `1e-8` relative).
    pub fn new(k1: usize, k2: usize, d: usize, b: Array4<f64>) -> Result<Self> {
        if d == 0 || b.dim() != (k1, k2, 2 * d - 1, 2 * d - 1) {
            return Err(SptError::ShapeMismatch {
                expected: format!("{} x {} x {} x {} (d = {})", k1, k2, 2 * d - 1, 2 * d - 1, d),
                got: format!("{:?}", b.dim()),
            });
        }
        Bandwidth(d).validate(k1, k2)?;
        if !b.iter().all(|v| v.is_finite()) {
            return Err(SptError::NonFinite {
                context: "banded tensor".into(),
            });
        }
        let bt = BandedTensor { k1, k2, d, b };
        let scale = bt.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-8 * scale;
        for i in 0..k1 {
            for j in 0..k2 {
                for (p, q, v) in bt.iter_lags(i, j) {
                    let (ip, jq) = (i as isize + p, j as isize + q);
                    if ip < 0 || jq < 0 || ip >= k1 as isize || jq >= k2 as isize {
                        if v != 0.0 {
                            return Err(SptError::InvalidConfig(format!(
                                "banded tensor has nonzero entry {v} outside the grid at \
                                 ({i}, {j}) lag ({p}, {q})"
                            )));
                        }
                        continue;
                    }
                    let mirror = bt.lag(ip as usize, jq as usize, -p, -q);
                    if (v - mirror).abs() > tol {
                        return Err(SptError::InvalidConfig(format!(
                            "banded tensor breaks pair symmetry at ({i}, {j}) lag ({p}, {q}): \
                             {v} vs {mirror}"
                        )));
                    }
                }
            }
        }
        Ok(bt)
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn iter_lags(&self, i: usize, j: usize) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let w = self.d as isize - 1;
        (-w..=w).flat_map(move |p| (-w..=w).map(move |q| (p, q, self.lag(i, j, p, q))))
    }

    /// Stored entry at lag offsets `(p, q)` from cell `(i, j)`.
    pub fn lag(&self, i: usize, j: usize, p: isize, q: isize) -> f64 {
        let w = self.d as isize - 1;
        debug_assert!(p.abs() <= w && q.abs() <= w);
        self.b[[i, j, (p + w) as usize, (q + w) as usize]]
    }

    /// Tensor entry `B[i, j, k, l]`; zero outside the band.
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let p = k as isize - i as isize;
        let q = l as isize - j as isize;
        if p.unsigned_abs().max(q.unsigned_abs()) >= self.d {
            return 0.0;
        }
        self.lag(i, j, p, q)
    }

    /// `y[i,j] = sum_{p,q} b[i,j,p,q] * x[i+p, j+q]` in `O(K^2 d^2)`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.dim() != (self.k1, self.k2) {
            return Err(SptError::ShapeMismatch {
                expected: format!("{} x {}", self.k1, self.k2),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        let mut y = Array2::zeros((self.k1, self.k2));
        let w = self.d as isize - 1;
        for i in 0..self.k1 as isize {
            for j in 0..self.k2 as isize {
                let mut acc = 0.0;
                for p in (-w).max(-i)..=w.min(self.k1 as isize - 1 - i) {
                    for q in (-w).max(-j)..=w.min(self.k2 as isize - 1 - j) {
                        acc += self.lag(i as usize, j as usize, p, q)
                            * x[[(i + p) as usize, (j + q) as usize]];
                    }
                }
                y[[i as usize, j as usize]] = acc;
            }
        }
        Ok(y)
    }

    /// Matrix slice `M_pq[i,j] = b[i,j,p,q]` for one lag pair.
    pub(crate) fn lag_slice(&self, p: isize, q: isize) -> Array2<f64> {
        let mut m = Array2::zeros((self.k1, self.k2));
        for i in 0..self.k1 {
            for j in 0..self.k2 {
                m[[i, j]] = self.lag(i, j, p, q);
            }
        }
        m
    }

    pub fn fro_norm2(&self) -> f64 {
        self.b.iter().map(|v| v * v).sum()
    }

    /// Dense tensor (oracle scale).
    pub fn to_dense(&self) -> Result<CovTensor4> {
        let mut data = Array4::zeros((self.k1, self.k2, self.k1, self.k2));
        for i in 0..self.k1 {
            for j in 0..self.k2 {
                for k in 0..self.k1 {
                    for l in 0..self.k2 {
                        data[[i, j, k, l]] = self.get(i, j, k, l);
                    }
                }
            }
        }
        CovTensor4::new(data)
    }
}

/// Post-processing switches shared by the estimation entry points.
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    /// Subtract the per-cell sample mean before estimating (skipped when the
    /// stack is already marked centered).
    pub center: bool,
    /// Apply the sign-flip + eigenvalue-clamp projection to the factors and
    /// the spectral clamp to a stationary symbol. Never applied to dense
    /// banded tensors (no band-preserving projection is defined for them).
    pub psd: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            center: true,
            psd: true,
        }
    }
}

impl EstimateOptions {
    pub fn raw() -> Self {
        EstimateOptions {
            center: false,
            psd: false,
        }
    }
}

fn centered<'a>(samples: &'a SampleStack, opts: &EstimateOptions, storage: &'a mut Option<SampleStack>) -> &'a SampleStack {
    if opts.center && !samples.is_centered() {
        storage.get_or_insert_with(|| samples.center())
    } else {
        samples
    }
}

fn check_trace(d: usize, trace: f64, scale: f64) -> Result<f64> {
    if trace.abs() <= TRACE_TOL * scale {
        Err(SptError::DegenerateTrace { d, value: trace })
    } else {
        Ok(trace)
    }
}

/// Separable-part estimator at bandwidth `d`:
/// `a1 = sym(T1^d(C_N))`, `a2 = sym(T2^d(C_N)) / T^d(C_N)`.
pub fn estimate_separable(
    samples: &SampleStack,
    d: usize,
    opts: &EstimateOptions,
) -> Result<(SymMatrix, SymMatrix)> {
    Bandwidth(d).validate(samples.k1(), samples.k2())?;
    let mut storage = None;
    let stack = centered(samples, opts, &mut storage);
    let scale = strace_scale(stack)?;
    let trace = check_trace(d, model::strace_stack(stack, d)?, scale)?;
    let a1 = symmetrize(model::spt1_stack(stack, d)?.view())?;
    let a2 = symmetrize((model::spt2_stack(stack, d)? / trace).view())?;
    if opts.psd {
        Ok((psd_project_matrix(&a1)?, psd_project_matrix(&a2)?))
    } else {
        Ok((a1, a2))
    }
}

/// Total energy `T^0(C_N) = (1/N) sum_n |X_n|_F^2`, the reference scale for
/// degenerate-trace checks.
fn strace_scale(stack: &SampleStack) -> Result<f64> {
    model::strace_stack(stack, 0)
}

/// Full separable-plus-banded fit at bandwidth `d`.
pub fn estimate_full(
    samples: &SampleStack,
    d: usize,
    kind: BandedKind,
    opts: &EstimateOptions,
) -> Result<SepPlusBandedCov> {
    let mut storage = None;
    let stack = centered(samples, opts, &mut storage);
    let inner = EstimateOptions {
        center: false,
        psd: opts.psd,
    };
    let (a1, a2) = estimate_separable(stack, d, &inner)?;
    let banded = match kind {
        BandedKind::None => BandedPart::None,
        BandedKind::Stationary => {
            let sym = topavg_stack(stack, &a1, &a2, Some(d))?;
            let sym = if opts.psd { psd_project_symbol(&sym)? } else { sym };
            BandedPart::Stationary(sym)
        }
        BandedKind::Banded => BandedPart::Banded(banded_residual(stack, &a1, &a2, d)?),
    };
    SepPlusBandedCov::new(a1, a2, banded, Bandwidth(d))
}

/// In-band residual slices
/// `b[i,j,p,q] = (1/N) sum_n X_n[i,j] X_n[i+p,j+q] - a1[i,i+p] a2[j,j+q]`.
fn banded_residual(
    stack: &SampleStack,
    a1: &SymMatrix,
    a2: &SymMatrix,
    d: usize,
) -> Result<BandedTensor> {
    if d == 0 {
        return Err(SptError::InvalidConfig(
            "banded kind needs d >= 1 (d = 0 means no banded part; use kind none)".into(),
        ));
    }
    let (n, k1, k2) = (stack.n(), stack.k1(), stack.k2());
    let w = d as isize - 1;
    let width = 2 * d - 1;
    let flat = par::par_sum_array2(n, (k1 * k2, width * width), |s, acc| {
        let x = stack.sample(s);
        for i in 0..k1 as isize {
            for j in 0..k2 as isize {
                let xij = x[[i as usize, j as usize]];
                let row = (i as usize) * k2 + j as usize;
                for p in (-w).max(-i)..=w.min(k1 as isize - 1 - i) {
                    for q in (-w).max(-j)..=w.min(k2 as isize - 1 - j) {
                        let col = ((p + w) as usize) * width + (q + w) as usize;
                        acc[[row, col]] += xij * x[[(i + p) as usize, (j + q) as usize]];
                    }
                }
            }
        }
    });
    let mut b = flat
        .into_shape_with_order((k1, k2, width, width))
        .expect("shape");
    b /= n as f64;
    for i in 0..k1 as isize {
        for j in 0..k2 as isize {
            for p in (-w).max(-i)..=w.min(k1 as isize - 1 - i) {
                for q in (-w).max(-j)..=w.min(k2 as isize - 1 - j) {
                    b[[
                        i as usize,
                        j as usize,
                        (p + w) as usize,
                        (q + w) as usize,
                    ]] -= a1.as_array()[[i as usize, (i + p) as usize]]
                        * a2.as_array()[[j as usize, (j + q) as usize]];
                }
            }
        }
    }
    BandedTensor::new(k1, k2, d, b)
}

/// Plain partial tracing baseline: [`estimate_separable`] at `d = 0`.
pub fn baseline_pt(samples: &SampleStack, opts: &EstimateOptions) -> Result<(SymMatrix, SymMatrix)> {
    estimate_separable(samples, 0, opts)
}

/// Result of the alternating nearest-Kronecker-product baseline.
#[derive(Debug, Clone)]
pub struct NkpFit {
    pub a1: SymMatrix,
    pub a2: SymMatrix,
    /// Completed alternating sweeps.
    pub iters: usize,
    /// False when the sweep budget ran out before the tolerance was met.
    pub converged: bool,
    /// Per-sweep value of `|C_N - a1 (x) a2|_F^2 - |C_N|_F^2` (the objective
    /// up to its constant term), for monotonicity diagnostics.
    pub objective_partial: Vec<f64>,
}

/// Nearest Kronecker product by alternating least squares, initialized at
/// `a2 = I`:
///
/// ```text
/// a1 <- sym((1/N) sum_n X_n a2 X_n^T) / |a2|_F^2
/// a2 <- sym((1/N) sum_n X_n^T a1 X_n) / |a1|_F^2
/// ```
///
/// This is power iteration on the Van Loan rearrangement of `C_N` without
/// forming it; `O(N K^3)` per sweep. Non-convergence is reported through
/// [`NkpFit::converged`], with the last iterate returned.
pub fn baseline_nkp(
    samples: &SampleStack,
    iters: usize,
    tol: f64,
    opts: &EstimateOptions,
) -> Result<NkpFit> {
    let mut storage = None;
    let stack = centered(samples, opts, &mut storage);
    let (n, k1, k2) = (stack.n(), stack.k1(), stack.k2());
    let mut a1 = SymMatrix::identity(k1);
    let mut a2 = SymMatrix::identity(k2);
    let mut objective_partial = Vec::new();
    for sweep in 1..=iters {
        let m1 = par::par_sum_array2(n, (k1, k1), |s, acc| {
            let x = stack.sample(s);
            *acc += &x.dot(a2.as_array()).dot(&x.t());
        }) / n as f64;
        let a1_new = symmetrize((&m1 / a2.fro_norm2()).view())?;
        let m2 = par::par_sum_array2(n, (k2, k2), |s, acc| {
            let x = stack.sample(s);
            *acc += &x.t().dot(a1_new.as_array()).dot(&x);
        }) / n as f64;
        let a2_new = symmetrize((&m2 / a1_new.fro_norm2()).view())?;
        // <C_N, a1 (x) a2> falls out of the sweep's second half-update.
        let cross: f64 = m2
            .iter()
            .zip(a2_new.as_array().iter())
            .map(|(a, b)| a * b)
            .sum();
        objective_partial.push(a1_new.fro_norm2() * a2_new.fro_norm2() - 2.0 * cross);
        let delta1 = rel_change(&a1, &a1_new);
        let delta2 = rel_change(&a2, &a2_new);
        a1 = a1_new;
        a2 = a2_new;
        if delta1.max(delta2) < tol {
            return Ok(NkpFit {
                a1,
                a2,
                iters: sweep,
                converged: true,
                objective_partial,
            });
        }
    }
    Ok(NkpFit {
        a1,
        a2,
        iters,
        converged: false,
        objective_partial,
    })
}

fn rel_change(old: &SymMatrix, new: &SymMatrix) -> f64 {
    let denom = old.fro_norm2().sqrt().max(f64::MIN_POSITIVE);
    let mut diff = 0.0;
    for (a, b) in old.as_array().iter().zip(new.as_array().iter()) {
        diff += (a - b) * (a - b);
    }
    diff.sqrt() / denom
}

/// Nearest Kronecker product of a *structured* covariance (separable plus
/// stationary), used for population bias curves. Same alternating updates as
/// [`baseline_nkp`], applied to `C = a1 (x) a2 + B` analytically in `O(K^2)`
/// per sweep via diagonal sums.
pub fn nkp_truth(truth: &SepPlusBandedCov, iters: usize, tol: f64) -> Result<NkpFit> {
    let (k1, k2) = (truth.k1(), truth.k2());
    let sym = match truth.banded() {
        BandedPart::None => None,
        BandedPart::Stationary(s) => Some(s),
        BandedPart::Banded(_) => {
            return Err(SptError::InvalidConfig(
                "nkp_truth supports separable-plus-stationary truths only".into(),
            ))
        }
    };
    let rearranged_apply = |m: &SymMatrix, first: bool| -> Array2<f64> {
        // R(C) m: [.]_{(i,k)} = t1[i,k] <t2, m> + sum_l s(i-k, l) dsum_l(m)
        // (and the transposed version for the second factor).
        let (ta, tb, ka) = if first {
            (truth.a1(), truth.a2(), k1)
        } else {
            (truth.a2(), truth.a1(), k2)
        };
        let dot: f64 = tb
            .as_array()
            .iter()
            .zip(m.as_array().iter())
            .map(|(a, b)| a * b)
            .sum();
        let mut out = ta.as_array() * dot;
        if let Some(s) = sym {
            let other_k = m.k() as isize;
            let dsums: Vec<f64> = (0..other_k)
                .map(|l| {
                    (0..other_k - l)
                        .map(|j| m.as_array()[[j as usize, (j + l) as usize]])
                        .sum()
                })
                .collect();
            for i in 0..ka as isize {
                for k in 0..ka as isize {
                    let h = i - k;
                    let mut w = 0.0;
                    for l in -(other_k - 1)..=(other_k - 1) {
                        let sv = if first { s.get(h, l) } else { s.get(l, h) };
                        w += sv * dsums[l.unsigned_abs()];
                    }
                    out[[i as usize, k as usize]] += w;
                }
            }
        }
        out
    };
    let mut a1 = SymMatrix::identity(k1);
    let mut a2 = SymMatrix::identity(k2);
    let mut objective_partial = Vec::new();
    for sweep in 1..=iters {
        let a1_new = symmetrize((rearranged_apply(&a2, true) / a2.fro_norm2()).view())?;
        let m2 = rearranged_apply(&a1_new, false);
        let a2_new = symmetrize((&m2 / a1_new.fro_norm2()).view())?;
        let cross: f64 = m2
            .iter()
            .zip(a2_new.as_array().iter())
            .map(|(a, b)| a * b)
            .sum();
        objective_partial.push(a1_new.fro_norm2() * a2_new.fro_norm2() - 2.0 * cross);
        let delta = rel_change(&a1, &a1_new).max(rel_change(&a2, &a2_new));
        a1 = a1_new;
        a2 = a2_new;
        if delta < tol {
            return Ok(NkpFit {
                a1,
                a2,
                iters: sweep,
                converged: true,
                objective_partial,
            });
        }
    }
    Ok(NkpFit {
        a1,
        a2,
        iters,
        converged: false,
        objective_partial,
    })
}

/// Sign-flip + eigenvalue clamp: flips `a` globally if its trace is
/// negative, then zeroes negative eigenvalues.
pub fn psd_project_matrix(a: &SymMatrix) -> Result<SymMatrix> {
    let flipped = if a.as_array().diag().sum() < 0.0 {
        a.scale(-1.0)
    } else {
        a.clone()
    };
    let eig = solver::sym_eigen(&flipped)?;
    if eig.phi.iter().all(|&v| v >= 0.0) {
        return Ok(flipped);
    }
    let k = flipped.k();
    let mut scaled = eig.u.clone();
    for (mut col, &phi) in scaled.columns_mut().into_iter().zip(eig.phi.iter()) {
        col *= phi.max(0.0);
    }
    let rebuilt = scaled.dot(&eig.u.t());
    debug_assert_eq!(rebuilt.dim(), (k, k));
    symmetrize(rebuilt.view())
}

/// Relative Frobenius error `|est - truth|_F / |truth|_F` between two
/// structured covariances, via the `O(K^3)` norm engine.
pub fn rel_error(est: &SepPlusBandedCov, truth: &SepPlusBandedCov) -> Result<f64> {
    use crate::bandwidth::NormTerm;
    let mut diff_terms = vec![
        NormTerm::Separable(est.a1(), est.a2(), 1.0),
        NormTerm::Separable(truth.a1(), truth.a2(), -1.0),
    ];
    let mut truth_terms = vec![NormTerm::Separable(truth.a1(), truth.a2(), 1.0)];
    push_banded_term(&mut diff_terms, est.banded(), 1.0);
    push_banded_term(&mut diff_terms, truth.banded(), -1.0);
    push_banded_term(&mut truth_terms, truth.banded(), 1.0);
    let denom2 = crate::bandwidth::structured_fro_norm2(&truth_terms)?;
    if denom2 <= 0.0 {
        return Err(SptError::InvalidConfig(
            "relative error against an all-zero truth".into(),
        ));
    }
    let num2 = crate::bandwidth::structured_fro_norm2(&diff_terms)?;
    Ok((num2.max(0.0) / denom2).sqrt())
}

fn push_banded_term<'a>(
    terms: &mut Vec<crate::bandwidth::NormTerm<'a>>,
    part: &'a BandedPart,
    coef: f64,
) {
    match part {
        BandedPart::None => {}
        BandedPart::Stationary(sym) => terms.push(crate::bandwidth::NormTerm::Symbol(sym, coef)),
        BandedPart::Banded(bt) => terms.push(crate::bandwidth::NormTerm::Banded(bt, coef)),
    }
}

/// Relative error of a dense tensor estimate against a structured truth
/// (oracle scale).
pub fn rel_error_tensor(est: &CovTensor4, truth: &SepPlusBandedCov) -> Result<f64> {
    let dense_truth = truth.to_dense()?;
    let mut diff = est.clone();
    diff.add_scaled(&dense_truth, -1.0)?;
    let denom2 = dense_truth.fro_norm2();
    if denom2 <= 0.0 {
        return Err(SptError::InvalidConfig(
            "relative error against an all-zero truth".into(),
        ));
    }
    Ok((diff.fro_norm2() / denom2).sqrt())
}

/// Relative error of the raw empirical covariance against a structured truth,
/// evaluated exactly without materializing either tensor:
///
/// ```text
/// |C_N - C|^2 = (1/N^2) sum_{n,m} <X_n, X_m>^2
///               - (2/N) sum_n <X_n, C X_n> + |C|^2
/// ```
pub fn rel_error_empirical(
    samples: &SampleStack,
    truth: &SepPlusBandedCov,
    center: bool,
) -> Result<f64> {
    let opts = EstimateOptions { center, psd: false };
    let mut storage = None;
    let stack = centered(samples, &opts, &mut storage);
    let n = stack.n();
    let gram2 = par::par_sum_f64(n, |i| {
        let xi = stack.sample(i);
        let mut acc = 0.0;
        for j in 0..n {
            let dot: f64 = xi
                .iter()
                .zip(stack.sample(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            acc += dot * dot;
        }
        acc
    }) / (n * n) as f64;
    let quad = par::par_sum_f64(n, |i| {
        crate::bandwidth::quad_form(truth, stack.sample(i)).expect("shape checked")
    }) / n as f64;
    let truth_norm2 = model_fro_norm2(truth)?;
    if truth_norm2 <= 0.0 {
        return Err(SptError::InvalidConfig(
            "relative error against an all-zero truth".into(),
        ));
    }
    let num2 = gram2 - 2.0 * quad + truth_norm2;
    Ok((num2.max(0.0) / truth_norm2).sqrt())
}

/// Squared Frobenius norm of a structured covariance.
pub fn model_fro_norm2(c: &SepPlusBandedCov) -> Result<f64> {
    use crate::bandwidth::NormTerm;
    let mut terms = vec![NormTerm::Separable(c.a1(), c.a2(), 1.0)];
    push_banded_term(&mut terms, c.banded(), 1.0);
    crate::bandwidth::structured_fro_norm2(&terms)
}

// ---------------------------------------------------------------------------
// Population (dense oracle) pipeline
// ---------------------------------------------------------------------------

/// Separable-part estimating equations applied to a dense tensor:
/// `a1 = sym(T1^d(T))`, `a2 = sym(T2^d(T)) / T^d(T)`. Oracle scale.
pub fn estimate_separable_tensor(t: &CovTensor4, d: usize) -> Result<(SymMatrix, SymMatrix)> {
    let trace = model::strace_tensor(t, d)?;
    let scale = model::strace_tensor(t, 0)?.abs();
    let trace = check_trace(d, trace, scale)?;
    let a1 = symmetrize(model::spt1_tensor(t, d)?.view())?;
    let a2 = symmetrize((model::spt2_tensor(t, d)? / trace).view())?;
    Ok((a1, a2))
}

// ---------------------------------------------------------------------------
// Cached per-sample statistics (cross-validation / bootstrap engine)
// ---------------------------------------------------------------------------

/// Per-sample shifted-trace statistics at one bandwidth.
///
/// Fold and bootstrap estimators are weighted averages of these, so
/// re-estimation over sample subsets costs `O(N K^2)` instead of
/// `O(N K^3)`.
pub(crate) struct TraceStats {
    pub d: usize,
    pub spt1: Vec<Array2<f64>>,
    pub spt2: Vec<Array2<f64>>,
    pub strace: Vec<f64>,
    pub energy: Vec<f64>,
}

impl TraceStats {
    pub fn compute(stack: &SampleStack, d: usize) -> Result<Self> {
        Bandwidth(d).validate(stack.k1(), stack.k2())?;
        let n = stack.n();
        let spt1 = par::par_map_indexed(n, |i| {
            model::spt1_sample(stack.sample(i), d).expect("bandwidth checked")
        });
        let spt2 = par::par_map_indexed(n, |i| {
            model::spt2_sample(stack.sample(i), d).expect("bandwidth checked")
        });
        let strace = par::par_map_indexed(n, |i| {
            model::strace_sample(stack.sample(i), d).expect("bandwidth checked")
        });
        let energy = par::par_map_indexed(n, |i| {
            model::strace_sample(stack.sample(i), 0).expect("d = 0 always valid")
        });
        Ok(TraceStats {
            d,
            spt1,
            spt2,
            strace,
            energy,
        })
    }
}

/// Per-sample Toeplitz averages (bandwidth-independent).
pub(crate) struct SymbolStats {
    pub symbols: Vec<StationarySymbol>,
}

impl SymbolStats {
    pub fn compute(stack: &SampleStack) -> Self {
        let symbols = par::par_map_indexed(stack.n(), |i| topavg_sample(stack.sample(i)));
        SymbolStats { symbols }
    }
}

/// Multiplicity weights of a sample subset or bootstrap resample.
pub(crate) struct SubsetWeights {
    pub counts: Vec<f64>,
    pub total: f64,
}

impl SubsetWeights {
    pub fn complement_of(n: usize, fold: &[usize]) -> Self {
        let mut counts = vec![1.0; n];
        for &i in fold {
            counts[i] = 0.0;
        }
        SubsetWeights {
            counts,
            total: (n - fold.len()) as f64,
        }
    }

    pub fn all(n: usize) -> Self {
        SubsetWeights {
            counts: vec![1.0; n],
            total: n as f64,
        }
    }

    pub fn from_resample(n: usize, indices: &[usize]) -> Self {
        let mut counts = vec![0.0; n];
        for &i in indices {
            counts[i] += 1.0;
        }
        SubsetWeights {
            counts,
            total: indices.len() as f64,
        }
    }

    fn average<'a, I: Iterator<Item = &'a Array2<f64>>>(
        &self,
        shape: (usize, usize),
        items: I,
    ) -> Array2<f64> {
        let mut acc = Array2::zeros(shape);
        for (w, item) in self.counts.iter().zip(items) {
            if *w != 0.0 {
                acc.scaled_add(*w, item);
            }
        }
        acc / self.total
    }

    fn average_scalar(&self, items: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(items)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            / self.total
    }

    /// Weighted mean surface of the subset (for centering corrections).
    pub fn mean_surface(&self, stack: &SampleStack) -> Array2<f64> {
        let mut acc = Array2::zeros((stack.k1(), stack.k2()));
        for (i, w) in self.counts.iter().enumerate() {
            if *w != 0.0 {
                acc.scaled_add(*w, &stack.sample(i));
            }
        }
        acc / self.total
    }
}

/// Estimates a model from cached statistics over a weighted sample subset.
///
/// When `center` is set, the subset's estimator is the covariance around the
/// subset mean: every quadratic statistic gets the rank-one correction of
/// that mean (`T(C) = avg T(X_n) - T(mean)`), which reproduces
/// [`estimate_full`] on the materialized subset exactly up to summation
/// order.
pub(crate) fn estimate_from_stats(
    traces: &TraceStats,
    symbols: Option<&SymbolStats>,
    stack: &SampleStack,
    weights: &SubsetWeights,
    kind: BandedKind,
    center: bool,
    psd: bool,
) -> Result<SepPlusBandedCov> {
    let d = traces.d;
    let (k1, k2) = (stack.k1(), stack.k2());
    let mean = if center {
        Some(weights.mean_surface(stack))
    } else {
        None
    };
    let mut spt1 = weights.average((k1, k1), traces.spt1.iter());
    let mut spt2 = weights.average((k2, k2), traces.spt2.iter());
    let mut trace = weights.average_scalar(&traces.strace);
    let mut energy = weights.average_scalar(&traces.energy);
    if let Some(m) = &mean {
        spt1 -= &model::spt1_sample(m.view(), d)?;
        spt2 -= &model::spt2_sample(m.view(), d)?;
        trace -= model::strace_sample(m.view(), d)?;
        energy -= model::strace_sample(m.view(), 0)?;
    }
    let trace = check_trace(d, trace, energy.max(0.0))?;
    let mut a1 = symmetrize(spt1.view())?;
    let mut a2 = symmetrize((spt2 / trace).view())?;
    if psd {
        a1 = psd_project_matrix(&a1)?;
        a2 = psd_project_matrix(&a2)?;
    }
    let banded = match kind {
        BandedKind::None => BandedPart::None,
        BandedKind::Stationary => {
            let stats = symbols.ok_or_else(|| {
                SptError::InvalidConfig("stationary kind requires cached symbol stats".into())
            })?;
            let mut lags = Array2::zeros((2 * k1 - 1, 2 * k2 - 1));
            for (w, sym) in weights.counts.iter().zip(&stats.symbols) {
                if *w != 0.0 {
                    lags.scaled_add(*w, sym.lags());
                }
            }
            lags /= weights.total;
            if let Some(m) = &mean {
                lags -= topavg_sample(m.view()).lags();
            }
            lags -= topavg_separable(&a1, &a2).lags();
            let sym = StationarySymbol::new(k1, k2, lags, None)?.band_clip(d)?;
            let sym = if psd { psd_project_symbol(&sym)? } else { sym };
            BandedPart::Stationary(sym)
        }
        BandedKind::Banded => {
            return Err(SptError::InvalidConfig(
                "cached-statistics estimation supports kinds none and stationary".into(),
            ))
        }
    };
    SepPlusBandedCov::new(a1, a2, banded, Bandwidth(d))
}
