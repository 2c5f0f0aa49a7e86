//! Stationary (two-level Toeplitz) covariance components.
//!
//! A stationary component on a `k1 x k2` grid is determined by its symbol
//! `s(h, l)` over signed lags `h in (-k1, k1)`, `l in (-k2, k2)`:
//!
//! ```text
//! B[i,j,k,l] = s(i-k, j-l)
//! ```
//!
//! Toeplitz averaging projects an arbitrary covariance onto this class by
//! averaging along shifted diagonals with the fixed divisor `1/(k1*k2)`;
//! per sample this is an autocorrelation, computed via zero-padded FFTs
//! (Wiener-Khinchin) in `O(K^2 log K)`. Applying a symbol to a surface is a
//! 2D convolution, evaluated exactly through a two-level circulant embedding
//! of size at least `(2*k1-1) x (2*k2-1)`. The embedding's real DFT spectrum
//! drives positive-semidefinite projection (clamp negative eigenvalues, map
//! back) and the spectral bounds used by the ADI solver.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Result, SptError};
use crate::fft2;
use crate::model::{CovTensor4, SampleStack, SymMatrix};
use crate::par;

/// Symbol of a stationary covariance component on a `k1 x k2` grid.
///
/// Stored as a dense `(2*k1-1) x (2*k2-1)` array over signed lags, with
/// `s(h, l)` at position `[h + k1 - 1, l + k2 - 1]`. Entries satisfy the
/// central symmetry `s(h, l) = s(-h, -l)` exactly; `band = Some(d)` records
/// that `s(h, l) = 0` whenever `max(|h|, |l|) >= d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarySymbol {
    k1: usize,
    k2: usize,
    s: Array2<f64>,
    band: Option<usize>,
}

impl StationarySymbol {
    /// Wraps a signed-lag array, validating shape, finiteness, central
    /// symmetry (to `1e-8` relative, then made exact), and the band marker.
    pub fn new(k1: usize, k2: usize, s: Array2<f64>, band: Option<usize>) -> Result<Self> {
        if k1 == 0 || k2 == 0 {
            return Err(SptError::ShapeMismatch {
                expected: "positive grid dimensions".into(),
                got: format!("{} x {}", k1, k2),
            });
        }
        if s.dim() != (2 * k1 - 1, 2 * k2 - 1) {
            return Err(SptError::ShapeMismatch {
                expected: format!("{} x {} lag array", 2 * k1 - 1, 2 * k2 - 1),
                got: format!("{} x {}", s.nrows(), s.ncols()),
            });
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(SptError::NonFinite {
                context: "stationary symbol".into(),
            });
        }
        let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut sym = StationarySymbol { k1, k2, s, band: None };
        for h in -(k1 as isize - 1)..=(k1 as isize - 1) {
            for l in -(k2 as isize - 1)..=(k2 as isize - 1) {
                let a = sym.get(h, l);
                let b = sym.get(-h, -l);
                if (a - b).abs() > 1e-8 * scale {
                    return Err(SptError::InvalidConfig(format!(
                        "symbol breaks central symmetry at lag ({h}, {l}): {a} vs {b}"
                    )));
                }
            }
        }
        sym.make_centrally_symmetric();
        if let Some(d) = band {
            sym.check_band(d)?;
            sym.band = Some(d);
        }
        Ok(sym)
    }

    /// All-zero symbol.
    pub fn zeros(k1: usize, k2: usize) -> Self {
        StationarySymbol {
            k1,
            k2,
            s: Array2::zeros((2 * k1 - 1, 2 * k2 - 1)),
            band: Some(0),
        }
    }

    /// Delta symbol: `s(0,0) = c`, zero elsewhere (a multiple of the identity).
    pub fn delta(k1: usize, k2: usize, c: f64) -> Self {
        let mut s = Array2::zeros((2 * k1 - 1, 2 * k2 - 1));
        s[[k1 - 1, k2 - 1]] = c;
        StationarySymbol {
            k1,
            k2,
            s,
            band: Some(1),
        }
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    pub fn band(&self) -> Option<usize> {
        self.band
    }

    /// Symbol value at signed lag `(h, l)`; zero outside the stored range.
    pub fn get(&self, h: isize, l: isize) -> f64 {
        let i = h + self.k1 as isize - 1;
        let j = l + self.k2 as isize - 1;
        if i < 0 || j < 0 || i >= 2 * self.k1 as isize - 1 || j >= 2 * self.k2 as isize - 1 {
            return 0.0;
        }
        self.s[[i as usize, j as usize]]
    }

    pub(crate) fn set(&mut self, h: isize, l: isize, v: f64) {
        let i = (h + self.k1 as isize - 1) as usize;
        let j = (l + self.k2 as isize - 1) as usize;
        self.s[[i, j]] = v;
    }

    /// The raw signed-lag array (row `h + k1 - 1`, column `l + k2 - 1`).
    pub fn lags(&self) -> &Array2<f64> {
        &self.s
    }

    fn make_centrally_symmetric(&mut self) {
        let (r, c) = self.s.dim();
        for i in 0..r {
            for j in 0..c {
                let (oi, oj) = (r - 1 - i, c - 1 - j);
                if (i, j) < (oi, oj) {
                    let v = 0.5 * (self.s[[i, j]] + self.s[[oi, oj]]);
                    self.s[[i, j]] = v;
                    self.s[[oi, oj]] = v;
                }
            }
        }
    }

    fn check_band(&self, d: usize) -> Result<()> {
        for h in -(self.k1 as isize - 1)..=(self.k1 as isize - 1) {
            for l in -(self.k2 as isize - 1)..=(self.k2 as isize - 1) {
                if h.unsigned_abs().max(l.unsigned_abs()) >= d && self.get(h, l) != 0.0 {
                    return Err(SptError::InvalidConfig(format!(
                        "symbol marked banded by {d} but s({h}, {l}) = {}",
                        self.get(h, l)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Zeroes all lags with `max(|h|, |l|) >= d` and records the band.
    pub fn band_clip(&self, d: usize) -> Result<StationarySymbol> {
        crate::model::Bandwidth(d).validate(self.k1, self.k2)?;
        let mut out = self.clone();
        for h in -(self.k1 as isize - 1)..=(self.k1 as isize - 1) {
            for l in -(self.k2 as isize - 1)..=(self.k2 as isize - 1) {
                if h.unsigned_abs().max(l.unsigned_abs()) >= d {
                    out.set(h, l, 0.0);
                }
            }
        }
        out.band = Some(d);
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> StationarySymbol {
        StationarySymbol {
            k1: self.k1,
            k2: self.k2,
            s: &self.s * c,
            band: self.band,
        }
    }

    /// Embeds the symbol into a circularly indexed `p1 x p2` array
    /// (`p >= 2k - 1`): position `m` holds lag `m` for `m < k` and lag
    /// `m - p` for `m > p - k`, zero in between.
    pub(crate) fn embed_circular(&self, p1: usize, p2: usize) -> Array2<f64> {
        assert!(p1 >= 2 * self.k1 - 1 && p2 >= 2 * self.k2 - 1);
        let mut gamma = Array2::zeros((p1, p2));
        for h in -(self.k1 as isize - 1)..=(self.k1 as isize - 1) {
            for l in -(self.k2 as isize - 1)..=(self.k2 as isize - 1) {
                let m1 = h.rem_euclid(p1 as isize) as usize;
                let m2 = l.rem_euclid(p2 as isize) as usize;
                gamma[[m1, m2]] = self.get(h, l);
            }
        }
        gamma
    }

    /// Dense two-level Toeplitz tensor `B[i,j,k,l] = s(i-k, j-l)` (oracle scale).
    pub fn to_dense(&self) -> Result<CovTensor4> {
        let (k1, k2) = (self.k1, self.k2);
        let mut data = ndarray::Array4::zeros((k1, k2, k1, k2));
        for i in 0..k1 {
            for j in 0..k2 {
                for k in 0..k1 {
                    for l in 0..k2 {
                        data[[i, j, k, l]] =
                            self.get(i as isize - k as isize, j as isize - l as isize);
                    }
                }
            }
        }
        CovTensor4::new(data)
    }
}

/// Real eigenvalues of the two-level circulant embedding of a symbol.
///
/// The embedding is the `(2*k1-1) x (2*k2-1)` circulant extension whose
/// upper-left `k1*k2` block restricts to the Toeplitz operator; its
/// eigenvalues are the 2D DFT of the circularly arranged symbol and are real
/// because the symbol is centrally symmetric.
#[derive(Debug, Clone)]
pub struct CirculantSpectrum {
    k1: usize,
    k2: usize,
    eig: Array2<f64>,
}

impl CirculantSpectrum {
    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    /// Eigenvalue array, indexed by 2D DFT frequency.
    pub fn eigenvalues(&self) -> &Array2<f64> {
        &self.eig
    }

    pub fn min(&self) -> f64 {
        self.eig.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.eig.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Computes the circulant-embedding spectrum of a symbol.
///
/// Fails with [`SptError::NonFinite`] if the DFT has an imaginary part above
/// `1e-9` times the spectral radius, which would indicate a symbol that is
/// not centrally symmetric.
pub fn circulant_spectrum(sym: &StationarySymbol) -> Result<CirculantSpectrum> {
    let (p1, p2) = (2 * sym.k1() - 1, 2 * sym.k2() - 1);
    let gamma = sym.embed_circular(p1, p2);
    let mut buf = gamma.mapv(|v| Complex64::new(v, 0.0));
    fft2::fft2(&mut buf, false);
    let radius = buf.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let worst_imag = buf.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    if worst_imag > 1e-9 * radius.max(f64::MIN_POSITIVE) {
        return Err(SptError::NonFinite {
            context: format!(
                "circulant spectrum has imaginary part {worst_imag:.3e} (radius {radius:.3e})"
            ),
        });
    }
    Ok(CirculantSpectrum {
        k1: sym.k1(),
        k2: sym.k2(),
        eig: buf.mapv(|v| v.re),
    })
}

/// Reusable applier of a stationary symbol: caches the padded embedding's DFT.
///
/// Over-pads the circulant embedding to 5-smooth FFT sizes; the circular
/// convolution restricted to the `k1 x k2` window is exact for any padding
/// at least `2k - 1` per level, so results are unchanged by the padding.
#[derive(Debug, Clone)]
pub struct StationaryOperator {
    k1: usize,
    k2: usize,
    p1: usize,
    p2: usize,
    gamma_hat: Array2<Complex64>,
}

impl StationaryOperator {
    pub fn new(sym: &StationarySymbol) -> Self {
        let p1 = fft2::next_fast_len(2 * sym.k1() - 1);
        let p2 = fft2::next_fast_len(2 * sym.k2() - 1);
        let gamma = sym.embed_circular(p1, p2);
        let mut gamma_hat = gamma.mapv(|v| Complex64::new(v, 0.0));
        fft2::fft2(&mut gamma_hat, false);
        StationaryOperator {
            k1: sym.k1(),
            k2: sym.k2(),
            p1,
            p2,
            gamma_hat,
        }
    }

    /// `y[i,j] = sum_{k,l} s(i-k, j-l) x[k,l]` in `O(K^2 log K)`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.dim() != (self.k1, self.k2) {
            return Err(SptError::ShapeMismatch {
                expected: format!("{} x {}", self.k1, self.k2),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        let mut buf = Array2::from_elem((self.p1, self.p2), Complex64::default());
        for ((i, j), &v) in x.indexed_iter() {
            buf[[i, j]] = Complex64::new(v, 0.0);
        }
        fft2::fft2(&mut buf, false);
        buf.zip_mut_with(&self.gamma_hat, |a, b| *a *= b);
        fft2::fft2(&mut buf, true);
        let mut y = Array2::zeros((self.k1, self.k2));
        for i in 0..self.k1 {
            for j in 0..self.k2 {
                y[[i, j]] = buf[[i, j]].re;
            }
        }
        Ok(y)
    }
}

/// Applies a stationary symbol to a single surface.
///
/// For repeated applications of the same symbol build a
/// [`StationaryOperator`] once instead.
pub fn apply_stationary(sym: &StationarySymbol, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    StationaryOperator::new(sym).apply(x)
}

// ---------------------------------------------------------------------------
// Toeplitz averaging
// ---------------------------------------------------------------------------

/// Toeplitz average of a single sample:
/// `s(h, l) = (1/(k1*k2)) * sum_{i,j} x[i,j] * x[i+h, j+l]`
/// over index pairs where both factors exist.
///
/// Computed as a zero-padded FFT autocorrelation; the divisor is the fixed
/// `1/(k1*k2)` (not the per-lag pair count).
pub fn topavg_sample(x: ArrayView2<'_, f64>) -> StationarySymbol {
    let (k1, k2) = x.dim();
    let p1 = fft2::next_fast_len(2 * k1 - 1);
    let p2 = fft2::next_fast_len(2 * k2 - 1);
    let mut buf = Array2::from_elem((p1, p2), Complex64::default());
    for ((i, j), &v) in x.indexed_iter() {
        buf[[i, j]] = Complex64::new(v, 0.0);
    }
    fft2::fft2(&mut buf, false);
    buf.mapv_inplace(|v| Complex64::new(v.norm_sqr(), 0.0));
    fft2::fft2(&mut buf, true);
    let scale = 1.0 / (k1 * k2) as f64;
    let mut sym = StationarySymbol::zeros(k1, k2);
    sym.band = None;
    for h in -(k1 as isize - 1)..=(k1 as isize - 1) {
        for l in -(k2 as isize - 1)..=(k2 as isize - 1) {
            let m1 = h.rem_euclid(p1 as isize) as usize;
            let m2 = l.rem_euclid(p2 as isize) as usize;
            sym.set(h, l, buf[[m1, m2]].re * scale);
        }
    }
    sym.make_centrally_symmetric();
    sym
}

/// Toeplitz average of a separable tensor `a1 (x) a2`:
/// `s(h, l) = (1/(k1*k2)) * (sum_i a1[i, i+h]) * (sum_j a2[j, j+l])`.
pub fn topavg_separable(a1: &SymMatrix, a2: &SymMatrix) -> StationarySymbol {
    let (k1, k2) = (a1.k(), a2.k());
    let d1: Vec<f64> = (0..k1).map(|h| a1.shifted_trace(h)).collect();
    let d2: Vec<f64> = (0..k2).map(|l| a2.shifted_trace(l)).collect();
    let scale = 1.0 / (k1 * k2) as f64;
    let mut sym = StationarySymbol::zeros(k1, k2);
    sym.band = None;
    for h in -(k1 as isize - 1)..=(k1 as isize - 1) {
        for l in -(k2 as isize - 1)..=(k2 as isize - 1) {
            sym.set(h, l, d1[h.unsigned_abs()] * d2[l.unsigned_abs()] * scale);
        }
    }
    sym
}

/// Toeplitz average of the stack's empirical covariance minus a separable
/// part: `(1/N) sum_n topavg_sample(X_n) - topavg_separable(a1, a2)`,
/// optionally band-clipped to `d`.
pub fn topavg_stack(
    samples: &SampleStack,
    a1: &SymMatrix,
    a2: &SymMatrix,
    band: Option<usize>,
) -> Result<StationarySymbol> {
    let (k1, k2) = (samples.k1(), samples.k2());
    if a1.k() != k1 || a2.k() != k2 {
        return Err(SptError::ShapeMismatch {
            expected: format!("factors of sizes {} and {}", k1, k2),
            got: format!("{} and {}", a1.k(), a2.k()),
        });
    }
    let n = samples.n();
    let shape = (2 * k1 - 1, 2 * k2 - 1);
    let sum = par::par_sum_array2(n, shape, |i, acc| {
        *acc += topavg_sample(samples.sample(i)).lags();
    });
    let sep = topavg_separable(a1, a2);
    let lags = sum / n as f64 - sep.lags();
    let sym = StationarySymbol::new(k1, k2, lags, None)?;
    match band {
        Some(d) => sym.band_clip(d),
        None => Ok(sym),
    }
}

/// Toeplitz average of a dense tensor (brute-force oracle):
/// `s(h, l) = (1/(k1*k2)) * sum_{i,j} T[i, j, i+h, j+l]`.
pub fn topavg_tensor(t: &CovTensor4) -> StationarySymbol {
    let (k1, k2) = (t.k1(), t.k2());
    let scale = 1.0 / (k1 * k2) as f64;
    let mut sym = StationarySymbol::zeros(k1, k2);
    sym.band = None;
    for h in -(k1 as isize - 1)..=(k1 as isize - 1) {
        for l in -(k2 as isize - 1)..=(k2 as isize - 1) {
            let mut acc = 0.0;
            for i in 0..k1 {
                let ih = i as isize + h;
                if ih < 0 || ih >= k1 as isize {
                    continue;
                }
                for j in 0..k2 {
                    let jl = j as isize + l;
                    if jl < 0 || jl >= k2 as isize {
                        continue;
                    }
                    acc += t.at(i, j, ih as usize, jl as usize);
                }
            }
            sym.set(h, l, acc * scale);
        }
    }
    sym.make_centrally_symmetric();
    sym
}

/// Frobenius norm of the two-level Toeplitz tensor induced by a symbol:
/// `sqrt( sum_{h,l} (k1-|h|) * (k2-|l|) * s(h,l)^2 )`.
pub fn symbol_fro_norm(sym: &StationarySymbol) -> f64 {
    let (k1, k2) = (sym.k1() as isize, sym.k2() as isize);
    let mut acc = 0.0;
    for h in -(k1 - 1)..=(k1 - 1) {
        for l in -(k2 - 1)..=(k2 - 1) {
            let count = ((k1 - h.abs()) * (k2 - l.abs())) as f64;
            let v = sym.get(h, l);
            acc += count * v * v;
        }
    }
    acc.sqrt()
}

/// Projects a symbol onto the cone with nonnegative circulant spectrum.
///
/// Clamps negative eigenvalues of the two-level circulant embedding to zero
/// and maps back. Already-PSD symbols are returned unchanged (band marker
/// preserved); otherwise the output's band is unknown and cleared.
pub fn psd_project_symbol(sym: &StationarySymbol) -> Result<StationarySymbol> {
    let spectrum = circulant_spectrum(sym)?;
    if spectrum.min() >= 0.0 {
        return Ok(sym.clone());
    }
    let (p1, p2) = (2 * sym.k1() - 1, 2 * sym.k2() - 1);
    let mut buf = spectrum
        .eigenvalues()
        .mapv(|v| Complex64::new(v.max(0.0), 0.0));
    fft2::fft2(&mut buf, true);
    let mut out = StationarySymbol::zeros(sym.k1(), sym.k2());
    out.band = None;
    for h in -(sym.k1() as isize - 1)..=(sym.k1() as isize - 1) {
        for l in -(sym.k2() as isize - 1)..=(sym.k2() as isize - 1) {
            let m1 = h.rem_euclid(p1 as isize) as usize;
            let m2 = l.rem_euclid(p2 as isize) as usize;
            out.set(h, l, buf[[m1, m2]].re);
        }
    }
    out.make_centrally_symmetric();
    Ok(out)
}

/// Quadratic form `<x, B x>` of a stationary component evaluated through the
/// sample's Toeplitz average: `k1*k2 * sum_{h,l} s(h,l) * topavg_x(h,l)`.
pub(crate) fn symbol_quad_form(sym: &StationarySymbol, sample_symbol: &StationarySymbol) -> f64 {
    let scale = (sym.k1() * sym.k2()) as f64;
    let dot: f64 = sym
        .lags()
        .iter()
        .zip(sample_symbol.lags().iter())
        .map(|(a, b)| a * b)
        .sum();
    scale * dot
}

/// DFT eigenvalues of the two-level Chan (Frobenius-optimal) circulant
/// approximation of the Toeplitz operator with this symbol.
///
/// Per level of size `n`, lag `j >= 0` and its alias `j - n` are averaged
/// with weights `(n-j)/n` and `j/n`; the result is a `k1 x k2` circulant
/// symbol whose 2D DFT is real for centrally symmetric input.
pub(crate) fn chan_circulant_spectrum(sym: &StationarySymbol) -> Array2<f64> {
    let (k1, k2) = (sym.k1(), sym.k2());
    let mut c = Array2::zeros((k1, k2));
    for j1 in 0..k1 {
        for j2 in 0..k2 {
            let w1_main = (k1 - j1) as f64 / k1 as f64;
            let w1_alias = j1 as f64 / k1 as f64;
            let w2_main = (k2 - j2) as f64 / k2 as f64;
            let w2_alias = j2 as f64 / k2 as f64;
            let h_main = j1 as isize;
            let h_alias = j1 as isize - k1 as isize;
            let l_main = j2 as isize;
            let l_alias = j2 as isize - k2 as isize;
            c[[j1, j2]] = w1_main * w2_main * sym.get(h_main, l_main)
                + w1_main * w2_alias * sym.get(h_main, l_alias)
                + w1_alias * w2_main * sym.get(h_alias, l_main)
                + w1_alias * w2_alias * sym.get(h_alias, l_alias);
        }
    }
    let mut buf = c.mapv(|v| Complex64::new(v, 0.0));
    fft2::fft2(&mut buf, false);
    buf.mapv(|v| v.re)
}
