//! Simulation of surfaces with separable-plus-banded covariance.
//!
//! The data-generating process draws
//!
//! ```text
//! X_n = sqrt(tau) * Y_n + W_n + E_n
//! ```
//!
//! where `Y_n` is matrix-variate Gaussian with covariance `A (x) A` built
//! from Legendre or Wiener factors, `W_n` is a two-dimensional moving
//! average whose covariance is stationary and banded by `d_true`, and `E_n`
//! is optional heteroscedastic white measurement noise. The population
//! covariance of `sqrt(tau) Y_n + W_n` is exactly `tau * A (x) A + B` with
//! `A` and `B` Frobenius-normalized, so `tau` reads as a signal-to-noise
//! ratio and fitted models can be scored against the returned truth.
//!
//! Reproducibility is part of the format contract: all randomness comes
//! from ChaCha8 streams keyed by the config seed (stream `0` holds the
//! noise-variance pattern, stream `n + 1` the draws of sample `n`), so a
//! `SimConfig` pins its stack byte-for-byte across runs and thread counts.
//! [`error_experiment`] derives one seed per (grid cell, replicate) pair
//! from the base seed with a SplitMix64 mix, keeping cells independent and
//! individually reproducible.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidth, BandwidthSearch};
use crate::error::{Result, SptError};
use crate::estimators::{
    self, BandedKind, BandedPart, EstimateOptions, SepPlusBandedCov,
};
use crate::model::{symmetrize, Bandwidth, SampleStack, SymMatrix};
use crate::par;
use crate::solver;
use crate::stationary::{psd_project_symbol, symbol_fro_norm, StationarySymbol};

/// Eigenvector count of [`legendre_cov`] when used by [`simulate`]
/// (truncated to `k` on very small grids).
const LEGENDRE_RANK: usize = 7;

/// Sweep budget and tolerance of the alternating nearest-Kronecker-product
/// runs inside [`error_experiment`].
const NKP_SWEEPS: usize = 200;
const NKP_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Separable factor family of the simulated truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SepKind {
    /// Rank-7 covariance with linearly decaying eigenvalues and shifted
    /// Legendre polynomials (orthonormalized on the grid) as eigenvectors.
    Legendre,
    /// Brownian-motion covariance `min(t_i, t_j)`.
    Wiener,
}

/// Moving-average filter family of the banded part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Alternating signs `q(a, b) = (-1)^|a - b|`.
    Signed,
    /// Separable Epanechnikov window
    /// `q(a, b) = (9/16) (1 - |a|/(p+1)) (1 - |b|/(p+1))`.
    Epanechnikov,
}

/// Data-generating configuration for [`simulate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Grid size; samples live on a `k x k` grid.
    pub k: usize,
    /// Number of samples to draw.
    pub n: usize,
    /// Signal-to-noise ratio multiplying the separable part (`>= 0`).
    pub tau: f64,
    /// Moving-average window `2p + 1`; must be odd. `0` drops the banded
    /// part entirely (purely separable truth).
    pub d_true: usize,
    pub sep_kind: SepKind,
    pub filter_kind: FilterKind,
    /// Cap on the per-cell variance of the measurement noise `E_n`; each
    /// cell's variance is drawn uniformly from `[0, noise_sigma2]` once per
    /// configuration. `0` disables the noise term.
    #[serde(default)]
    pub noise_sigma2: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SptError::InvalidConfig("grid size k must be positive".into()));
        }
        if self.n == 0 {
            return Err(SptError::InvalidConfig("sample count n must be positive".into()));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(SptError::InvalidConfig(format!(
                "tau must be finite and nonnegative, got {}",
                self.tau
            )));
        }
        if !self.noise_sigma2.is_finite() || self.noise_sigma2 < 0.0 {
            return Err(SptError::InvalidConfig(format!(
                "noise_sigma2 must be finite and nonnegative, got {}",
                self.noise_sigma2
            )));
        }
        if self.d_true % 2 == 0 && self.d_true != 0 {
            return Err(SptError::InvalidConfig(format!(
                "d_true must be an odd window width 2p+1 (or 0 for no banded part), got {}",
                self.d_true
            )));
        }
        Bandwidth(self.d_true).validate(self.k, self.k)
    }
}

// ---------------------------------------------------------------------------
// Separable factors
// ---------------------------------------------------------------------------

/// Rank-`rank` covariance with shifted Legendre eigenvectors and linearly
/// decaying eigenvalues `lambda_j = (rank + 1 - j) / rank`, `j = 1..rank`,
/// Frobenius-normalized to `1`.
///
/// The polynomials are evaluated at the cell midpoints `t_i = (i - 1/2) / k`
/// and re-orthonormalized on the grid, so the result is an exact
/// eigendecomposition at every `k`: the matrix has exactly `rank` nonzero
/// eigenvalues in the stated ratios.
pub fn legendre_cov(k: usize, rank: usize) -> Result<SymMatrix> {
    if rank == 0 || rank > k {
        return Err(SptError::InvalidConfig(format!(
            "legendre rank must lie in 1..={k}, got {rank}"
        )));
    }
    // Columns: P_j(2t - 1) on the midpoint grid, via the Legendre recurrence.
    let mut v = Array2::zeros((k, rank));
    for i in 0..k {
        let u = 2.0 * ((i as f64 + 0.5) / k as f64) - 1.0;
        let mut prev = 1.0;
        let mut cur = u;
        for j in 0..rank {
            v[[i, j]] = if j == 0 { 1.0 } else { cur };
            if j >= 1 {
                let n = j as f64;
                let next = ((2.0 * n + 1.0) * u * cur - n * prev) / (n + 1.0);
                prev = cur;
                cur = next;
            }
        }
    }
    // Modified Gram-Schmidt with one re-orthogonalization pass.
    for j in 0..rank {
        for _ in 0..2 {
            for prev in 0..j {
                let proj: f64 = (0..k).map(|i| v[[i, j]] * v[[i, prev]]).sum();
                for i in 0..k {
                    v[[i, j]] -= proj * v[[i, prev]];
                }
            }
        }
        let norm = (0..k).map(|i| v[[i, j]] * v[[i, j]]).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(SptError::RankExceeded {
                requested: rank,
                available: j,
            });
        }
        for i in 0..k {
            v[[i, j]] /= norm;
        }
    }
    let mut a = Array2::zeros((k, k));
    for j in 0..rank {
        let lambda = (rank - j) as f64 / rank as f64;
        for r in 0..k {
            for c in 0..k {
                a[[r, c]] += lambda * v[[r, j]] * v[[c, j]];
            }
        }
    }
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    symmetrize((a / norm).view())
}

/// Brownian-motion covariance `A[i, j] = min(t_i, t_j)` at the right
/// endpoints `t_i = i / k` (the left endpoint `t = 0` is degenerate),
/// Frobenius-normalized to `1`.
pub fn wiener_cov(k: usize) -> Result<SymMatrix> {
    if k == 0 {
        return Err(SptError::InvalidConfig("grid size k must be positive".into()));
    }
    let a = Array2::from_shape_fn((k, k), |(i, j)| (i.min(j) + 1) as f64 / k as f64);
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    symmetrize((a / norm).view())
}

// ---------------------------------------------------------------------------
// Moving-average banded part
// ---------------------------------------------------------------------------

/// Moving-average filter on the offset window `a, b in [-p, p]`.
#[derive(Debug, Clone)]
pub struct MaFilter {
    p: usize,
    /// Coefficients, offset `(a, b)` at `[a + p, b + p]`.
    q: Array2<f64>,
}

impl MaFilter {
    pub fn p(&self) -> usize {
        self.p
    }

    /// Window width `2p + 1`, which is also the band of the induced symbol.
    pub fn window(&self) -> usize {
        2 * self.p + 1
    }

    /// Coefficient at offset `(a, b)`; zero outside the window.
    pub fn q(&self, a: isize, b: isize) -> f64 {
        let p = self.p as isize;
        if a.abs() > p || b.abs() > p {
            return 0.0;
        }
        self.q[[(a + p) as usize, (b + p) as usize]]
    }

    pub fn coefficients(&self) -> &Array2<f64> {
        &self.q
    }
}

/// Builds the `(2p+1) x (2p+1)` averaging filter of the requested family.
pub fn ma_filter(kind: FilterKind, p: usize) -> MaFilter {
    let w = 2 * p + 1;
    let q = Array2::from_shape_fn((w, w), |(r, c)| {
        let a = r as isize - p as isize;
        let b = c as isize - p as isize;
        match kind {
            FilterKind::Signed => {
                if (a - b).abs() % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            FilterKind::Epanechnikov => {
                let s = p as f64 + 1.0;
                (9.0 / 16.0) * (1.0 - a.abs() as f64 / s) * (1.0 - b.abs() as f64 / s)
            }
        }
    });
    MaFilter { p, q }
}

/// Unnormalized autocorrelation symbol of a filter on a `k1 x k2` grid:
/// `s(h, l) = sum_{a,b} q(a, b) q(a - h, b - l)`, banded by `2p + 1`.
fn ma_symbol_raw(f: &MaFilter, k1: usize, k2: usize) -> Result<StationarySymbol> {
    let band = f.window();
    Bandwidth(band).validate(k1, k2)?;
    let p = f.p as isize;
    let mut s = Array2::zeros((2 * k1 - 1, 2 * k2 - 1));
    for h in -2 * p..=2 * p {
        for l in -2 * p..=2 * p {
            let mut acc = 0.0;
            for a in -p..=p {
                for b in -p..=p {
                    acc += f.q(a, b) * f.q(a - h, b - l);
                }
            }
            s[[(h + k1 as isize - 1) as usize, (l + k2 as isize - 1) as usize]] = acc;
        }
    }
    StationarySymbol::new(k1, k2, s, Some(band))
}

/// Covariance symbol of the moving-average process induced by `f`,
/// normalized so the `k1 x k2` stationary tensor has Frobenius norm `1`.
pub fn ma_symbol(f: &MaFilter, k1: usize, k2: usize) -> Result<StationarySymbol> {
    let raw = ma_symbol_raw(f, k1, k2)?;
    let norm = symbol_fro_norm(&raw);
    if norm <= 0.0 {
        return Err(SptError::InvalidConfig(
            "moving-average filter induces an all-zero symbol".into(),
        ));
    }
    Ok(raw.scale(1.0 / norm))
}

/// Multiplier for [`sample_ma`] draws so their covariance equals
/// [`ma_symbol`]: covariance is quadratic in the sample scale, so this is
/// the square root of the symbol normalizer.
pub fn ma_norm_const(f: &MaFilter, k1: usize, k2: usize) -> Result<f64> {
    let norm = symbol_fro_norm(&ma_symbol_raw(f, k1, k2)?);
    if norm <= 0.0 {
        return Err(SptError::InvalidConfig(
            "moving-average filter induces an all-zero symbol".into(),
        ));
    }
    Ok(1.0 / norm.sqrt())
}

/// One moving-average surface: an extended white-noise field (border of one
/// window width on each side) convolved with the filter and scaled by
/// `norm_const`, so `cov(W[i,j], W[i+h,j+l]) = norm_const^2 * s_raw(h, l)`.
///
/// The field is drawn row by row; with a ChaCha stream per sample this
/// layout is part of the reproducibility contract.
pub fn sample_ma<R: Rng + ?Sized>(
    f: &MaFilter,
    k1: usize,
    k2: usize,
    norm_const: f64,
    rng: &mut R,
) -> Array2<f64> {
    let p = f.p;
    let d = f.window();
    let mut field = Array2::zeros((k1 + 2 * d, k2 + 2 * d));
    for v in field.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let mut w = Array2::zeros((k1, k2));
    for i in 0..k1 {
        for j in 0..k2 {
            let mut acc = 0.0;
            for a in 0..2 * p + 1 {
                for b in 0..2 * p + 1 {
                    acc += f.q[[a, b]] * field[[i + d - p + a, j + d - p + b]];
                }
            }
            w[[i, j]] = norm_const * acc;
        }
    }
    w
}

// ---------------------------------------------------------------------------
// Matrix-normal sampling
// ---------------------------------------------------------------------------

/// Symmetric square root `U diag(sqrt(max(phi, 0))) U^T` (negative
/// eigenvalues clamped).
fn sym_sqrt(a: &SymMatrix) -> Result<Array2<f64>> {
    let eig = solver::sym_eigen(a)?;
    let mut scaled = eig.u.clone();
    for (mut col, &phi) in scaled.columns_mut().into_iter().zip(eig.phi.iter()) {
        col *= phi.max(0.0).sqrt();
    }
    Ok(scaled.dot(&eig.u.t()))
}

fn standard_normal_matrix<R: Rng + ?Sized>(k1: usize, k2: usize, rng: &mut R) -> Array2<f64> {
    let mut z = Array2::zeros((k1, k2));
    for v in z.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    z
}

/// One matrix-variate Gaussian draw `Y = L1 Z L2^T` with
/// `cov(Y[i,j], Y[k,l]) = a1[i,k] * a2[j,l]`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    a1: &SymMatrix,
    a2: &SymMatrix,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let l1 = sym_sqrt(a1)?;
    let l2 = sym_sqrt(a2)?;
    let z = standard_normal_matrix(a1.k(), a2.k(), rng);
    // The square roots are symmetric, so right-multiplying by l2 is L2^T.
    Ok(l1.dot(&z).dot(&l2))
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn base_factor(cfg: &SimConfig) -> Result<SymMatrix> {
    match cfg.sep_kind {
        SepKind::Legendre => legendre_cov(cfg.k, LEGENDRE_RANK.min(cfg.k)),
        SepKind::Wiener => wiener_cov(cfg.k),
    }
}

/// Population covariance of `sqrt(tau) Y + W`: `tau * A (x) A + B` with the
/// tau carried by the first factor and the symbol normalized and projected
/// onto the PSD cone (a roundoff-level no-op for these filters).
pub fn truth_model(cfg: &SimConfig) -> Result<SepPlusBandedCov> {
    cfg.validate()?;
    let base = base_factor(cfg)?;
    let banded = if cfg.d_true == 0 {
        BandedPart::None
    } else {
        let filt = ma_filter(cfg.filter_kind, (cfg.d_true - 1) / 2);
        let sym = psd_project_symbol(&ma_symbol(&filt, cfg.k, cfg.k)?)?;
        // The projection clears the band marker in the (roundoff) branch
        // where the autocorrelation spectrum dips below zero; the support
        // is still the window, so re-clip to restore the exact zeros.
        let sym = if sym.band().is_some() {
            sym
        } else {
            sym.band_clip(cfg.d_true)?
        };
        BandedPart::Stationary(sym)
    };
    SepPlusBandedCov::new(
        base.scale(cfg.tau),
        base,
        banded,
        Bandwidth(cfg.d_true),
    )
}

/// Draws the sample stack and returns it with its population covariance.
///
/// Per sample (stream `n + 1`): the matrix-normal draw, then the
/// moving-average field when `d_true >= 1`, then the noise surface when
/// `noise_sigma2 > 0`. Which blocks are drawn depends only on the config,
/// never on the data, so stacks are reproducible and samples can be drawn
/// in parallel.
pub fn simulate(cfg: &SimConfig) -> Result<(SampleStack, SepPlusBandedCov)> {
    let truth = truth_model(cfg)?;
    let k = cfg.k;
    // truth.a2() is the unscaled Frobenius-normalized base factor.
    let l = sym_sqrt(truth.a2())?;
    let sqrt_tau = cfg.tau.sqrt();
    let ma = if cfg.d_true > 0 {
        let filt = ma_filter(cfg.filter_kind, (cfg.d_true - 1) / 2);
        let scale = ma_norm_const(&filt, k, k)?;
        Some((filt, scale))
    } else {
        None
    };
    let noise_sd = if cfg.noise_sigma2 > 0.0 {
        let mut rng = stream_rng(cfg.seed, 0);
        let mut sd = Array2::zeros((k, k));
        for v in sd.iter_mut() {
            *v = (cfg.noise_sigma2 * rng.gen::<f64>()).sqrt();
        }
        Some(sd)
    } else {
        None
    };
    let draws = par::par_map_indexed(cfg.n, |i| {
        let mut rng = stream_rng(cfg.seed, i as u64 + 1);
        let z = standard_normal_matrix(k, k, &mut rng);
        let mut x = l.dot(&z).dot(&l);
        x *= sqrt_tau;
        if let Some((filt, scale)) = &ma {
            x += &sample_ma(filt, k, k, *scale, &mut rng);
        }
        if let Some(sd) = &noise_sd {
            let e = standard_normal_matrix(k, k, &mut rng);
            x += &(sd * &e);
        }
        x
    });
    let mut data = Array3::zeros((cfg.n, k, k));
    for (i, draw) in draws.into_iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), i).assign(&draw);
    }
    Ok((SampleStack::new(data)?, truth))
}

// ---------------------------------------------------------------------------
// Error-curve experiments
// ---------------------------------------------------------------------------

/// Estimation method compared by [`error_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Shifted partial tracing at the true bandwidth, stationary residual.
    SptD,
    /// Shifted partial tracing at the cross-validated bandwidth.
    SptCv,
    /// Plain partial tracing (separable fit).
    Pt,
    /// Nearest Kronecker product (separable fit).
    Nkp,
    /// Raw empirical covariance.
    Ece,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::SptD => "spt-d",
            Method::SptCv => "spt-cv",
            Method::Pt => "pt",
            Method::Nkp => "nkp",
            Method::Ece => "ece",
        };
        write!(f, "{name}")
    }
}

/// Which difficulty parameter an experiment sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentAxis {
    /// True bandwidth `d_true` (each value odd or 0).
    Bandwidth(Vec<usize>),
    /// Signal-to-noise ratio.
    Tau(Vec<f64>),
    /// Sample count.
    SampleSize(Vec<usize>),
    /// Grid size.
    GridSize(Vec<usize>),
}

impl ExperimentAxis {
    /// Column name of the axis in emitted tables.
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentAxis::Bandwidth(_) => "d",
            ExperimentAxis::Tau(_) => "tau",
            ExperimentAxis::SampleSize(_) => "N",
            ExperimentAxis::GridSize(_) => "K",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ExperimentAxis::Bandwidth(v) => v.len(),
            ExperimentAxis::Tau(v) => v.len(),
            ExperimentAxis::SampleSize(v) => v.len(),
            ExperimentAxis::GridSize(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            ExperimentAxis::Bandwidth(v) => v[i] as f64,
            ExperimentAxis::Tau(v) => v[i],
            ExperimentAxis::SampleSize(v) => v[i] as f64,
            ExperimentAxis::GridSize(v) => v[i] as f64,
        }
    }

    fn apply(&self, base: &SimConfig, i: usize) -> SimConfig {
        let mut cfg = base.clone();
        match self {
            ExperimentAxis::Bandwidth(v) => cfg.d_true = v[i],
            ExperimentAxis::Tau(v) => cfg.tau = v[i],
            ExperimentAxis::SampleSize(v) => cfg.n = v[i],
            ExperimentAxis::GridSize(v) => cfg.k = v[i],
        }
        cfg
    }
}

/// Error-curve experiment: a sweep along one axis, `reps` replicates per
/// cell, each method scored on the same replicate stacks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub base: SimConfig,
    pub axis: ExperimentAxis,
    pub methods: Vec<Method>,
    pub reps: usize,
}

/// Scores of one (axis value, method) cell.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentCell {
    pub axis_value: f64,
    pub method: Method,
    pub median_rel_error: f64,
    /// Per-replicate relative errors, in replicate order (replicates are
    /// paired across methods within a cell).
    pub errors: Vec<f64>,
}

/// Result table of [`error_experiment`].
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    /// Axis column name (`d`, `tau`, `N`, or `K`).
    pub axis_name: String,
    pub cells: Vec<ExperimentCell>,
    /// Relative error of the best separable approximation of the truth per
    /// axis value: the floor no separable estimator can beat.
    pub bias: Vec<(f64, f64)>,
}

impl ExperimentResult {
    /// Long-format table `axis,value,method,median_rel_error`, with the
    /// separability bias appended under the pseudo-method `bias`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,method,median_rel_error\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.axis_name, cell.axis_value, cell.method, cell.median_rel_error
            ));
        }
        for (value, bias) in &self.bias {
            out.push_str(&format!("{},{},bias,{}\n", self.axis_name, value, bias));
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Replicate seed for (cell, rep), derived from the base seed. Part of the
/// reproducibility contract.
fn substream_seed(seed: u64, cell: usize, rep: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((cell as u64) << 32) ^ rep as u64))
}

/// Cross-validation candidate grid used by the `spt-cv` method: bandwidths
/// up to a quarter of the grid (capped), which covers the simulated regimes
/// without quadratic search cost.
fn cv_candidates(k: usize) -> Vec<usize> {
    (0..=(k / 4).min(25)).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn separable_model(a1: SymMatrix, a2: SymMatrix) -> Result<SepPlusBandedCov> {
    SepPlusBandedCov::new(a1, a2, BandedPart::None, Bandwidth(0))
}

fn method_error(
    method: Method,
    stack: &SampleStack,
    truth: &SepPlusBandedCov,
    cfg: &SimConfig,
    seed: u64,
) -> Result<f64> {
    let opts = EstimateOptions::default();
    match method {
        Method::SptD => {
            let kind = if cfg.d_true == 0 {
                BandedKind::None
            } else {
                BandedKind::Stationary
            };
            let fit = estimators::estimate_full(stack, cfg.d_true, kind, &opts)?;
            estimators::rel_error(&fit, truth)
        }
        Method::SptCv => {
            let mut search = BandwidthSearch::over(cv_candidates(cfg.k));
            search.seed = seed;
            let selection = select_bandwidth(stack, &search)?;
            let kind = if selection.d_hat == 0 {
                BandedKind::None
            } else {
                BandedKind::Stationary
            };
            let fit = estimators::estimate_full(stack, selection.d_hat, kind, &opts)?;
            estimators::rel_error(&fit, truth)
        }
        Method::Pt => {
            let (a1, a2) = estimators::baseline_pt(stack, &opts)?;
            estimators::rel_error(&separable_model(a1, a2)?, truth)
        }
        Method::Nkp => {
            let fit = estimators::baseline_nkp(stack, NKP_SWEEPS, NKP_TOL, &opts)?;
            estimators::rel_error(&separable_model(fit.a1, fit.a2)?, truth)
        }
        Method::Ece => estimators::rel_error_empirical(stack, truth, true),
    }
}

/// Runs the error-curve experiment: for every axis value, `reps` replicate
/// stacks are simulated (independent seeds per cell and replicate) and each
/// method's relative estimation error against the truth is recorded; cells
/// report the median. The separability bias — the error of the best
/// separable approximation of the truth, found by alternating iteration on
/// the structured covariance — is computed once per axis value.
pub fn error_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.axis.is_empty() {
        return Err(SptError::InvalidConfig(
            "experiment axis needs at least one value".into(),
        ));
    }
    if cfg.methods.is_empty() {
        return Err(SptError::InvalidConfig(
            "experiment needs at least one method".into(),
        ));
    }
    if cfg.reps == 0 {
        return Err(SptError::InvalidConfig(
            "experiment needs at least one replicate".into(),
        ));
    }
    let mut cells = Vec::with_capacity(cfg.axis.len() * cfg.methods.len());
    let mut bias = Vec::with_capacity(cfg.axis.len());
    for ci in 0..cfg.axis.len() {
        let cell_cfg = cfg.axis.apply(&cfg.base, ci);
        cell_cfg.validate()?;
        let truth = truth_model(&cell_cfg)?;
        let nkp = estimators::nkp_truth(&truth, NKP_SWEEPS, NKP_TOL)?;
        bias.push((
            cfg.axis.value(ci),
            estimators::rel_error(&separable_model(nkp.a1, nkp.a2)?, &truth)?,
        ));
        let mut per_method: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.reps); cfg.methods.len()];
        for rep in 0..cfg.reps {
            let mut rep_cfg = cell_cfg.clone();
            rep_cfg.seed = substream_seed(cfg.base.seed, ci, rep);
            let (stack, _) = simulate(&rep_cfg)?;
            for (m, errors) in cfg.methods.iter().zip(per_method.iter_mut()) {
                errors.push(method_error(*m, &stack, &truth, &rep_cfg, rep_cfg.seed)?);
            }
        }
        for (m, errors) in cfg.methods.iter().zip(per_method) {
            cells.push(ExperimentCell {
                axis_value: cfg.axis.value(ci),
                method: *m,
                median_rel_error: median(&errors),
                errors,
            });
        }
    }
    Ok(ExperimentResult {
        axis_name: cfg.axis.name().to_string(),
        cells,
        bias,
    })
}
