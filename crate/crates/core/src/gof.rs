//! Bootstrap goodness-of-fit testing for the separable-plus-banded model.
//!
//! The distance operator `D_N = C_N - A1 (x) A2 - B` lives in a `K^4`-sized
//! space, so the test projects it onto the subspace spanned by the pairs
//! `e_i (x) f_j` of leading eigenvectors of the fitted separable factors,
//! where every quadratic form collapses to `O(N K^2)` sample projections.
//! The observed statistic `sum_ij <u_ij, D_N u_ij>^2` is then compared
//! against an empirical bootstrap: each draw refits the model on a resample
//! (with replacement) and evaluates `sum_ij <u_ij, (D_N - D*) u_ij>^2` on
//! the subspace held fixed from the original fit, so the resampled law
//! tracks the null even when the data stray from the model class. With
//! `d = 0` the banded part vanishes and the procedure reduces to the
//! classical bootstrap separability test.
//!
//! Bootstrap draws are deterministic given the configured seed: draw `m`
//! reads substream `m` of a counter-based generator, and a draw whose
//! resample produces a degenerate shifted trace redraws from its own
//! substream, so thread scheduling never changes the result.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::estimators::{
    estimate_from_stats, BandedKind, BandedPart, SepPlusBandedCov, SubsetWeights, SymbolStats,
    TraceStats,
};
use crate::model::{Bandwidth, SampleStack};
use crate::par;
use crate::solver::sym_eigen;
use crate::stationary::apply_stationary;

/// Eigenvalues at or below this fraction of the largest magnitude count as
/// zero when checking how many eigenpairs a fitted factor can supply.
const RANK_TOL: f64 = 1e-12;

/// Attempts per bootstrap draw before a persistently degenerate resample is
/// reported as an error (so the aggregate attempt count stays within ten
/// times the number of draws).
const DRAW_RETRY_CAP: usize = 10;

fn default_dims() -> usize {
    2
}

fn default_n_boot() -> usize {
    1000
}

/// Configuration of the goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GofConfig {
    /// Bandwidth of the model class under test (`0` tests plain
    /// separability).
    pub d: usize,
    /// Eigenvectors of the first factor spanning the projection subspace.
    #[serde(default = "default_dims")]
    pub i_dims: usize,
    /// Eigenvectors of the second factor spanning the projection subspace.
    #[serde(default = "default_dims")]
    pub j_dims: usize,
    /// Bootstrap draws.
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    /// Master seed for the bootstrap resampling streams.
    #[serde(default)]
    pub seed: u64,
    /// Recompute the projection subspace from each draw's own fit instead of
    /// holding the original one fixed.
    #[serde(default)]
    pub refit_subspace: bool,
}

impl GofConfig {
    /// Test at bandwidth `d` with the default subspace ranks `(2, 2)` and
    /// 1000 bootstrap draws.
    pub fn new(d: usize) -> Self {
        GofConfig {
            d,
            i_dims: default_dims(),
            j_dims: default_dims(),
            n_boot: default_n_boot(),
            seed: 0,
            refit_subspace: false,
        }
    }

    /// Checks the configuration against the sample dimensions.
    pub fn validate(&self, k1: usize, k2: usize) -> Result<()> {
        Bandwidth(self.d).validate(k1, k2)?;
        if self.i_dims == 0 || self.i_dims > k1 {
            return Err(SptError::InvalidConfig(format!(
                "subspace rank i_dims = {} must be in 1..={k1}",
                self.i_dims
            )));
        }
        if self.j_dims == 0 || self.j_dims > k2 {
            return Err(SptError::InvalidConfig(format!(
                "subspace rank j_dims = {} must be in 1..={k2}",
                self.j_dims
            )));
        }
        if self.n_boot == 0 {
            return Err(SptError::InvalidConfig(
                "n_boot must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of [`gof_test`].
#[derive(Debug, Clone, Serialize)]
pub struct GofResult {
    /// Observed projected distance `sum_ij <u_ij, D_N u_ij>^2`.
    pub statistic: f64,
    /// Bootstrap p-value `(1 + #{draws exceeding the statistic}) /
    /// (n_boot + 1)`, always inside `[1/(n_boot+1), 1]`.
    pub p_value: f64,
    /// The `n_boot` bootstrap draws of the projected distance.
    pub boot: Vec<f64>,
    /// Degenerate resamples that were redrawn.
    pub redraws: usize,
}

/// Projection subspace: `i_dims` columns of `e` and `j_dims` columns of `f`.
struct Subspace {
    e: Array2<f64>,
    f: Array2<f64>,
}

/// Leading eigenvectors of the fit's factors, with a rank check against the
/// requested subspace dimensions.
fn fit_subspace(fit: &SepPlusBandedCov, i_dims: usize, j_dims: usize) -> Result<Subspace> {
    let take = |m: &crate::model::SymMatrix, want: usize| -> Result<Array2<f64>> {
        let pair = sym_eigen(m)?;
        let scale = pair.phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let available = pair
            .phi
            .iter()
            .filter(|&&v| v.abs() > RANK_TOL * scale)
            .count();
        if want > available {
            return Err(SptError::RankExceeded {
                requested: want,
                available,
            });
        }
        Ok(pair.u.slice(s![.., ..want]).to_owned())
    };
    Ok(Subspace {
        e: take(fit.a1(), i_dims)?,
        f: take(fit.a2(), j_dims)?,
    })
}

/// Per-sample projections `<X_n, e_i (x) f_j> = e_i' X_n f_j`, one `I x J`
/// block per sample.
fn sample_projections(stack: &SampleStack, sub: &Subspace) -> Vec<Array2<f64>> {
    par::par_map_indexed(stack.n(), |i| {
        sub.e.t().dot(&stack.sample(i)).dot(&sub.f)
    })
}

/// Quadratic forms `<e_i (x) f_j, B (e_i (x) f_j)>` of a banded part.
fn banded_quadratic(banded: &BandedPart, sub: &Subspace) -> Result<Array2<f64>> {
    let (i_dims, j_dims) = (sub.e.ncols(), sub.f.ncols());
    let mut q = Array2::zeros((i_dims, j_dims));
    if matches!(banded, BandedPart::None) {
        return Ok(q);
    }
    let dense = match banded {
        BandedPart::Banded(bt) => Some(bt.to_dense()?),
        _ => None,
    };
    for i in 0..i_dims {
        for j in 0..j_dims {
            let u = Array2::from_shape_fn((sub.e.nrows(), sub.f.nrows()), |(a, b)| {
                sub.e[[a, i]] * sub.f[[b, j]]
            });
            let bu = match (banded, &dense) {
                (BandedPart::Stationary(sym), _) => apply_stationary(sym, u.view())?,
                (_, Some(t)) => t.apply(u.view())?,
                _ => unreachable!("BandedPart::None returned above"),
            };
            q[[i, j]] = u.iter().zip(bu.iter()).map(|(x, y)| x * y).sum();
        }
    }
    Ok(q)
}

/// Quadratic forms of a (re)fitted distance operator on the subspace, from
/// weighted per-sample projections: the empirical term is the weighted mean
/// of squares (minus the squared weighted mean when `center` is set), and
/// the model terms are the factor quadratics `(e_i' A1 e_i)(f_j' A2 f_j)`
/// plus the banded quadratic.
fn distance_cells(
    proj: &[Array2<f64>],
    weights: &SubsetWeights,
    fit: &SepPlusBandedCov,
    sub: &Subspace,
    center: bool,
) -> Result<Array2<f64>> {
    let (i_dims, j_dims) = (sub.e.ncols(), sub.f.ncols());
    let mut sq = Array2::zeros((i_dims, j_dims));
    let mut lin = Array2::zeros((i_dims, j_dims));
    for (w, p) in weights.counts.iter().zip(proj) {
        if *w != 0.0 {
            sq.zip_mut_with(p, |acc, &v| *acc += w * v * v);
            lin.scaled_add(*w, p);
        }
    }
    sq /= weights.total;
    lin /= weights.total;
    let mut cells = sq;
    if center {
        cells -= &(&lin * &lin);
    }
    let factor_diag = |m: &Array2<f64>, basis: &Array2<f64>| -> Array1<f64> {
        (basis * &m.dot(basis)).sum_axis(ndarray::Axis(0))
    };
    let d1 = factor_diag(fit.a1().as_array(), &sub.e);
    let d2 = factor_diag(fit.a2().as_array(), &sub.f);
    for i in 0..i_dims {
        for j in 0..j_dims {
            cells[[i, j]] -= d1[i] * d2[j];
        }
    }
    cells -= &banded_quadratic(fit.banded(), sub)?;
    Ok(cells)
}

fn squared_sum(cells: &Array2<f64>) -> f64 {
    cells.iter().map(|v| v * v).sum()
}

fn contrast(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Observed test statistic `sum_ij <e_i (x) f_j, D_N (e_i (x) f_j)>^2`
/// with `D_N = C_N - A1 (x) A2 - B` taken from `fit`.
///
/// The empirical covariance is the one around the sample mean (skipped when
/// the stack is flagged centered); each projected quadratic reduces to
/// `(1/N) sum_n <X_n, e_i (x) f_j>^2 - (e_i' A1 e_i)(f_j' A2 f_j) -
/// <e_i (x) f_j, B (e_i (x) f_j)>`, with the banded quadratic evaluated
/// through the circulant-embedding fast path.
pub fn gof_statistic(
    samples: &SampleStack,
    fit: &SepPlusBandedCov,
    cfg: &GofConfig,
) -> Result<f64> {
    cfg.validate(samples.k1(), samples.k2())?;
    if fit.k1() != samples.k1() || fit.k2() != samples.k2() {
        return Err(SptError::ShapeMismatch {
            expected: format!("{} x {} model", samples.k1(), samples.k2()),
            got: format!("{} x {}", fit.k1(), fit.k2()),
        });
    }
    let storage;
    let stack = if samples.is_centered() {
        samples
    } else {
        storage = samples.center();
        &storage
    };
    let sub = fit_subspace(fit, cfg.i_dims, cfg.j_dims)?;
    let proj = sample_projections(stack, &sub);
    let cells = distance_cells(&proj, &SubsetWeights::all(stack.n()), fit, &sub, false)?;
    Ok(squared_sum(&cells))
}

/// Empirical bootstrap goodness-of-fit test of the separable-plus-banded
/// model at bandwidth `cfg.d`.
///
/// Fits the model, computes the observed projected distance, then compares
/// it against `n_boot` bootstrap draws `sum_ij <u_ij, (D_N - D*) u_ij>^2`,
/// each refitted from a resample with replacement through the same pipeline
/// (centering, trace normalization, PSD projections) as the original fit.
/// A draw whose shifted trace degenerates is redrawn from its own RNG
/// substream, up to [`DRAW_RETRY_CAP`] attempts, after which the error
/// surfaces.
pub fn gof_test(samples: &SampleStack, cfg: &GofConfig) -> Result<GofResult> {
    cfg.validate(samples.k1(), samples.k2())?;
    let center = !samples.is_centered();
    let storage;
    let stack = if center {
        storage = samples.center();
        &storage
    } else {
        samples
    };
    let n = stack.n();
    let traces = TraceStats::compute(stack, cfg.d)?;
    let symbols = SymbolStats::compute(stack);
    let all = SubsetWeights::all(n);
    let fit = estimate_from_stats(
        &traces,
        Some(&symbols),
        stack,
        &all,
        BandedKind::Stationary,
        center,
        true,
    )?;
    let sub = fit_subspace(&fit, cfg.i_dims, cfg.j_dims)?;
    let proj = sample_projections(stack, &sub);
    let observed = distance_cells(&proj, &all, &fit, &sub, center)?;
    let statistic = squared_sum(&observed);

    let draws = par::par_map_indexed(cfg.n_boot, |m| -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(m as u64);
        let mut redraws = 0;
        loop {
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let weights = SubsetWeights::from_resample(n, &indices);
            let degenerate = |redraws: &mut usize, err: SptError| -> Result<()> {
                if *redraws + 1 < DRAW_RETRY_CAP {
                    *redraws += 1;
                    Ok(())
                } else {
                    Err(err)
                }
            };
            let refit = match estimate_from_stats(
                &traces,
                Some(&symbols),
                stack,
                &weights,
                BandedKind::Stationary,
                center,
                true,
            ) {
                Ok(f) => f,
                Err(err @ SptError::DegenerateTrace { .. }) => {
                    degenerate(&mut redraws, err)?;
                    continue;
                }
                Err(err) => return Err(err),
            };
            let value = if cfg.refit_subspace {
                let sub_m = match fit_subspace(&refit, cfg.i_dims, cfg.j_dims) {
                    Ok(s) => s,
                    Err(err @ SptError::RankExceeded { .. }) => {
                        degenerate(&mut redraws, err)?;
                        continue;
                    }
                    Err(err) => return Err(err),
                };
                let proj_m: Vec<Array2<f64>> = (0..n)
                    .map(|i| sub_m.e.t().dot(&stack.sample(i)).dot(&sub_m.f))
                    .collect();
                let obs_m = distance_cells(&proj_m, &all, &fit, &sub_m, center)?;
                let star = distance_cells(&proj_m, &weights, &refit, &sub_m, center)?;
                contrast(&obs_m, &star)
            } else {
                let star = distance_cells(&proj, &weights, &refit, &sub, center)?;
                contrast(&observed, &star)
            };
            return Ok((value, redraws));
        }
    });

    let mut boot = Vec::with_capacity(cfg.n_boot);
    let mut redraws = 0;
    for draw in draws {
        let (value, r) = draw?;
        boot.push(value);
        redraws += r;
    }
    let exceed = boot.iter().filter(|&&b| b > statistic).count();
    let p_value = (1 + exceed) as f64 / (cfg.n_boot + 1) as f64;
    Ok(GofResult {
        statistic,
        p_value,
        boot,
        redraws,
    })
}
