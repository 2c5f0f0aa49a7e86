//! Bandwidth selection by cross-validation, plus the structured Frobenius
//! norm and quadratic-form machinery it runs on.
//!
//! The CV score of a candidate bandwidth `d` is
//!
//! ```text
//! Xi(d) = |C_hat(d)|_F^2 - (2/N) sum_n <X_n, C_hat_{-fold(n)}(d) X_n>
//! ```
//!
//! an unbiased-up-to-constants proxy for `|C_hat(d) - C|_F^2`. Everything is
//! evaluated without dense tensors: squared norms of signed sums of
//! separable, stationary, and banded components decompose over diagonal
//! lag blocks where each component is rank one (or a stored slice), and the
//! leave-fold-out estimators are weighted averages of cached per-sample
//! statistics.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SptError};
use crate::estimators::{
    estimate_from_stats, estimate_full, BandedKind, BandedPart, BandedTensor, EstimateOptions,
    SepPlusBandedCov, SubsetWeights, SymbolStats, TraceStats,
};
use crate::model::{Bandwidth, SampleStack, SymMatrix};
use crate::solver::apply_separable;
use crate::stationary::{symbol_quad_form, topavg_sample, StationarySymbol};

/// One signed component of a structured covariance sum.
pub enum NormTerm<'a> {
    /// `coef * (a1 (x) a2)`.
    Separable(&'a SymMatrix, &'a SymMatrix, f64),
    /// `coef *` the two-level stationary tensor of a symbol.
    Symbol(&'a StationarySymbol, f64),
    /// `coef *` a dense banded tensor.
    Banded(&'a BandedTensor, f64),
}

impl NormTerm<'_> {
    fn grid(&self) -> (usize, usize) {
        match self {
            NormTerm::Separable(a1, a2, _) => (a1.k(), a2.k()),
            NormTerm::Symbol(s, _) => (s.k1(), s.k2()),
            NormTerm::Banded(b, _) => (b.k1(), b.k2()),
        }
    }
}

/// Per-lag diagonal vectors of each factor (plus a ones factor standing in
/// for all symbol terms) and their Gram matrices.
struct LagSide {
    vecs: Vec<Vec<Vec<f64>>>,
    grams: Vec<Array2<f64>>,
    k: usize,
}

impl LagSide {
    fn build(k: usize, factors: &[&SymMatrix], with_ones: bool) -> Self {
        let n_fac = factors.len() + with_ones as usize;
        let mut vecs = Vec::with_capacity(2 * k - 1);
        let mut grams = Vec::with_capacity(2 * k - 1);
        for h in -(k as isize - 1)..=(k as isize - 1) {
            let lo = 0isize.max(-h) as usize;
            let hi = (k as isize - 0isize.max(h)) as usize;
            let mut fac: Vec<Vec<f64>> = Vec::with_capacity(n_fac);
            for a in factors {
                fac.push(
                    (lo..hi)
                        .map(|i| a.as_array()[[i, (i as isize + h) as usize]])
                        .collect(),
                );
            }
            if with_ones {
                fac.push(vec![1.0; hi - lo]);
            }
            let mut g = Array2::zeros((n_fac, n_fac));
            for r in 0..n_fac {
                for s in r..n_fac {
                    let dot: f64 = fac[r].iter().zip(&fac[s]).map(|(x, y)| x * y).sum();
                    g[[r, s]] = dot;
                    g[[s, r]] = dot;
                }
            }
            vecs.push(fac);
            grams.push(g);
        }
        LagSide { vecs, grams, k }
    }

    fn idx(&self, h: isize) -> usize {
        (h + self.k as isize - 1) as usize
    }
}

/// Squared Frobenius norm of a signed sum of structured components, in
/// `O(R^2 K^2 + R K^2 d^2)` without forming any dense tensor.
///
/// The entries of the sum partition into diagonal lag blocks
/// `(i, j) -> (i+h, j+l)`. On block `(h, l)` a separable term contributes the
/// rank-one matrix `diag_h(a1) diag_l(a2)^T`, a symbol term the constant
/// `s(h, l)`, and a banded term its stored slice; the squared norm is
/// accumulated blockwise from factor Gram matrices and slice sums.
pub fn structured_fro_norm2(terms: &[NormTerm<'_>]) -> Result<f64> {
    if terms.is_empty() {
        return Ok(0.0);
    }
    let (k1, k2) = terms[0].grid();
    for t in terms {
        if t.grid() != (k1, k2) {
            return Err(SptError::ShapeMismatch {
                expected: format!("{k1} x {k2}"),
                got: format!("{} x {}", t.grid().0, t.grid().1),
            });
        }
    }
    let mut sep: Vec<(&SymMatrix, &SymMatrix, f64)> = Vec::new();
    let mut syms: Vec<(&StationarySymbol, f64)> = Vec::new();
    let mut bands: Vec<(&BandedTensor, f64)> = Vec::new();
    for t in terms {
        match t {
            NormTerm::Separable(a1, a2, c) => sep.push((a1, a2, *c)),
            NormTerm::Symbol(s, c) => syms.push((s, *c)),
            NormTerm::Banded(b, c) => bands.push((b, *c)),
        }
    }
    let with_ones = !syms.is_empty();
    let n_fac = sep.len() + with_ones as usize;
    let a1s: Vec<&SymMatrix> = sep.iter().map(|(a, _, _)| *a).collect();
    let a2s: Vec<&SymMatrix> = sep.iter().map(|(_, a, _)| *a).collect();
    let rows = LagSide::build(k1, &a1s, with_ones);
    let cols = LagSide::build(k2, &a2s, with_ones);

    let mut total = 0.0;
    let mut sigma = vec![0.0; n_fac];
    for h in -(k1 as isize - 1)..=(k1 as isize - 1) {
        let uh = rows.idx(h);
        let i_lo = 0isize.max(-h) as usize;
        let i_hi = (k1 as isize - 0isize.max(h)) as usize;
        for l in -(k2 as isize - 1)..=(k2 as isize - 1) {
            let vl = cols.idx(l);
            for (r, (_, _, c)) in sep.iter().enumerate() {
                sigma[r] = *c;
            }
            if with_ones {
                sigma[n_fac - 1] = syms.iter().map(|(s, c)| c * s.get(h, l)).sum();
            }
            let g1 = &rows.grams[uh];
            let g2 = &cols.grams[vl];
            for r in 0..n_fac {
                for s in 0..n_fac {
                    total += sigma[r] * sigma[s] * g1[[r, s]] * g2[[r, s]];
                }
            }
            let width = h.unsigned_abs().max(l.unsigned_abs());
            if bands.iter().any(|(b, _)| width < b.d()) {
                let j_lo = 0isize.max(-l) as usize;
                let j_hi = (k2 as isize - 0isize.max(l)) as usize;
                let u = &rows.vecs[uh];
                let v = &cols.vecs[vl];
                let mut cross = vec![0.0; n_fac];
                for (ii, i) in (i_lo..i_hi).enumerate() {
                    for (jj, j) in (j_lo..j_hi).enumerate() {
                        let m: f64 = bands
                            .iter()
                            .filter(|(b, _)| width < b.d())
                            .map(|(b, c)| c * b.lag(i, j, h, l))
                            .sum();
                        total += m * m;
                        for r in 0..n_fac {
                            cross[r] += u[r][ii] * m * v[r][jj];
                        }
                    }
                }
                for r in 0..n_fac {
                    total += 2.0 * sigma[r] * cross[r];
                }
            }
        }
    }
    Ok(total.max(0.0))
}

/// `<x, C x>` for a structured covariance, in `O(K^3)`:. the separable part
/// through two matrix products, a stationary part through the lag identity
/// `<x, B x> = k1 k2 sum_{h,l} s(h,l) topavg(x)(h,l)`, and a banded part
/// through its sparse application.
pub fn quad_form(c: &SepPlusBandedCov, x: ArrayView2<'_, f64>) -> Result<f64> {
    let sep = apply_separable(c.a1(), c.a2(), x)?;
    let mut total: f64 = sep.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    match c.banded() {
        BandedPart::None => {}
        BandedPart::Stationary(sym) => {
            total += symbol_quad_form(sym, &topavg_sample(x));
        }
        BandedPart::Banded(bt) => {
            total += bt.apply(x)?.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total)
}

fn cv_quad(
    model: &SepPlusBandedCov,
    x: ArrayView2<'_, f64>,
    cached_symbol: Option<&StationarySymbol>,
) -> Result<f64> {
    let sep = apply_separable(model.a1(), model.a2(), x)?;
    let mut q: f64 = sep.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    match model.banded() {
        BandedPart::None => {}
        BandedPart::Stationary(sym) => {
            let fresh;
            let sample_symbol = match cached_symbol {
                Some(s) => s,
                None => {
                    fresh = topavg_sample(x);
                    &fresh
                }
            };
            q += symbol_quad_form(sym, sample_symbol);
        }
        BandedPart::Banded(bt) => {
            q += bt.apply(x)?.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(q)
}

/// Cross-validated bandwidth search configuration.
#[derive(Debug, Clone)]
pub struct BandwidthSearch {
    /// Candidate bandwidths (sorted and deduplicated before the run).
    pub candidates: Vec<usize>,
    /// Number of folds; contiguous blocks of a seeded shuffle.
    pub folds: usize,
    /// Complexity penalty: the score minimized is `Xi(d) + tau * d`.
    pub tau: f64,
    /// Seed of the fold shuffle.
    pub seed: u64,
    /// Banded component the inner estimators fit.
    pub kind: BandedKind,
    /// Center the stack (once, globally) before the search.
    pub center: bool,
}

impl Default for BandwidthSearch {
    fn default() -> Self {
        BandwidthSearch {
            candidates: Vec::new(),
            folds: 10,
            tau: 0.0,
            seed: 0,
            kind: BandedKind::Stationary,
            center: true,
        }
    }
}

impl BandwidthSearch {
    pub fn over(candidates: Vec<usize>) -> Self {
        BandwidthSearch {
            candidates,
            ..BandwidthSearch::default()
        }
    }
}

/// Score of one candidate. `xi` is `None` when the candidate was invalid
/// (some fold hit a degenerate shifted trace), with the reason in `message`.
#[derive(Debug, Clone)]
pub struct CvEntry {
    pub d: usize,
    pub xi: Option<f64>,
    pub penalized: Option<f64>,
    pub message: Option<String>,
}

/// Outcome of [`select_bandwidth`].
#[derive(Debug, Clone)]
pub struct BandwidthSelection {
    pub d_hat: usize,
    pub entries: Vec<CvEntry>,
}

fn fold_assignments(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    (0..folds)
        .map(|f| idx[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect()
}

fn sub_stack(stack: &SampleStack, keep: &[usize]) -> SampleStack {
    let mut data = Array3::zeros((keep.len(), stack.k1(), stack.k2()));
    for (row, &i) in keep.iter().enumerate() {
        data.index_axis_mut(Axis(0), row).assign(&stack.sample(i));
    }
    SampleStack::new(data).expect("subset of a valid stack")
}

/// `Xi(d)` from cached statistics (kinds none / stationary).
fn xi_cached(
    stack: &SampleStack,
    d: usize,
    kind: BandedKind,
    assignments: &[Vec<usize>],
    symbols: Option<&SymbolStats>,
) -> Result<f64> {
    let n = stack.n();
    let traces = TraceStats::compute(stack, d)?;
    let full = estimate_from_stats(
        &traces,
        symbols,
        stack,
        &SubsetWeights::all(n),
        kind,
        false,
        false,
    )?;
    let norm2 = crate::estimators::model_fro_norm2(&full)?;
    let mut quad_sum = 0.0;
    for fold in assignments {
        if fold.is_empty() {
            continue;
        }
        if fold.len() == n {
            return Err(SptError::InvalidConfig(
                "a fold covers the whole stack; nothing left to estimate from".into(),
            ));
        }
        let weights = SubsetWeights::complement_of(n, fold);
        let model = estimate_from_stats(&traces, symbols, stack, &weights, kind, false, false)?;
        for &i in fold {
            quad_sum += cv_quad(&model, stack.sample(i), symbols.map(|s| &s.symbols[i]))?;
        }
    }
    Ok(norm2 - 2.0 / n as f64 * quad_sum)
}

/// `Xi(d)` for the dense banded kind (materializes fold complements).
fn xi_banded(stack: &SampleStack, d: usize, assignments: &[Vec<usize>]) -> Result<f64> {
    let n = stack.n();
    let kind = if d == 0 {
        BandedKind::None
    } else {
        BandedKind::Banded
    };
    let opts = EstimateOptions {
        center: false,
        psd: false,
    };
    let full = estimate_full(stack, d, kind, &opts)?;
    let norm2 = crate::estimators::model_fro_norm2(&full)?;
    let mut quad_sum = 0.0;
    for fold in assignments {
        if fold.is_empty() {
            continue;
        }
        if fold.len() == n {
            return Err(SptError::InvalidConfig(
                "a fold covers the whole stack; nothing left to estimate from".into(),
            ));
        }
        let keep: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
        let model = estimate_full(&sub_stack(stack, &keep), d, kind, &opts)?;
        for &i in fold {
            quad_sum += cv_quad(&model, stack.sample(i), None)?;
        }
    }
    Ok(norm2 - 2.0 / n as f64 * quad_sum)
}

fn run_candidate(
    stack: &SampleStack,
    d: usize,
    kind: BandedKind,
    assignments: &[Vec<usize>],
    symbols: Option<&SymbolStats>,
) -> Result<f64> {
    match kind {
        BandedKind::Banded => xi_banded(stack, d, assignments),
        _ => xi_cached(stack, d, kind, assignments, symbols),
    }
}

fn prepare<'a>(
    samples: &'a SampleStack,
    center: bool,
    storage: &'a mut Option<SampleStack>,
) -> &'a SampleStack {
    if center && !samples.is_centered() {
        storage.get_or_insert_with(|| samples.center())
    } else {
        samples
    }
}

/// Cross-validation score `Xi(d)` of a single bandwidth with default
/// settings (stationary inner estimators, global centering, seed 0).
pub fn cv_objective(samples: &SampleStack, d: usize, folds: usize) -> Result<f64> {
    let search = BandwidthSearch {
        candidates: vec![d],
        folds,
        ..BandwidthSearch::default()
    };
    let selection = select_bandwidth(samples, &search)?;
    match &selection.entries[0] {
        CvEntry { xi: Some(v), .. } => Ok(*v),
        CvEntry { message, .. } => Err(SptError::InvalidConfig(
            message.clone().unwrap_or_else(|| "invalid candidate".into()),
        )),
    }
}

/// Selects a bandwidth by `argmin_d Xi(d) + tau * d` over the candidates,
/// smaller `d` winning ties. Candidates whose trace degenerates in any fold
/// are excluded (and reported); if none survive, an error is returned.
pub fn select_bandwidth(
    samples: &SampleStack,
    search: &BandwidthSearch,
) -> Result<BandwidthSelection> {
    if search.candidates.is_empty() {
        return Err(SptError::InvalidConfig(
            "bandwidth search needs at least one candidate".into(),
        ));
    }
    let n = samples.n();
    if search.folds < 2 || search.folds > n {
        return Err(SptError::InvalidConfig(format!(
            "folds must lie in [2, {n}], got {}",
            search.folds
        )));
    }
    if !search.tau.is_finite() || search.tau < 0.0 {
        return Err(SptError::InvalidConfig(format!(
            "penalty tau must be finite and nonnegative, got {}",
            search.tau
        )));
    }
    let mut candidates = search.candidates.clone();
    candidates.sort_unstable();
    candidates.dedup();
    for &d in &candidates {
        Bandwidth(d).validate(samples.k1(), samples.k2())?;
    }
    let mut storage = None;
    let stack = prepare(samples, search.center, &mut storage);
    let assignments = fold_assignments(n, search.folds, search.seed);
    let symbols = matches!(search.kind, BandedKind::Stationary).then(|| SymbolStats::compute(stack));

    let mut entries = Vec::with_capacity(candidates.len());
    for &d in &candidates {
        match run_candidate(stack, d, search.kind, &assignments, symbols.as_ref()) {
            Ok(xi) => entries.push(CvEntry {
                d,
                xi: Some(xi),
                penalized: Some(xi + search.tau * d as f64),
                message: None,
            }),
            Err(e @ SptError::DegenerateTrace { .. }) => entries.push(CvEntry {
                d,
                xi: None,
                penalized: None,
                message: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for entry in &entries {
        if let Some(p) = entry.penalized {
            if best.map_or(true, |(_, b)| p < b) {
                best = Some((entry.d, p));
            }
        }
    }
    let Some((d_hat, _)) = best else {
        return Err(SptError::InvalidConfig(
            "every candidate bandwidth was degenerate under cross-validation".into(),
        ));
    };
    Ok(BandwidthSelection { d_hat, entries })
}
