//! Acceptance gate: eleven behavioral criteria covering oracle agreement,
//! annihilation and estimating-equation identities, statistical orderings,
//! solver health, and complexity guards. Each test ends in a single
//! `criterion NN pass - ...` line (visible under `--nocapture`); a failing
//! assertion carries the matching `criterion NN fail - ...` message.
//!
//! The criteria measure wall time and the process-wide allocation high-water
//! mark, so a gate mutex serializes them: concurrent tests would contaminate
//! both measurements. Every randomized check runs from a fixed seed and is
//! exactly reproducible.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sptcov::bandwidth::{select_bandwidth, structured_fro_norm2, BandwidthSearch, NormTerm};
use sptcov::estimators::{
    baseline_pt, estimate_full, estimate_separable, estimate_separable_tensor,
    psd_project_matrix, rel_error, BandedKind, BandedPart, BandedTensor, EstimateOptions,
    SepPlusBandedCov,
};
use sptcov::gof::{gof_statistic, gof_test, GofConfig};
use sptcov::model::{
    empirical_cov, separable_tensor, spt1_stack, spt1_tensor, spt2_stack, spt2_tensor,
    strace_stack, strace_tensor, symmetrize, Bandwidth, CovTensor4, SampleStack, SymMatrix,
};
use sptcov::simgen::{
    error_experiment, simulate, truth_model, ExperimentAxis, ExperimentConfig, FilterKind,
    Method, SepKind, SimConfig,
};
use sptcov::solver::{
    adi_solve, apply_model, apply_separable, stein_solve, sym_eigen, AdiConfig,
};
use sptcov::stationary::{
    apply_stationary, circulant_spectrum, psd_project_symbol, topavg_sample, topavg_separable,
    topavg_tensor, StationarySymbol,
};

// ---------------------------------------------------------------------------
// Instrumented allocator and test gate
// ---------------------------------------------------------------------------

/// System-allocator wrapper counting live heap bytes and their high-water
/// mark. The complexity guard reads the peak around a single estimation call;
/// a dense fourth-order tensor at that size would overshoot the budget by an
/// order of magnitude, while the structured paths stay far below it.
struct PeakAlloc {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl PeakAlloc {
    fn grow(&self, bytes: usize) {
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
    }

    fn shrink(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// Restarts the high-water mark at the current live figure and returns
    /// that figure. Only meaningful while no other thread allocates.
    fn rebase(&self) -> usize {
        let live = self.live.load(Ordering::Relaxed);
        self.peak.store(live, Ordering::Relaxed);
        live
    }

    fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            self.grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            self.grow(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                self.grow(new_size - layout.size());
            } else {
                self.shrink(layout.size() - new_size);
            }
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        self.shrink(layout.size());
    }
}

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc {
    live: AtomicUsize::new(0),
    peak: AtomicUsize::new(0),
};

/// Serializes the criteria; wall-clock budgets and the allocation high-water
/// mark are process-global measurements.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

const ORACLE_TOL: f64 = 1e-10;

fn fro(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normal_array2<R: Rng>(rng: &mut R, k1: usize, k2: usize) -> Array2<f64> {
    Array2::from_shape_fn((k1, k2), |_| rng.sample::<f64, _>(StandardNormal))
}

fn random_stack<R: Rng>(rng: &mut R, n: usize, k1: usize, k2: usize) -> SampleStack {
    let data = Array3::from_shape_fn((n, k1, k2), |_| rng.sample::<f64, _>(StandardNormal));
    SampleStack::new(data).expect("finite stack")
}

fn random_sym<R: Rng>(rng: &mut R, k: usize) -> SymMatrix {
    let g = normal_array2(rng, k, k);
    symmetrize(g.view()).expect("square input")
}

/// Well-conditioned SPD matrix `G'G / k + I/2` (spectrum roughly `[0.5, 5]`).
fn random_spd<R: Rng>(rng: &mut R, k: usize) -> SymMatrix {
    let g = normal_array2(rng, k, k);
    let mut a = g.t().dot(&g) / k as f64;
    for i in 0..k {
        a[[i, i]] += 0.5;
    }
    symmetrize(a.view()).expect("symmetric by construction")
}

/// Random centrally symmetric symbol (full support, band marker unset).
fn random_symbol<R: Rng>(rng: &mut R, k1: usize, k2: usize) -> StationarySymbol {
    let (rows, cols) = (2 * k1 - 1, 2 * k2 - 1);
    let mut s = normal_array2(rng, rows, cols);
    for a in 0..rows {
        for b in 0..cols {
            let (am, bm) = (rows - 1 - a, cols - 1 - b);
            if (a, b) < (am, bm) {
                s[[am, bm]] = s[[a, b]];
            }
        }
    }
    StationarySymbol::new(k1, k2, s, None).expect("centrally symmetric")
}

/// Random pair-symmetric dense tensor supported on the band `dstar`
/// (both coordinate lags strictly below `dstar` in absolute value).
fn random_banded_dense<R: Rng>(rng: &mut R, k1: usize, k2: usize, dstar: usize) -> CovTensor4 {
    let w = dstar as isize - 1;
    let mut t = Array4::zeros((k1, k2, k1, k2));
    for i in 0..k1 {
        for j in 0..k2 {
            for k in 0..k1 {
                for l in 0..k2 {
                    if (i, j) > (k, l) {
                        continue;
                    }
                    let in_band = (i as isize - k as isize).abs() <= w
                        && (j as isize - l as isize).abs() <= w;
                    if in_band {
                        let v: f64 = rng.sample(StandardNormal);
                        t[[i, j, k, l]] = v;
                        t[[k, l, i, j]] = v;
                    }
                }
            }
        }
    }
    CovTensor4::new(t).expect("within the oracle cap")
}

/// Lag-slice view of a banded dense tensor as a [`BandedTensor`].
fn banded_tensor_from_dense(t: &CovTensor4, d: usize) -> BandedTensor {
    let (k1, k2) = (t.k1(), t.k2());
    let w = d as isize - 1;
    let width = 2 * d - 1;
    let mut b = Array4::zeros((k1, k2, width, width));
    for i in 0..k1 as isize {
        for j in 0..k2 as isize {
            for p in (-w).max(-i)..=w.min(k1 as isize - 1 - i) {
                for q in (-w).max(-j)..=w.min(k2 as isize - 1 - j) {
                    b[[
                        i as usize,
                        j as usize,
                        (p + w) as usize,
                        (q + w) as usize,
                    ]] = t.at(i as usize, j as usize, (i + p) as usize, (j + q) as usize);
                }
            }
        }
    }
    BandedTensor::new(k1, k2, d, b).expect("pair-symmetric extraction")
}

fn kms(k: usize, rho: f64) -> SymMatrix {
    let a = Array2::from_shape_fn((k, k), |(i, j)| rho.powi((i as i32 - j as i32).abs()));
    symmetrize(a.view()).expect("symmetric by construction")
}

/// Deterministic unit-norm probe surface for manufactured-solution tests.
fn probe_surface(k1: usize, k2: usize) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((k1, k2), |(i, j)| {
        (1.0 + (i as f64) * 0.7).sin() * (1.0 + (j as f64) * 1.3).cos()
    });
    let norm = fro(&x);
    x.mapv_inplace(|v| v / norm);
    x
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn separable_model(a1: SymMatrix, a2: SymMatrix, d: usize) -> SepPlusBandedCov {
    SepPlusBandedCov::new(a1, a2, BandedPart::None, Bandwidth(d)).expect("valid model")
}

/// `<u, T u>` for a surface `u`, the dense counterpart of every projected
/// quadratic used by the fast paths.
fn tensor_quad(t: &CovTensor4, u: &Array2<f64>) -> f64 {
    t.apply(u.view())
        .expect("matching shape")
        .iter()
        .zip(u.iter())
        .map(|(a, b)| a * b)
        .sum()
}

fn banded_part_dense(model: &SepPlusBandedCov) -> CovTensor4 {
    match model.banded() {
        BandedPart::None => CovTensor4::zeros(model.k1(), model.k2()).expect("small grid"),
        BandedPart::Stationary(sym) => sym.to_dense().expect("small grid"),
        BandedPart::Banded(bt) => bt.to_dense().expect("small grid"),
    }
}

/// Asserts `|fast - dense|_F <= tol * max(|dense|_F, scale)` where `scale`
/// anchors the comparison to the natural magnitude of the instance, keeping
/// the bound relative without dividing by a quantity that can vanish.
fn assert_close2(criterion: &str, path: &str, instance: usize, fast: &Array2<f64>, dense: &Array2<f64>, scale: f64) {
    let diff = fro(&(fast - dense));
    let denom = fro(dense).max(scale);
    assert!(
        diff <= ORACLE_TOL * denom,
        "{criterion} fail - {path} diverges from its dense oracle on instance {instance}: \
         |diff| = {diff:.3e} against scale {denom:.3e}"
    );
}

fn assert_close_scalar(criterion: &str, path: &str, instance: usize, fast: f64, dense: f64, scale: f64) {
    let diff = (fast - dense).abs();
    let denom = dense.abs().max(scale);
    assert!(
        diff <= ORACLE_TOL * denom,
        "{criterion} fail - {path} diverges from its dense oracle on instance {instance}: \
         {fast:.12e} vs {dense:.12e}"
    );
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_oracle_equivalence() {
    let _gate = gate();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    for instance in 0..100 {
        let k1 = rng.gen_range(2..=8usize);
        let k2 = rng.gen_range(2..=8usize);
        let n = rng.gen_range(4..=12usize);
        let kmin = k1.min(k2);
        let stack = random_stack(&mut rng, n, k1, k2);
        let t = empirical_cov(&stack, false).unwrap();
        let energy = strace_tensor(&t, 0).unwrap().abs();
        let d = rng.gen_range(0..kmin);

        // Shifted partial traces and the shifted trace, stack vs dense.
        assert_close2(
            "criterion 01",
            "spt1_stack",
            instance,
            &spt1_stack(&stack, d).unwrap(),
            &spt1_tensor(&t, d).unwrap(),
            energy,
        );
        assert_close2(
            "criterion 01",
            "spt2_stack",
            instance,
            &spt2_stack(&stack, d).unwrap(),
            &spt2_tensor(&t, d).unwrap(),
            energy,
        );
        assert_close_scalar(
            "criterion 01",
            "strace_stack",
            instance,
            strace_stack(&stack, d).unwrap(),
            strace_tensor(&t, d).unwrap(),
            energy,
        );

        // Toeplitz averaging of one surface: FFT autocorrelation vs the
        // dense average over constant-lag entries of the rank-one tensor.
        let x = normal_array2(&mut rng, k1, k2);
        let one = SampleStack::new(x.clone().insert_axis(Axis(0))).unwrap();
        let sym_fast = topavg_sample(x.view());
        let sym_dense = topavg_tensor(&empirical_cov(&one, false).unwrap());
        assert_close2(
            "criterion 01",
            "topavg_sample",
            instance,
            sym_fast.lags(),
            sym_dense.lags(),
            fro(&x).powi(2) / (k1 * k2) as f64,
        );

        // Separable symbol through shifted traces vs Toeplitz averaging of
        // the assembled separable tensor.
        let a1r = random_sym(&mut rng, k1);
        let a2r = random_sym(&mut rng, k2);
        let sep = separable_tensor(&a1r, &a2r).unwrap();
        assert_close2(
            "criterion 01",
            "topavg_separable",
            instance,
            topavg_separable(&a1r, &a2r).lags(),
            topavg_tensor(&sep).lags(),
            sep.fro_norm2().sqrt() / (k1 * k2) as f64,
        );

        // Structured squared norm of a mixed three-term combination vs the
        // densely assembled tensor.
        let symr = random_symbol(&mut rng, k1, k2);
        let dband = rng.gen_range(1..=kmin);
        let btr = banded_tensor_from_dense(&random_banded_dense(&mut rng, k1, k2, dband), dband);
        let (c1, c2, c3) = (
            rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
            rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
            rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
        );
        let fast_norm2 = structured_fro_norm2(&[
            NormTerm::Separable(&a1r, &a2r, c1),
            NormTerm::Symbol(&symr, c2),
            NormTerm::Banded(&btr, c3),
        ])
        .unwrap();
        let mut dense_sum = CovTensor4::zeros(k1, k2).unwrap();
        dense_sum.add_scaled(&sep, c1).unwrap();
        dense_sum.add_scaled(&symr.to_dense().unwrap(), c2).unwrap();
        dense_sum.add_scaled(&btr.to_dense().unwrap(), c3).unwrap();
        let term_scale = (c1.abs() * sep.fro_norm2().sqrt()
            + c2.abs() * symr.to_dense().unwrap().fro_norm2().sqrt()
            + c3.abs() * btr.fro_norm2().sqrt())
        .powi(2);
        assert_close_scalar(
            "criterion 01",
            "structured_fro_norm2",
            instance,
            fast_norm2,
            dense_sum.fro_norm2(),
            term_scale,
        );

        // Fast operator applications vs dense tensor contraction.
        let probe = normal_array2(&mut rng, k1, k2);
        assert_close2(
            "criterion 01",
            "apply_separable",
            instance,
            &apply_separable(&a1r, &a2r, probe.view()).unwrap(),
            &sep.apply(probe.view()).unwrap(),
            f64::MIN_POSITIVE,
        );
        assert_close2(
            "criterion 01",
            "apply_stationary",
            instance,
            &apply_stationary(&symr, probe.view()).unwrap(),
            &symr.to_dense().unwrap().apply(probe.view()).unwrap(),
            f64::MIN_POSITIVE,
        );

        // Full estimation pipeline on centered data vs the population
        // pipeline on the centered empirical tensor.
        let d_fit = rng.gen_range(1..kmin);
        let cstack = stack.center();
        let t_c = empirical_cov(&stack, true).unwrap();
        let energy_c = strace_tensor(&t_c, 0).unwrap().abs();
        let raw = EstimateOptions::raw();
        let fit = estimate_full(&cstack, d_fit, BandedKind::Stationary, &raw).unwrap();
        let (b1, b2) = estimate_separable_tensor(&t_c, d_fit).unwrap();
        assert_close2(
            "criterion 01",
            "estimate_full factor a1",
            instance,
            fit.a1().as_array(),
            b1.as_array(),
            energy_c,
        );
        let a2_scale = energy_c / strace_tensor(&t_c, d_fit).unwrap().abs().max(f64::MIN_POSITIVE);
        assert_close2(
            "criterion 01",
            "estimate_full factor a2",
            instance,
            fit.a2().as_array(),
            b2.as_array(),
            a2_scale,
        );
        let emp_lags = topavg_tensor(&t_c);
        let sep_lags = topavg_tensor(&separable_tensor(fit.a1(), fit.a2()).unwrap());
        let resid = StationarySymbol::new(
            k1,
            k2,
            emp_lags.lags() - sep_lags.lags(),
            None,
        )
        .unwrap()
        .band_clip(d_fit)
        .unwrap();
        let fit_sym = match fit.banded() {
            BandedPart::Stationary(sym) => sym,
            other => panic!("criterion 01 fail - stationary fit returned {other:?}"),
        };
        assert_close2(
            "criterion 01",
            "estimate_full stationary residual",
            instance,
            fit_sym.lags(),
            resid.lags(),
            energy_c / (k1 * k2) as f64,
        );

        // Banded-slice residual estimator vs dense lag extraction around the
        // same factor pair.
        let fit_b = estimate_full(&cstack, d_fit, BandedKind::Banded, &raw).unwrap();
        let bt_fit = match fit_b.banded() {
            BandedPart::Banded(bt) => bt,
            other => panic!("criterion 01 fail - banded fit returned {other:?}"),
        };
        let mut dense_resid = t_c.clone();
        dense_resid
            .add_scaled(&separable_tensor(fit_b.a1(), fit_b.a2()).unwrap(), -1.0)
            .unwrap();
        let w = d_fit as isize - 1;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..k1 as isize {
            for j in 0..k2 as isize {
                for p in (-w).max(-i)..=w.min(k1 as isize - 1 - i) {
                    for q in (-w).max(-j)..=w.min(k2 as isize - 1 - j) {
                        let want = dense_resid.at(
                            i as usize,
                            j as usize,
                            (i + p) as usize,
                            (j + q) as usize,
                        );
                        let got = bt_fit.lag(i as usize, j as usize, p, q);
                        diff2 += (got - want) * (got - want);
                        norm2 += want * want;
                    }
                }
            }
        }
        assert!(
            diff2.sqrt() <= ORACLE_TOL * norm2.sqrt().max(energy_c),
            "criterion 01 fail - estimate_full banded residual diverges on instance {instance}: \
             |diff| = {:.3e}",
            diff2.sqrt()
        );

        // Projected goodness-of-fit statistic vs dense quadratic forms over
        // the same eigenpair grid.
        let cfg = GofConfig {
            d: d_fit,
            i_dims: 2,
            j_dims: 2,
            n_boot: 8,
            seed: 0,
            refit_subspace: false,
        };
        let stat_fast = gof_statistic(&cstack, &fit, &cfg).unwrap();
        let e = sym_eigen(fit.a1()).unwrap().u;
        let f = sym_eigen(fit.a2()).unwrap().u;
        let sep_fit = separable_tensor(fit.a1(), fit.a2()).unwrap();
        let banded_fit = banded_part_dense(&fit);
        let mut stat_dense = 0.0;
        for i in 0..cfg.i_dims {
            for j in 0..cfg.j_dims {
                let u = Array2::from_shape_fn((k1, k2), |(a, b)| e[[a, i]] * f[[b, j]]);
                let cell = tensor_quad(&t_c, &u)
                    - tensor_quad(&sep_fit, &u)
                    - tensor_quad(&banded_fit, &u);
                stat_dense += cell * cell;
            }
        }
        assert_close_scalar(
            "criterion 01",
            "gof_statistic",
            instance,
            stat_fast,
            stat_dense,
            t_c.fro_norm2(),
        );
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "criterion 01 fail - oracle suite took {elapsed:.1?} (budget 30 s)"
    );
    println!(
        "criterion 01 pass - 100 random instances: every fast path matches its dense oracle \
         to rel 1e-10 ({elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// 2. Annihilation of banded tensors
// ---------------------------------------------------------------------------

/// Property: shifted partial traces (and the shifted trace) of any tensor
/// whose band is `dstar` are exact zeros at every shift `d >= dstar`; the
/// shift skips over the whole support, so no rounding is involved.
#[test]
fn criterion_02_annihilation_of_banded_tensors() {
    let _gate = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checked = 0usize;

    for _ in 0..40 {
        let k1 = rng.gen_range(2..=7usize);
        let k2 = rng.gen_range(2..=7usize);
        let kmin = k1.min(k2);
        let dstar = rng.gen_range(1..kmin);

        let dense = random_banded_dense(&mut rng, k1, k2, dstar);
        let from_symbol = random_symbol(&mut rng, k1, k2)
            .band_clip(dstar)
            .unwrap()
            .to_dense()
            .unwrap();
        let from_slices = banded_tensor_from_dense(&dense, dstar).to_dense().unwrap();

        for (family, t) in [
            ("dense banded", &dense),
            ("stationary banded", &from_symbol),
            ("lag-slice banded", &from_slices),
        ] {
            for d in dstar..kmin {
                let z1 = spt1_tensor(t, d).unwrap();
                assert!(
                    z1.iter().all(|&v| v == 0.0),
                    "criterion 02 fail - spt1 at shift {d} leaves residue on a {family} tensor \
                     with band {dstar} ({k1} x {k2})"
                );
                let z2 = spt2_tensor(t, d).unwrap();
                assert!(
                    z2.iter().all(|&v| v == 0.0),
                    "criterion 02 fail - spt2 at shift {d} leaves residue on a {family} tensor \
                     with band {dstar} ({k1} x {k2})"
                );
                let z = strace_tensor(t, d).unwrap();
                assert!(
                    z == 0.0,
                    "criterion 02 fail - strace at shift {d} is {z:e} on a {family} tensor \
                     with band {dstar} ({k1} x {k2})"
                );
                checked += 1;
            }
        }
    }

    assert!(checked >= 40, "criterion 02 fail - too few (tensor, shift) pairs exercised");
    println!(
        "criterion 02 pass - {checked} (banded tensor, shift) pairs annihilated to exact zeros"
    );
}

// ---------------------------------------------------------------------------
// 3. Population estimating equation
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_population_estimating_equation() {
    let _gate = gate();
    let k = 8;
    let dstar = 3;
    let a1 = kms(k, 0.6);
    let a2 = kms(k, 0.35).scale(1.7);

    // Banded contamination with energy on every in-band diagonal lag, so
    // shifts below the band are visibly poisoned while shifts at or above
    // it are exactly blind to B.
    let mut s = Array2::zeros((2 * k - 1, 2 * k - 1));
    let put = |s: &mut Array2<f64>, h: isize, l: isize, v: f64| {
        s[[(h + 7) as usize, (l + 7) as usize]] = v;
        s[[(7 - h) as usize, (7 - l) as usize]] = v;
    };
    put(&mut s, 0, 0, 1.0);
    put(&mut s, 1, 0, 0.45);
    put(&mut s, 0, 1, 0.3);
    put(&mut s, 1, 1, 0.25);
    put(&mut s, 2, 2, 0.2);
    put(&mut s, 2, 0, 0.15);
    put(&mut s, 1, 2, 0.1);
    put(&mut s, 2, 1, -0.12);
    put(&mut s, 1, -1, 0.18);
    put(&mut s, 2, -2, -0.08);
    let b = StationarySymbol::new(k, k, s, Some(dstar)).unwrap();

    let s_truth = separable_tensor(&a1, &a2).unwrap();
    let mut t = s_truth.clone();
    t.add_scaled(&b.to_dense().unwrap(), 1.0).unwrap();

    let recovery = |d: usize| -> f64 {
        let (e1, e2) = estimate_separable_tensor(&t, d).unwrap();
        let mut diff = separable_tensor(&e1, &e2).unwrap();
        diff.add_scaled(&s_truth, -1.0).unwrap();
        (diff.fro_norm2() / s_truth.fro_norm2()).sqrt()
    };

    for d in dstar..k {
        let rel = recovery(d);
        assert!(
            rel <= 1e-10,
            "criterion 03 fail - population pipeline at shift {d} misses the separable part: \
             rel = {rel:.3e}"
        );
    }
    // Below the band the same pipeline must feel the contamination;
    // otherwise the recovery assertions above would be vacuous.
    let poisoned = recovery(1);
    assert!(
        poisoned > 1e-6,
        "criterion 03 fail - sub-band shift 1 recovered the separable part ({poisoned:.3e}); \
         the contamination term is too weak for this test to mean anything"
    );

    println!(
        "criterion 03 pass - exact separable recovery for every shift in {dstar}..={}, \
         sub-band shift visibly poisoned ({poisoned:.2e})",
        k - 1
    );
}

// ---------------------------------------------------------------------------
// 4. Simulation error ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_simulation_error_ordering() {
    let _gate = gate();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        base: SimConfig {
            k: 50,
            n: 300,
            tau: 3.0,
            d_true: 9,
            sep_kind: SepKind::Legendre,
            filter_kind: FilterKind::Signed,
            noise_sigma2: 0.0,
            seed: 404,
        },
        axis: ExperimentAxis::Bandwidth(vec![9]),
        methods: vec![Method::SptD, Method::SptCv, Method::Pt, Method::Ece],
        reps: 20,
    };
    let result = error_experiment(&cfg).unwrap();
    let med = |m: Method| -> f64 {
        result
            .cells
            .iter()
            .find(|c| c.method == m)
            .expect("method cell present")
            .median_rel_error
    };
    let (spt, cv, pt, ece) = (med(Method::SptD), med(Method::SptCv), med(Method::Pt), med(Method::Ece));

    assert!(
        spt < pt,
        "criterion 04 fail - spt-d median {spt:.4} is not below pt median {pt:.4}"
    );
    assert!(
        spt < ece,
        "criterion 04 fail - spt-d median {spt:.4} is not below ece median {ece:.4}"
    );
    assert!(
        cv <= 1.2 * spt,
        "criterion 04 fail - spt-cv median {cv:.4} exceeds 1.2 x spt-d median {spt:.4}"
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(600),
        "criterion 04 fail - experiment took {elapsed:.1?} (budget 10 min)"
    );
    println!(
        "criterion 04 pass - medians over 20 reps: spt-d {spt:.4} < pt {pt:.4}, \
         spt-d < ece {ece:.4}, spt-cv {cv:.4} within 1.2x ({elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// 5. Denoising
// ---------------------------------------------------------------------------

/// Separable truth plus unit-variance white noise. The noise covariance is
/// 1-banded, so the shift-1 estimator is population-blind to it while plain
/// partial tracing absorbs the full noise diagonal; the shift-1 error must
/// shrink with the sample size while the plain-traced error stalls on its
/// bias floor.
#[test]
fn criterion_05_denoising_under_white_noise() {
    let _gate = gate();
    let k = 40;
    let reps = 11;
    let sizes = [100usize, 400, 1600];
    let mut base = SimConfig {
        k,
        n: sizes[0],
        tau: 40.0,
        d_true: 0,
        sep_kind: SepKind::Legendre,
        filter_kind: FilterKind::Signed,
        noise_sigma2: 0.0,
        seed: 0,
    };
    let truth = truth_model(&base).unwrap();
    let opts = EstimateOptions::default();

    let mut spt_medians = Vec::new();
    let mut pt_medians = Vec::new();
    for (ni, &n) in sizes.iter().enumerate() {
        let mut spt_errors = Vec::with_capacity(reps);
        let mut pt_errors = Vec::with_capacity(reps);
        for rep in 0..reps {
            base.n = n;
            base.seed = 500_000 + 1_000 * ni as u64 + rep as u64;
            let (clean, _) = simulate(&base).unwrap();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(base.seed ^ 0x9e37_79b9);
            let mut data = clean.data().to_owned();
            for v in data.iter_mut() {
                *v += noise_rng.sample::<f64, _>(StandardNormal);
            }
            let stack = SampleStack::new(data).unwrap();

            let (a1, a2) = estimate_separable(&stack, 1, &opts).unwrap();
            spt_errors.push(rel_error(&separable_model(a1, a2, 1), &truth).unwrap());
            let (p1, p2) = baseline_pt(&stack, &opts).unwrap();
            pt_errors.push(rel_error(&separable_model(p1, p2, 0), &truth).unwrap());
        }
        spt_medians.push(median(&spt_errors));
        pt_medians.push(median(&pt_errors));
    }

    assert!(
        spt_medians[0] > spt_medians[1] && spt_medians[1] > spt_medians[2],
        "criterion 05 fail - shift-1 medians not monotone over N: {spt_medians:.4?}"
    );
    assert!(
        spt_medians[2] < 0.1,
        "criterion 05 fail - shift-1 median at N = 1600 is {:.4} (needs < 0.1)",
        spt_medians[2]
    );
    assert!(
        pt_medians[2] > spt_medians[2],
        "criterion 05 fail - plain tracing median {:.4} is not above shift-1 median {:.4} at N = 1600",
        pt_medians[2],
        spt_medians[2]
    );
    println!(
        "criterion 05 pass - shift-1 medians {:.4} > {:.4} > {:.4} (< 0.1), \
         pt floor {:.4} above shift-1 at N = 1600",
        spt_medians[0], spt_medians[1], spt_medians[2], pt_medians[2]
    );
}

// ---------------------------------------------------------------------------
// 6. ADI solver on manufactured solutions
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_adi_manufactured_solutions() {
    let _gate = gate();
    let start = Instant::now();
    let config = AdiConfig::default();
    let mut outers = Vec::new();
    let mut pcgs = Vec::new();
    let mut rec_at_60 = f64::NAN;

    for k in [20usize, 40, 60, 80] {
        let d = k / 10 + 1;
        let cfg = SimConfig {
            k,
            n: 300,
            tau: 3.0,
            d_true: d,
            sep_kind: SepKind::Legendre,
            filter_kind: FilterKind::Signed,
            noise_sigma2: 0.5,
            seed: 42,
        };
        let (stack, _) = simulate(&cfg).unwrap();
        let fit = estimate_full(&stack, d, BandedKind::Stationary, &EstimateOptions::default())
            .unwrap();
        let x = probe_surface(k, k);
        let mut y = apply_model(&fit, x.view()).unwrap();
        y.scaled_add(config.ridge, &x);

        let sol = adi_solve(&fit, y.view(), &config).unwrap();
        assert!(
            sol.converged,
            "criterion 06 fail - adi did not converge at K = {k} ({} sweeps)",
            sol.outer_iters
        );
        let rec = fro(&(&sol.x - &x)) / fro(&x);
        assert!(
            rec <= 1e-6,
            "criterion 06 fail - reconstruction error {rec:.3e} at K = {k} (needs <= 1e-6)"
        );
        if k == 60 {
            rec_at_60 = rec;
        }
        outers.push(sol.outer_iters as f64);
        pcgs.push(sol.pcg_total() as f64);
    }

    let spread = |v: &[f64]| -> f64 {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    };
    let outer_spread = spread(&outers);
    let pcg_spread = spread(&pcgs);
    assert!(
        outer_spread <= 2.0,
        "criterion 06 fail - outer sweep counts vary by {outer_spread:.2}x across K (needs <= 2x): {outers:?}"
    );
    assert!(
        pcg_spread <= 2.0,
        "criterion 06 fail - pcg iteration counts vary by {pcg_spread:.2}x across K (needs <= 2x): {pcgs:?}"
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(300),
        "criterion 06 fail - solver sweep took {elapsed:.1?} (budget 5 min)"
    );
    println!(
        "criterion 06 pass - reconstruction {rec_at_60:.2e} at K = 60; outer spread {outer_spread:.2}x, \
         pcg spread {pcg_spread:.2}x over K in {{20, 40, 60, 80}} ({elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// 7. Stein solve residuals
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_stein_solve_residuals() {
    let _gate = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;

    for instance in 0..100 {
        let k1 = rng.gen_range(2..=32usize);
        let k2 = rng.gen_range(2..=32usize);
        let a1 = random_spd(&mut rng, k1);
        let a2 = random_spd(&mut rng, k2);
        let r = normal_array2(&mut rng, k1, k2);
        let rho = if instance % 4 == 0 {
            0.0
        } else {
            10f64.powf(rng.gen_range(-4.0..1.0))
        };

        let x = stein_solve(&a1, &a2, r.view(), rho).unwrap();
        let mut resid = a1.as_array().dot(&x).dot(a2.as_array()) - &r;
        resid.scaled_add(rho, &x);
        let rel = fro(&resid) / fro(&r);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-10,
            "criterion 07 fail - stein residual {rel:.3e} on instance {instance} \
             ({k1} x {k2}, rho = {rho:.3e})"
        );
    }

    println!("criterion 07 pass - 100 SPD instances up to k = 32, worst residual {worst:.2e}");
}

// ---------------------------------------------------------------------------
// 8. Bandwidth selection
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_bandwidth_selection() {
    let _gate = gate();
    let start = Instant::now();
    let reps = 20;
    let opts = EstimateOptions::default();

    // Banded truth at band 5: the cross-validated fit must beat plain
    // partial tracing nearly always.
    let mut banded_cfg = SimConfig {
        k: 50,
        n: 300,
        tau: 3.0,
        d_true: 5,
        sep_kind: SepKind::Legendre,
        filter_kind: FilterKind::Signed,
        noise_sigma2: 0.0,
        seed: 0,
    };
    let banded_truth = truth_model(&banded_cfg).unwrap();
    let mut wins = 0;
    let mut d_hats = Vec::with_capacity(reps);
    for rep in 0..reps {
        banded_cfg.seed = 800 + rep as u64;
        let (stack, _) = simulate(&banded_cfg).unwrap();
        let mut search = BandwidthSearch::over((0..=12).collect());
        search.seed = banded_cfg.seed;
        let selection = select_bandwidth(&stack, &search).unwrap();
        d_hats.push(selection.d_hat);
        let kind = if selection.d_hat == 0 {
            BandedKind::None
        } else {
            BandedKind::Stationary
        };
        let fit = estimate_full(&stack, selection.d_hat, kind, &opts).unwrap();
        let spt_err = rel_error(&fit, &banded_truth).unwrap();
        let (p1, p2) = baseline_pt(&stack, &opts).unwrap();
        let pt_err = rel_error(&separable_model(p1, p2, 0), &banded_truth).unwrap();
        if spt_err <= pt_err {
            wins += 1;
        }
    }
    assert!(
        wins >= 18,
        "criterion 08 fail - cross-validated fit beat plain tracing in only {wins}/{reps} reps \
         (selected bandwidths {d_hats:?})"
    );

    // Separable truth: the selector should stay at the bottom of the grid.
    let mut sep_cfg = SimConfig {
        d_true: 0,
        ..banded_cfg
    };
    let mut small = 0;
    let mut sep_d_hats = Vec::with_capacity(reps);
    for rep in 0..reps {
        sep_cfg.seed = 8_800 + rep as u64;
        let (stack, _) = simulate(&sep_cfg).unwrap();
        let mut search = BandwidthSearch::over((0..=12).collect());
        search.seed = sep_cfg.seed;
        let selection = select_bandwidth(&stack, &search).unwrap();
        sep_d_hats.push(selection.d_hat);
        if selection.d_hat <= 1 {
            small += 1;
        }
    }
    assert!(
        small >= 16,
        "criterion 08 fail - separable truth selected d <= 1 in only {small}/{reps} reps \
         (selected bandwidths {sep_d_hats:?})"
    );

    let elapsed = start.elapsed();
    println!(
        "criterion 08 pass - banded truth: cv fit <= pt in {wins}/{reps} reps; \
         separable truth: d <= 1 in {small}/{reps} reps ({elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// 9. Goodness-of-fit level
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_gof_level_under_matched_truth() {
    let _gate = gate();
    let start = Instant::now();
    let reps = 100;
    let mut cfg = SimConfig {
        k: 30,
        n: 200,
        tau: 2.0,
        d_true: 3,
        sep_kind: SepKind::Legendre,
        filter_kind: FilterKind::Signed,
        noise_sigma2: 0.0,
        seed: 0,
    };
    let mut rejections = 0;
    for rep in 0..reps {
        cfg.seed = 900_000 + rep as u64;
        let (stack, _) = simulate(&cfg).unwrap();
        let gof = gof_test(
            &stack,
            &GofConfig {
                d: 3,
                i_dims: 2,
                j_dims: 2,
                n_boot: 200,
                seed: 77_000 + rep as u64,
                refit_subspace: false,
            },
        )
        .unwrap();
        if gof.p_value <= 0.05 {
            rejections += 1;
        }
    }

    let rate = rejections as f64 / reps as f64;
    assert!(
        (0.01..=0.15).contains(&rate),
        "criterion 09 fail - rejection rate {rate:.3} over {reps} reps lies outside [0.01, 0.15]"
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(1200),
        "criterion 09 fail - level study took {elapsed:.1?} (budget 20 min)"
    );
    println!(
        "criterion 09 pass - {rejections}/{reps} rejections at nominal 5% \
         (rate {rate:.3} in [0.01, 0.15], {elapsed:.1?})"
    );
}

// ---------------------------------------------------------------------------
// 10. Complexity guards
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_complexity_guards() {
    let _gate = gate();
    let opts = EstimateOptions::default();
    let make_stack = |k: usize| -> SampleStack {
        let cfg = SimConfig {
            k,
            n: 100,
            tau: 3.0,
            d_true: 11,
            sep_kind: SepKind::Legendre,
            filter_kind: FilterKind::Signed,
            noise_sigma2: 0.5,
            seed: 1_000 + k as u64,
        };
        simulate(&cfg).unwrap().0
    };
    let stack_50 = make_stack(50);
    let stack_100 = make_stack(100);

    // Warm the thread pool and FFT planners outside the measured windows.
    estimate_full(&stack_50, 6, BandedKind::Stationary, &opts).unwrap();

    // Peak-allocation guard: a dense tensor at K = 100 would weigh
    // 100^4 * 8 bytes = 800 MB; the structured pipeline has to stay within
    // 64 MB (the stack copy made for centering dominates that figure).
    let live_before = ALLOC.rebase();
    let fit = estimate_full(&stack_100, 6, BandedKind::Stationary, &opts).unwrap();
    let peak_delta = ALLOC.peak() - live_before;
    assert!(fit.a1().as_array()[[0, 0]].is_finite());
    drop(fit);
    let budget = 64usize << 20;
    assert!(
        peak_delta <= budget,
        "criterion 10 fail - estimation at K = 100 peaked {:.1} MB above baseline (budget 64 MB)",
        peak_delta as f64 / (1 << 20) as f64
    );
    assert!(
        peak_delta >= 1 << 20,
        "criterion 10 fail - peak measurement implausibly small ({peak_delta} bytes); \
         the allocator instrumentation is not seeing the workload"
    );

    // Timing guards. The O(N K^3) term of estimation is the separable
    // statistics engine (centering plus the shifted-partial-trace matrix
    // products and the factor eigenprojections), so that is where the
    // K-doubling band [4, 16] is asserted: about 8x for a cubic cost, with a
    // factor-two margin either way for small-size matmul efficiency and
    // scheduler noise. The full fit also runs the stationary-residual path,
    // which is deliberately cheaper than cubic (per-sample autocovariance by
    // FFT, O(N K^2 log K)), so the complete pipeline only has to stay under
    // the band's ceiling - doubling K must never cost more than 16x, the
    // signature of hidden dense-tensor work.
    let time_sep = |stack: &SampleStack| -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let t0 = Instant::now();
            let (a1, _) = estimate_separable(stack, 6, &opts).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            assert!(a1.as_array()[[0, 0]].is_finite());
            best = best.min(dt);
        }
        best
    };
    let time_fit = |stack: &SampleStack| -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let t0 = Instant::now();
            let fit = estimate_full(stack, 6, BandedKind::Stationary, &opts).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            assert!(fit.a1().as_array()[[0, 0]].is_finite());
            best = best.min(dt);
        }
        best
    };
    let sep100 = time_sep(&stack_100);
    let sep50 = time_sep(&stack_50);
    let sep_ratio = sep100 / sep50;
    assert!(
        (4.0..=16.0).contains(&sep_ratio),
        "criterion 10 fail - separable-statistics time(K=100)/time(K=50) = {sep_ratio:.2} \
         ({sep100:.4} s / {sep50:.4} s) outside [4, 16]"
    );
    let t100 = time_fit(&stack_100);
    let t50 = time_fit(&stack_50);
    let full_ratio = t100 / t50;
    assert!(
        full_ratio <= 16.0,
        "criterion 10 fail - full-fit time(K=100)/time(K=50) = {full_ratio:.2} \
         ({t100:.3} s / {t50:.3} s) exceeds 16"
    );

    println!(
        "criterion 10 pass - peak {:.1} MB (<= 64 MB), K-doubling ratio {sep_ratio:.1} in [4, 16] \
         for the cubic statistics, {full_ratio:.1} <= 16 for the full fit",
        peak_delta as f64 / (1 << 20) as f64
    );
}

// ---------------------------------------------------------------------------
// 11. PSD projections
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_psd_projections() {
    let _gate = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst_eig: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;

    // 25 matrices, indefinite in the main and occasionally already PSD.
    for instance in 0..25 {
        let k = rng.gen_range(2..=40usize);
        let m = if instance % 5 == 4 {
            random_spd(&mut rng, k)
        } else {
            random_sym(&mut rng, k)
        };
        let m = m.scale(1.0 / m.fro_norm2().sqrt());
        let p = psd_project_matrix(&m).unwrap();
        let min_eig = *sym_eigen(&p).unwrap().phi.last().unwrap();
        worst_eig = worst_eig.min(min_eig);
        assert!(
            min_eig >= -1e-10,
            "criterion 11 fail - matrix projection left eigenvalue {min_eig:.3e} on instance \
             {instance} (k = {k})"
        );
        let pp = psd_project_matrix(&p).unwrap();
        let idem = fro(&(pp.as_array() - p.as_array()));
        worst_idem = worst_idem.max(idem);
        assert!(
            idem <= 1e-10,
            "criterion 11 fail - matrix projection is not idempotent on instance {instance}: \
             |P(P) - P| = {idem:.3e}"
        );
    }

    // 25 symbols, full-support and band-clipped.
    for instance in 0..25 {
        let k1 = rng.gen_range(2..=16usize);
        let k2 = rng.gen_range(2..=16usize);
        let mut sym = random_symbol(&mut rng, k1, k2);
        if instance % 3 == 0 {
            let d = rng.gen_range(1..=k1.min(k2) - 1).max(1);
            sym = sym.band_clip(d).unwrap();
        }
        let scale = sym.lags().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sym = sym.scale(1.0 / scale);
        let s = psd_project_symbol(&sym).unwrap();
        let min_spec = circulant_spectrum(&s).unwrap().min();
        worst_eig = worst_eig.min(min_spec);
        assert!(
            min_spec >= -1e-10,
            "criterion 11 fail - symbol projection left spectrum value {min_spec:.3e} on \
             instance {instance} ({k1} x {k2})"
        );
        let ss = psd_project_symbol(&s).unwrap();
        let idem = fro(&(ss.lags() - s.lags()));
        worst_idem = worst_idem.max(idem);
        assert!(
            idem <= 1e-10,
            "criterion 11 fail - symbol projection is not idempotent on instance {instance}: \
             |P(P) - P| = {idem:.3e}"
        );
    }

    println!(
        "criterion 11 pass - 50 projections: worst spectrum floor {worst_eig:.2e} >= -1e-10, \
         worst idempotence gap {worst_idem:.2e} <= 1e-10"
    );
}
