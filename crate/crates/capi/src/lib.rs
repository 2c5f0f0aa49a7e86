//! C ABI for the sptcov covariance estimation library.
//!
//! Conventions:
//!
//! - Every function returns an [`SptStatus`]; `SPT_STATUS_OK` is zero.
//!   On failure, [`spt_last_error_message`] returns a human-readable
//!   description, stored per thread and valid until the next failing call
//!   on the same thread.
//! - Sample stacks and fitted models are opaque handles created and
//!   destroyed by this library ([`spt_stack_free`] / [`spt_model_free`];
//!   both ignore null).
//! - Matrix buffers are dense row-major `f64`; stacks are sample-major
//!   (sample index varies slowest). Buffer lengths are implied by the
//!   handle dimensions and never read beyond them.
//! - Panics never unwind across the boundary; they surface as
//!   `SPT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array3, ArrayView2};
use sptcov::bandwidth::{select_bandwidth, BandwidthSearch};
use sptcov::estimators::{estimate_full, rel_error, BandedKind, EstimateOptions, SepPlusBandedCov};
use sptcov::gof::{gof_test, GofConfig};
use sptcov::io::{load_model, read_stack, save_model, write_stack, Provenance};
use sptcov::model::SampleStack;
use sptcov::solver::{adi_solve, apply_model, AdiConfig};
use sptcov::SptError;

/// Result status of every C API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SptStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or an argument violating documented bounds.
    InvalidArgument = 1,
    BandwidthOutOfRange = 2,
    ShapeMismatch = 3,
    DegenerateTrace = 4,
    OracleCapExceeded = 5,
    SingularSystem = 6,
    NonConvergence = 7,
    RankExceeded = 8,
    NonFinite = 9,
    InvalidConfig = 10,
    Io = 11,
    Format = 12,
    Parse = 13,
    /// A panic was caught at the boundary; see the last error message.
    Panic = 14,
}

/// Banded component fitted alongside the separable part.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SptBandedKind {
    None = 0,
    Stationary = 1,
    Banded = 2,
}

/// Opaque sample stack handle.
pub struct SptStack(SampleStack);

/// Opaque fitted-model handle.
pub struct SptModel(SepPlusBandedCov);

struct Failure {
    status: SptStatus,
    message: String,
}

type FfiResult = Result<(), Failure>;

impl From<SptError> for Failure {
    fn from(e: SptError) -> Failure {
        let status = match &e {
            SptError::BandwidthOutOfRange { .. } => SptStatus::BandwidthOutOfRange,
            SptError::ShapeMismatch { .. } => SptStatus::ShapeMismatch,
            SptError::DegenerateTrace { .. } => SptStatus::DegenerateTrace,
            SptError::OracleCapExceeded { .. } => SptStatus::OracleCapExceeded,
            SptError::SingularSystem { .. } => SptStatus::SingularSystem,
            SptError::NonConvergence { .. } => SptStatus::NonConvergence,
            SptError::RankExceeded { .. } => SptStatus::RankExceeded,
            SptError::NonFinite { .. } => SptStatus::NonFinite,
            SptError::InvalidConfig(_) => SptStatus::InvalidConfig,
            SptError::Io(_) => SptStatus::Io,
            SptError::Format { .. } => SptStatus::Format,
            SptError::Parse(_) => SptStatus::Parse,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        status: SptStatus::InvalidArgument,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn ffi_guard<F: FnOnce() -> FfiResult>(f: F) -> SptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SptStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic of unknown type".into());
            set_last_error(&message);
            SptStatus::Panic
        }
    }
}

/// Last error message of the current thread ("" when no call failed yet).
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn spt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn spt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn stack_arg<'a>(ptr: *const SptStack) -> Result<&'a SampleStack, Failure> {
    ptr.as_ref()
        .map(|s| &s.0)
        .ok_or_else(|| invalid("stack handle is null"))
}

unsafe fn model_arg<'a>(ptr: *const SptModel) -> Result<&'a SepPlusBandedCov, Failure> {
    ptr.as_ref()
        .map(|m| &m.0)
        .ok_or_else(|| invalid("model handle is null"))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| invalid(format!("{what} output pointer is null")))
}

unsafe fn matrix_arg<'a>(
    ptr: *const f64,
    k1: usize,
    k2: usize,
    what: &str,
) -> Result<ArrayView2<'a, f64>, Failure> {
    if ptr.is_null() {
        return Err(invalid(format!("{what} buffer is null")));
    }
    let slice = std::slice::from_raw_parts(ptr, k1 * k2);
    ArrayView2::from_shape((k1, k2), slice).map_err(|e| invalid(format!("{what}: {e}")))
}

/// Copies `n` samples of `k1 x k2` values (sample-major, row-major) into a
/// new stack handle. `centered` asserts the per-cell means are already
/// zero; passing `true` for uncentered data is rejected.
///
/// # Safety
/// `data` must point to `n * k1 * k2` readable doubles; `out` must be a
/// valid destination for one pointer.
#[no_mangle]
pub unsafe extern "C" fn spt_stack_new(
    data: *const f64,
    n: usize,
    k1: usize,
    k2: usize,
    centered: bool,
    out: *mut *mut SptStack,
) -> SptStatus {
    ffi_guard(|| {
        let out = out_arg(out, "stack handle")?;
        if data.is_null() {
            return Err(invalid("data buffer is null"));
        }
        let len = n
            .checked_mul(k1)
            .and_then(|v| v.checked_mul(k2))
            .ok_or_else(|| invalid("stack dimensions overflow"))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let array = Array3::from_shape_vec((n, k1, k2), values)
            .map_err(|e| invalid(format!("stack shape: {e}")))?;
        let stack = SampleStack::with_centered(array, centered)?;
        *out = Box::into_raw(Box::new(SptStack(stack)));
        Ok(())
    })
}

/// Releases a stack handle. Null is ignored.
///
/// # Safety
/// `stack` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn spt_stack_free(stack: *mut SptStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// Writes the stack dimensions to any non-null output pointers.
///
/// # Safety
/// `stack` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn spt_stack_dims(
    stack: *const SptStack,
    n: *mut usize,
    k1: *mut usize,
    k2: *mut usize,
) -> SptStatus {
    ffi_guard(|| {
        let s = stack_arg(stack)?;
        if let Some(n) = n.as_mut() {
            *n = s.n();
        }
        if let Some(k1) = k1.as_mut() {
            *k1 = s.k1();
        }
        if let Some(k2) = k2.as_mut() {
            *k2 = s.k2();
        }
        Ok(())
    })
}

/// Copies the stack payload (sample-major, row-major) into `data`.
///
/// # Safety
/// `data` must hold `n * k1 * k2` doubles.
#[no_mangle]
pub unsafe extern "C" fn spt_stack_data(stack: *const SptStack, data: *mut f64) -> SptStatus {
    ffi_guard(|| {
        let s = stack_arg(stack)?;
        if data.is_null() {
            return Err(invalid("data buffer is null"));
        }
        let out = std::slice::from_raw_parts_mut(data, s.data().len());
        for (dst, src) in out.iter_mut().zip(s.data().iter()) {
            *dst = *src;
        }
        Ok(())
    })
}

/// Reads a binary stack file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spt_stack_read(
    path: *const c_char,
    out: *mut *mut SptStack,
) -> SptStatus {
    ffi_guard(|| {
        let out = out_arg(out, "stack handle")?;
        let stack = read_stack(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SptStack(stack)));
        Ok(())
    })
}

/// Writes a stack handle to a binary stack file.
///
/// # Safety
/// `path` must be a NUL-terminated string, `stack` a live handle.
#[no_mangle]
pub unsafe extern "C" fn spt_stack_write(
    path: *const c_char,
    stack: *const SptStack,
) -> SptStatus {
    ffi_guard(|| {
        write_stack(path_arg(path)?, stack_arg(stack)?)?;
        Ok(())
    })
}

/// Fits a separable-plus-banded model with bandwidth `d` to the stack.
///
/// # Safety
/// `stack` must be a live handle, `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spt_estimate(
    stack: *const SptStack,
    d: usize,
    kind: SptBandedKind,
    center: bool,
    psd: bool,
    out: *mut *mut SptModel,
) -> SptStatus {
    ffi_guard(|| {
        let out = out_arg(out, "model handle")?;
        let samples = stack_arg(stack)?;
        let kind = match kind {
            SptBandedKind::None => BandedKind::None,
            SptBandedKind::Stationary => BandedKind::Stationary,
            SptBandedKind::Banded => BandedKind::Banded,
        };
        let model = estimate_full(samples, d, kind, &EstimateOptions { center, psd })?;
        *out = Box::into_raw(Box::new(SptModel(model)));
        Ok(())
    })
}

/// Cross-validates the bandwidth over `candidates` and writes the winner.
/// Stationary banded parts, global centering, seeded fold shuffle.
///
/// # Safety
/// `candidates` must hold `n_candidates` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spt_select_bandwidth(
    stack: *const SptStack,
    candidates: *const usize,
    n_candidates: usize,
    folds: usize,
    seed: u64,
    out: *mut usize,
) -> SptStatus {
    ffi_guard(|| {
        let out = out_arg(out, "bandwidth")?;
        let samples = stack_arg(stack)?;
        if candidates.is_null() {
            return Err(invalid("candidate buffer is null"));
        }
        let candidates = std::slice::from_raw_parts(candidates, n_candidates).to_vec();
        let search = BandwidthSearch {
            candidates,
            folds,
            seed,
            ..BandwidthSearch::default()
        };
        *out = select_bandwidth(samples, &search)?.d_hat;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn spt_model_free(model: *mut SptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model dimensions and bandwidth to non-null output pointers.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn spt_model_dims(
    model: *const SptModel,
    k1: *mut usize,
    k2: *mut usize,
    d: *mut usize,
) -> SptStatus {
    ffi_guard(|| {
        let m = model_arg(model)?;
        if let Some(k1) = k1.as_mut() {
            *k1 = m.k1();
        }
        if let Some(k2) = k2.as_mut() {
            *k2 = m.k2();
        }
        if let Some(d) = d.as_mut() {
            *d = m.d().0;
        }
        Ok(())
    })
}

/// Loads a JSON model file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spt_model_read(
    path: *const c_char,
    out: *mut *mut SptModel,
) -> SptStatus {
    ffi_guard(|| {
        let out = out_arg(out, "model handle")?;
        let (model, _provenance) = load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SptModel(model)));
        Ok(())
    })
}

/// Saves a model handle as a JSON model file.
///
/// # Safety
/// `path` must be a NUL-terminated string, `model` a live handle.
#[no_mangle]
pub unsafe extern "C" fn spt_model_write(
    path: *const c_char,
    model: *const SptModel,
) -> SptStatus {
    ffi_guard(|| {
        save_model(path_arg(path)?, model_arg(model)?, Provenance::default())?;
        Ok(())
    })
}

/// Applies the model as an operator: `y = (A1 (x) A2 + B) x`.
///
/// # Safety
/// `x` and `y` must each hold `k1 * k2` doubles (row-major).
#[no_mangle]
pub unsafe extern "C" fn spt_model_apply(
    model: *const SptModel,
    x: *const f64,
    y: *mut f64,
) -> SptStatus {
    ffi_guard(|| {
        let m = model_arg(model)?;
        let x = matrix_arg(x, m.k1(), m.k2(), "input")?;
        if y.is_null() {
            return Err(invalid("output buffer is null"));
        }
        let result = apply_model(m, x)?;
        let out = std::slice::from_raw_parts_mut(y, m.k1() * m.k2());
        for (dst, src) in out.iter_mut().zip(result.iter()) {
            *dst = *src;
        }
        Ok(())
    })
}

/// Solves `(A1 (x) A2 + B + ridge I) x = y` to relative tolerance `tol`.
/// The final iterate is written to `x` even when the outer budget runs out
/// (status `SPT_STATUS_NON_CONVERGENCE`); `out_iters`, when non-null,
/// receives the outer sweep count.
///
/// # Safety
/// `y` and `x` must each hold `k1 * k2` doubles (row-major).
#[no_mangle]
pub unsafe extern "C" fn spt_model_solve(
    model: *const SptModel,
    y: *const f64,
    x: *mut f64,
    tol: f64,
    ridge: f64,
    max_outer: usize,
    out_iters: *mut usize,
) -> SptStatus {
    ffi_guard(|| {
        let m = model_arg(model)?;
        let y = matrix_arg(y, m.k1(), m.k2(), "right-hand side")?;
        if x.is_null() {
            return Err(invalid("solution buffer is null"));
        }
        let config = AdiConfig {
            tol,
            ridge,
            max_outer,
            ..AdiConfig::default()
        };
        let solution = adi_solve(m, y, &config)?;
        let out = std::slice::from_raw_parts_mut(x, m.k1() * m.k2());
        for (dst, src) in out.iter_mut().zip(solution.x.iter()) {
            *dst = *src;
        }
        if let Some(iters) = out_iters.as_mut() {
            *iters = solution.outer_iters;
        }
        if !solution.converged {
            return Err(SptError::NonConvergence {
                iters: solution.outer_iters,
                residual: solution.residual,
                tol,
            }
            .into());
        }
        Ok(())
    })
}

/// Relative error of `estimate` against `truth` in Frobenius norm,
/// computed without materializing dense tensors.
///
/// # Safety
/// Both handles must be live; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn spt_rel_error(
    estimate: *const SptModel,
    truth: *const SptModel,
    out: *mut f64,
) -> SptStatus {
    ffi_guard(|| {
        let out = out_arg(out, "error")?;
        *out = rel_error(model_arg(estimate)?, model_arg(truth)?)?;
        Ok(())
    })
}

/// Bootstrap goodness-of-fit test of the separable-plus-banded class with
/// bandwidth `d` (`0` tests plain separability). Writes the test statistic
/// and the bootstrap p-value.
///
/// # Safety
/// `stack` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn spt_gof(
    stack: *const SptStack,
    d: usize,
    i_dims: usize,
    j_dims: usize,
    n_boot: usize,
    seed: u64,
    out_statistic: *mut f64,
    out_p_value: *mut f64,
) -> SptStatus {
    ffi_guard(|| {
        let samples = stack_arg(stack)?;
        let cfg = GofConfig {
            d,
            i_dims,
            j_dims,
            n_boot,
            seed,
            refit_subspace: false,
        };
        let result = gof_test(samples, &cfg)?;
        if let Some(stat) = out_statistic.as_mut() {
            *stat = result.statistic;
        }
        if let Some(p) = out_p_value.as_mut() {
            *p = result.p_value;
        }
        Ok(())
    })
}
