//! C interface to `hum-core`.
//!
//! Problems are created from the same JSON documents `humctl` reads and are
//! handed out as opaque pointers. Every function returns a [`HumStatus`];
//! on failure a description is available from [`hum_last_error`] on the
//! calling thread. Arrays are passed as pointer plus length, fields are
//! stored node-major within a time step (x index fastest) and time steps are
//! concatenated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hum_core::analysis::estimate_observability_constant;
use hum_core::cli::RunConfig;
use hum_core::dynamics::{duality_gap, ControlFunction, TerminalData};
use hum_core::hum::{synthesize_control, ControlResult, HumMode};
use hum_core::model::ProblemSpec;
use hum_core::Error;

/// Outcome of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HumStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    /// An iterative method stopped at its budget; outputs are still set.
    NotConverged = 5,
    SolverFailure = 6,
    Panic = 7,
}

/// Problem built from a JSON configuration. Opaque to C.
pub struct HumProblem {
    config: RunConfig,
    problem: ProblemSpec,
}

/// Synthesized control. Opaque to C.
pub struct HumControlResult {
    result: ControlResult,
}

/// Scalar summary of a control synthesis.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumControlSummary {
    pub epsilon: f64,
    pub delta: f64,
    /// 0 for the plain functional, 1 for the weighted one.
    pub mode: i32,
    pub control_norm_l2: f64,
    pub control_norm_lq: f64,
    pub q: f64,
    pub terminal_v_norm: f64,
    pub terminal_ue_norm: f64,
    pub bound_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> HumStatus {
    match err {
        e if e.is_non_convergence() => HumStatus::NotConverged,
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => HumStatus::InvalidArgument,
        Error::InvalidGrid(_) | Error::InvalidConductivity(_) | Error::InvalidProblem(_) => HumStatus::InvalidConfig,
        _ => HumStatus::SolverFailure,
    }
}

fn fail(status: HumStatus, msg: impl Into<String>) -> HumStatus {
    set_error(msg);
    status
}

fn from_error(err: Error) -> HumStatus {
    let status = status_of(&err);
    fail(status, err.to_string())
}

/// Runs `body`, turning panics into [`HumStatus::Panic`].
fn guarded(body: impl FnOnce() -> HumStatus) -> HumStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(HumStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable doubles.
unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Message describing the last failed call on this thread, or null. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn hum_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses and validates a JSON run configuration and builds the problem.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hum_problem_from_json(json: *const c_char, out: *mut *mut HumProblem) -> HumStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            return fail(HumStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(HumStatus::InvalidUtf8, e.to_string()),
        };
        let config = match RunConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(HumStatus::InvalidConfig, e.to_string()),
        };
        let problem = match config.problem() {
            Ok(p) => p,
            Err(e) => return fail(HumStatus::InvalidConfig, e.to_string()),
        };
        *out = Box::into_raw(Box::new(HumProblem { config, problem }));
        HumStatus::Ok
    })
}

/// Releases a problem; null is ignored.
///
/// # Safety
/// `problem` must come from [`hum_problem_from_json`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hum_problem_free(problem: *mut HumProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Interior node count, or 0 for null.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hum_problem_nodes(problem: *const HumProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.grid().len())
}

/// Time step count, or 0 for null.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hum_problem_steps(problem: *const HumProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.n_steps())
}

/// Replaces the relaxation parameter.
///
/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hum_problem_set_epsilon(problem: *mut HumProblem, epsilon: f64) -> HumStatus {
    guarded(|| {
        let Some(p) = problem.as_mut() else {
            return fail(HumStatus::NullPointer, "null problem");
        };
        match p.problem.with_epsilon(epsilon) {
            Ok(next) => {
                p.problem = next;
                p.config.physics.epsilon = epsilon;
                HumStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Synthesizes the control with the configured functional. On
/// [`HumStatus::NotConverged`] the best iterate is still returned in `out`.
///
/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hum_synthesize_control(
    problem: *const HumProblem,
    out: *mut *mut HumControlResult,
) -> HumStatus {
    guarded(|| {
        let (Some(p), false) = (problem.as_ref(), out.is_null()) else {
            return fail(HumStatus::NullPointer, "null argument");
        };
        *out = ptr::null_mut();
        let pot = p.config.potential();
        let hum = p.config.hum_config();
        let weights = match hum.mode {
            HumMode::Weighted => match p.config.weights.build(&p.problem, pot.inf_norm()) {
                Ok(w) => Some(w),
                Err(e) => return from_error(e),
            },
            HumMode::Plain => None,
        };
        let result = match synthesize_control(&p.problem, &pot, weights.as_ref(), &hum) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        let converged = result.converged;
        let iterations = result.iterations;
        *out = Box::into_raw(Box::new(HumControlResult { result }));
        if converged {
            HumStatus::Ok
        } else {
            fail(
                HumStatus::NotConverged,
                format!("stopped after {iterations} iterations"),
            )
        }
    })
}

/// Releases a result; null is ignored.
///
/// # Safety
/// `result` must come from [`hum_synthesize_control`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hum_result_free(result: *mut HumControlResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Copies the scalar summary into `out`.
///
/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hum_result_summary(result: *const HumControlResult, out: *mut HumControlSummary) -> HumStatus {
    guarded(|| {
        let (Some(r), Some(o)) = (result.as_ref(), out.as_mut()) else {
            return fail(HumStatus::NullPointer, "null argument");
        };
        let s = r.result.summary();
        *o = HumControlSummary {
            epsilon: s.epsilon,
            delta: s.delta,
            mode: match s.mode {
                HumMode::Plain => 0,
                HumMode::Weighted => 1,
            },
            control_norm_l2: s.control_norm_l2,
            control_norm_lq: s.control_norm_lq,
            q: s.q,
            terminal_v_norm: s.terminal_v_norm,
            terminal_ue_norm: s.terminal_ue_norm,
            bound_ratio: s.bound_ratio,
            iterations: s.iterations,
            converged: s.converged,
        };
        HumStatus::Ok
    })
}

/// Copies the control, `steps * nodes` values, into `buf`.
///
/// # Safety
/// `result` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hum_result_control(result: *const HumControlResult, buf: *mut f64, len: usize) -> HumStatus {
    guarded(|| {
        let Some(r) = result.as_ref() else {
            return fail(HumStatus::NullPointer, "null result");
        };
        let steps = r.result.control.steps();
        let need: usize = steps.iter().map(Vec::len).sum();
        if len != need {
            return fail(
                HumStatus::InvalidArgument,
                format!("buffer holds {len} values, control has {need}"),
            );
        }
        if buf.is_null() {
            return fail(HumStatus::NullPointer, "null buffer");
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (chunk, step) in dst.chunks_mut(need / steps.len().max(1)).zip(steps) {
            chunk.copy_from_slice(step);
        }
        HumStatus::Ok
    })
}

/// Relative value of the discrete duality identity for control `f`
/// (`steps * nodes` values, zero outside the control region) and terminal
/// data `(phi_t, phi_et)` (`nodes` values each).
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hum_duality_gap(
    problem: *const HumProblem,
    f: *const f64,
    f_len: usize,
    phi_t: *const f64,
    phi_et: *const f64,
    nodes: usize,
    out: *mut f64,
) -> HumStatus {
    guarded(|| {
        let (Some(p), Some(o)) = (problem.as_ref(), out.as_mut()) else {
            return fail(HumStatus::NullPointer, "null argument");
        };
        let n = p.problem.grid().len();
        let n_steps = p.problem.n_steps();
        if f_len != n * n_steps || nodes != n {
            return fail(
                HumStatus::InvalidArgument,
                format!("expected {} control values and {n} nodes", n * n_steps),
            );
        }
        let (Some(fv), Some(pt), Some(pe)) = (slice(f, f_len), slice(phi_t, nodes), slice(phi_et, nodes)) else {
            return fail(HumStatus::NullPointer, "null array");
        };
        let control = match ControlFunction::new(&p.problem, fv.chunks(n).map(<[f64]>::to_vec).collect()) {
            Ok(c) => c,
            Err(e) => return from_error(e),
        };
        let terminal = match TerminalData::new(p.problem.grid(), pt.to_vec(), pe.to_vec()) {
            Ok(t) => t,
            Err(e) => return from_error(e),
        };
        match duality_gap(&p.problem, &p.config.potential(), &control, &terminal) {
            Ok(g) => {
                *o = g.relative();
                HumStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Observability constant of the adjoint system.
///
/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hum_observability_constant(problem: *const HumProblem, out: *mut f64) -> HumStatus {
    guarded(|| {
        let (Some(p), Some(o)) = (problem.as_ref(), out.as_mut()) else {
            return fail(HumStatus::NullPointer, "null argument");
        };
        match estimate_observability_constant(&p.problem, &p.config.potential(), &p.config.observability_options()) {
            Ok(est) => {
                *o = est.c_obs;
                HumStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
