//! C ABI for the switching-cost solver suite.
//!
//! Every object crossing the boundary is an opaque handle created and
//! released by this library; every fallible call returns an [`SbStatus`] and
//! leaves a human-readable message retrievable with [`sb_last_error`]. The
//! bundled `include/switchbench.h` header is regenerated on every build.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use switchbench::io::{parse_problem, resolve_grids, ResolvedGrids};
use switchbench::lattice::{Lattice, TimeGrid};
use switchbench::problem::{validate, ProbePlan, SwitchingProblem};
use switchbench::rbsde::{picard_solve, PicardConfig};
use switchbench::snell::{solve_full, ValueField};
use switchbench::{hjb, Error};

/// Result of every fallible call. Numeric values mirror the CLI exit codes;
/// the argument-misuse codes are specific to the C boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    SbOk = 0,
    SbParseError = 1,
    SbDomainError = 2,
    SbNumericalError = 3,
    SbNullArgument = 4,
    SbPanic = 5,
}

/// A parsed problem instance plus its resolved discretization defaults.
pub struct SbProblem {
    p: SwitchingProblem,
    grids: ResolvedGrids,
}

/// A solved value surface on a scenario tree.
pub struct SbField {
    field: ValueField,
}

/// A solved value surface on a finite-difference grid.
pub struct SbPde {
    sol: hjb::PdeSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = Some(CString::new(sanitized).unwrap());
    });
}

fn status_of(err: &Error) -> SbStatus {
    match err {
        Error::Parse(_) | Error::Io(_) => SbStatus::SbParseError,
        Error::Domain(_) | Error::Size(_) => SbStatus::SbDomainError,
        Error::Numerical(_) => SbStatus::SbNumericalError,
    }
}

fn fail(err: Error) -> SbStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn null_arg(what: &str) -> SbStatus {
    set_error(&format!("{what} must not be null"));
    SbStatus::SbNullArgument
}

/// Runs a closure that may panic; panics become `SbPanic` instead of
/// unwinding across the boundary.
fn guarded(op: impl FnOnce() -> SbStatus) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(op)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            SbStatus::SbPanic
        }
    }
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn sb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent error on this thread, or null when no
/// error has occurred. The caller owns the string and must release it with
/// `sb_string_free`.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must have been returned by `sb_last_error` and not freed before.
#[no_mangle]
pub unsafe extern "C" fn sb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a problem file (JSON, same schema as the CLI) into a handle.
/// On success writes the new handle to `out`.
///
/// # Safety
/// `json` must point to a NUL-terminated string; `out` must be a valid
/// pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_problem_parse(
    json: *const c_char,
    out: *mut *mut SbProblem,
) -> SbStatus {
    if json.is_null() {
        return null_arg("json");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let bytes = CStr::from_ptr(json).to_bytes();
    guarded(|| match parse_problem(bytes).and_then(|pf| Ok((pf.to_problem()?, pf))) {
        Ok((p, pf)) => {
            let grids = resolve_grids(&p, &pf.grids);
            *out = Box::into_raw(Box::new(SbProblem { p, grids }));
            SbStatus::SbOk
        }
        Err(e) => fail(e),
    })
}

/// Releases a problem handle. Null is ignored.
///
/// # Safety
/// `p` must be a handle from `sb_problem_parse`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_problem_free(p: *mut SbProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of modes, or 0 for a null handle.
///
/// # Safety
/// `p` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sb_problem_modes(p: *const SbProblem) -> u32 {
    p.as_ref().map_or(0, |h| h.p.q as u32)
}

/// Time horizon, or NaN for a null handle.
///
/// # Safety
/// `p` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sb_problem_horizon(p: *const SbProblem) -> f64 {
    p.as_ref().map_or(f64::NAN, |h| h.p.horizon)
}

/// Runs the structural assumption checks. Writes `true` to `passed` when
/// every check holds.
///
/// # Safety
/// `p` must be a live handle; `passed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_validate(p: *const SbProblem, passed: *mut bool) -> SbStatus {
    let Some(h) = p.as_ref() else {
        return null_arg("problem");
    };
    if passed.is_null() {
        return null_arg("passed");
    }
    guarded(|| match validate(&h.p, &ProbePlan::for_problem(&h.p)) {
        Ok(report) => {
            *passed = report.passed;
            if !report.passed {
                let names: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                set_error(&format!("assumption checks failed: {}", names.join(", ")));
            }
            SbStatus::SbOk
        }
        Err(e) => fail(e),
    })
}

unsafe fn lattice_for(h: &SbProblem, max_dt: f64) -> Result<Lattice, Error> {
    let dt = if max_dt > 0.0 { max_dt } else { h.grids.max_dt };
    let grid = TimeGrid::for_problem(&h.p, dt)?;
    Lattice::build(&h.p, grid)
}

/// Solves the switching system by backward induction on a scenario tree.
/// `max_dt <= 0` uses the instance's resolved default step. Requires an
/// instance with payoff rates; coupled drivers need `sb_solve_picard`.
///
/// # Safety
/// `p` must be a live handle; `out` must be a valid pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_solve_tree(
    p: *const SbProblem,
    max_dt: f64,
    out: *mut *mut SbField,
) -> SbStatus {
    let Some(h) = p.as_ref() else {
        return null_arg("problem");
    };
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        match lattice_for(h, max_dt).and_then(|lat| solve_full(&h.p, &lat)) {
            Ok(field) => {
                *out = Box::into_raw(Box::new(SbField { field }));
                SbStatus::SbOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Solves the coupled system by fixed-point iteration on a scenario tree;
/// accepts both rate and driver instances. `max_dt <= 0` uses the resolved
/// default step.
///
/// # Safety
/// `p` must be a live handle; `out` must be a valid pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_solve_picard(
    p: *const SbProblem,
    max_dt: f64,
    out: *mut *mut SbField,
) -> SbStatus {
    let Some(h) = p.as_ref() else {
        return null_arg("problem");
    };
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        let solved = lattice_for(h, max_dt)
            .and_then(|lat| picard_solve(&h.p, &lat, &PicardConfig::default()));
        match solved {
            Ok(sol) => {
                if !sol.log.converged {
                    return fail(Error::Numerical(
                        "fixed-point iteration did not converge".into(),
                    ));
                }
                *out = Box::into_raw(Box::new(SbField { field: sol.field }));
                SbStatus::SbOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of modes in a solved field, or 0 for null.
///
/// # Safety
/// `f` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sb_field_modes(f: *const SbField) -> u32 {
    f.as_ref().map_or(0, |h| h.field.q as u32)
}

/// Number of time layers in a solved field, or 0 for null.
///
/// # Safety
/// `f` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sb_field_layers(f: *const SbField) -> u64 {
    f.as_ref().map_or(0, |h| h.field.n_layers() as u64)
}

/// Value at time zero for a 0-based mode.
///
/// # Safety
/// `f` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_field_root(
    f: *const SbField,
    mode: u32,
    out: *mut f64,
) -> SbStatus {
    let Some(h) = f.as_ref() else {
        return null_arg("field");
    };
    if out.is_null() {
        return null_arg("out");
    }
    if mode as usize >= h.field.q {
        set_error(&format!(
            "mode {mode} out of range for a {}-mode field",
            h.field.q
        ));
        return SbStatus::SbDomainError;
    }
    *out = h.field.root(mode as usize);
    SbStatus::SbOk
}

/// Releases a field handle. Null is ignored.
///
/// # Safety
/// `f` must be a handle from a solve call, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_field_free(f: *mut SbField) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Solves the variational system with an explicit finite-difference scheme.
/// Nonpositive `max_dt`, `h`, or `half_width` fall back to the instance's
/// resolved defaults.
///
/// # Safety
/// `p` must be a live handle; `out` must be a valid pointer to pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_solve_pde(
    p: *const SbProblem,
    max_dt: f64,
    h: f64,
    half_width: f64,
    out: *mut *mut SbPde,
) -> SbStatus {
    let Some(hp) = p.as_ref() else {
        return null_arg("problem");
    };
    if out.is_null() {
        return null_arg("out");
    }
    let dt = if max_dt > 0.0 { max_dt } else { hp.grids.max_dt };
    let hx = if h > 0.0 { h } else { hp.grids.h };
    let w = if half_width > 0.0 { half_width } else { hp.grids.half_width };
    guarded(|| {
        let solved = hjb::SpaceTimeGrid::build(&hp.p, dt, hx, w)
            .and_then(|grid| hjb::solve_qvi(&hp.p, &grid));
        match solved {
            Ok(sol) => {
                *out = Box::into_raw(Box::new(SbPde { sol }));
                SbStatus::SbOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Finite-difference value at time zero and the centered start state, for a
/// 0-based mode.
///
/// # Safety
/// `s` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_pde_root(s: *const SbPde, mode: u32, out: *mut f64) -> SbStatus {
    let Some(h) = s.as_ref() else {
        return null_arg("pde");
    };
    if out.is_null() {
        return null_arg("out");
    }
    if mode as usize >= h.sol.q {
        set_error(&format!("mode {mode} out of range for a {}-mode solution", h.sol.q));
        return SbStatus::SbDomainError;
    }
    *out = h.sol.root(mode as usize);
    SbStatus::SbOk
}

/// Releases a finite-difference solution handle. Null is ignored.
///
/// # Safety
/// `s` must be a handle from `sb_solve_pde`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_pde_free(s: *mut SbPde) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
