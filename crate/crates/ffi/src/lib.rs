//! C interface to the coefficient pipeline.
//!
//! Every function returns a [`SohbStatus`]; on failure the message is
//! available from [`sohb_last_error`] on the same thread. Solutions are
//! opaque handles released with [`sohb_solution_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sohb::coeffs::{coefficients_of_solution, compute_all, order_parameter_c1, CoefficientOptions, CoefficientSet};
use sohb::gci_solver::{check_dimension, GciSolution, SolverOptions};
use sohb::torus::{rank, QuadratureGrid};
use sohb::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SohbStatus {
    Ok = 0,
    /// Null pointer or buffer of the wrong length.
    InvalidArgument = 1,
    /// Invalid κ or other configuration value.
    InvalidConfig = 2,
    /// `n` outside `[3, 11]`.
    UnsupportedDimension = 3,
    /// Solver or integration failure.
    NumericalFailure = 4,
    /// Internal panic caught at the boundary.
    Panic = 5,
}

/// Coefficient set with intermediates. `err_est` is NaN when not computed.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SohbCoefficients {
    pub n: u32,
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub big_c2: f64,
    pub big_c3: f64,
    pub big_c4: f64,
    pub big_c4_prime: f64,
    pub err_est: f64,
    pub nq: u32,
    pub degree: u32,
}

impl From<&CoefficientSet> for SohbCoefficients {
    fn from(s: &CoefficientSet) -> Self {
        let v = &s.values;
        SohbCoefficients {
            n: s.n as u32,
            kappa: s.kappa,
            c1: v.c1,
            c2: v.c2,
            c3: v.c3,
            c4: v.c4,
            big_c2: v.big_c2,
            big_c3: v.big_c3,
            big_c4: v.big_c4,
            big_c4_prime: v.big_c4_prime,
            err_est: s.diagnostics.err_est.unwrap_or(f64::NAN),
            nq: s.diagnostics.nq as u32,
            degree: s.diagnostics.degree as u32,
        }
    }
}

/// Opaque handle to a solved profile α.
pub struct SohbSolution {
    inner: GciSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SohbStatus {
    match e {
        Error::InvalidConfig(_) | Error::Json(_) | Error::Io(_) | Error::DimensionMismatch { .. } => {
            SohbStatus::InvalidConfig
        }
        Error::UnsupportedDimension(_) => SohbStatus::UnsupportedDimension,
        _ => SohbStatus::NumericalFailure,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SohbStatus, String)>) -> SohbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SohbStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SohbStatus::Panic
        }
    }
}

fn lift(e: Error) -> (SohbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SohbStatus, String) {
    (SohbStatus::InvalidArgument, format!("{what} is null"))
}

fn solver_options(n: usize, degree: usize, nq: usize) -> SolverOptions {
    let d = SolverOptions::defaults_for(n);
    SolverOptions {
        degree: if degree == 0 { d.degree } else { degree },
        nq: if nq == 0 { d.nq } else { nq },
    }
}

/// Message of the last failure on this thread (empty if none). The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sohb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sohb_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains NUL"),
    };
    VERSION.as_ptr()
}

/// Largest supported dimension.
#[no_mangle]
pub extern "C" fn sohb_max_dimension() -> usize {
    sohb::MAX_DIMENSION
}

/// Solves for α. `degree` or `nq` equal to 0 selects the default.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sohb_solution_new(
    n: usize,
    kappa: f64,
    degree: usize,
    nq: usize,
    out: *mut *mut SohbSolution,
) -> SohbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        check_dimension(n).map_err(lift)?;
        let inner = GciSolution::compute(n, kappa, solver_options(n, degree, nq)).map_err(lift)?;
        *out = Box::into_raw(Box::new(SohbSolution { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sol` must come from [`sohb_solution_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sohb_solution_free(sol: *mut SohbSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Rank `p = ⌊n/2⌋` of the solution's torus, i.e. the length of angle and
/// α vectors.
///
/// # Safety
/// `sol` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn sohb_solution_rank(sol: *const SohbSolution) -> usize {
    sol.as_ref().map_or(0, |s| rank(s.inner.dim()))
}

/// Evaluates α at `angles` (length `p`) into `alpha` (length `p`).
///
/// # Safety
/// `angles` and `alpha` must point to `len` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn sohb_solution_alpha(
    sol: *const SohbSolution,
    angles: *const f64,
    alpha: *mut f64,
    len: usize,
) -> SohbStatus {
    guard(|| {
        let s = sol.as_ref().ok_or_else(|| null("sol"))?;
        if angles.is_null() || alpha.is_null() {
            return Err(null("angles or alpha"));
        }
        let p = rank(s.inner.dim());
        if len != p {
            return Err((SohbStatus::InvalidArgument, format!("expected {p} angles, got {len}")));
        }
        let th = std::slice::from_raw_parts(angles, len);
        let a = s.inner.alpha_at(th);
        std::slice::from_raw_parts_mut(alpha, len).copy_from_slice(&a);
        Ok(())
    })
}

/// Coefficients of a solved profile (no error estimate).
///
/// # Safety
/// `sol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sohb_solution_coefficients(
    sol: *const SohbSolution,
    out: *mut SohbCoefficients,
) -> SohbStatus {
    guard(|| {
        let s = sol.as_ref().ok_or_else(|| null("sol"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = SohbCoefficients::from(&coefficients_of_solution(&s.inner).map_err(lift)?);
        Ok(())
    })
}

/// Full coefficient set with default discretization and error estimate.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohb_coefficients(n: usize, kappa: f64, out: *mut SohbCoefficients) -> SohbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        check_dimension(n).map_err(lift)?;
        let set = compute_all(n, kappa, CoefficientOptions::defaults_for(n)).map_err(lift)?;
        *out = SohbCoefficients::from(&set);
        Ok(())
    })
}

/// Order parameter `c1(κ)` for `κ ≥ 0`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sohb_order_parameter(n: usize, kappa: f64, out: *mut f64) -> SohbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let grid = QuadratureGrid::default_for(n).map_err(lift)?;
        *out = order_parameter_c1(n, kappa, &grid).map_err(lift)?;
        Ok(())
    })
}
