//! C ABI for `fockhier`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns an
//! [`FhStatus`]; on failure the message is kept per thread and can be copied
//! out with [`fh_last_error_message`]. Panics are caught at the boundary and
//! reported as [`FhStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fockhier::cli::{run_compare, run_oracle, run_solver, ExperimentConfig};
use fockhier::oracle::MtcfTable;
use fockhier::solver::SolveReport;
use fockhier::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FhStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Text was not valid UTF-8 or the configuration was rejected.
    InvalidConfig = 2,
    /// An argument was out of range (level, word label, ...).
    InvalidArgument = 3,
    /// The caller's buffer is too small; the required size was written.
    BufferTooSmall = 4,
    /// A solver, inverse or algebra step failed.
    Numerical = 5,
    /// Ensemble simulation or estimation failed.
    Oracle = 6,
    Io = 7,
    Panic = 8,
}

/// A parsed experiment configuration.
pub struct FhExperiment {
    config: ExperimentConfig,
}

/// A solved generating vector with its diagnostics.
pub struct FhSolution {
    report: SolveReport,
}

/// Estimated correlation functions with standard errors.
pub struct FhTable {
    table: MtcfTable,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> FhStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Config(_) | Error::DuplicateLabel(_) | Error::InvalidComponentCount(_) | Error::GridTooSmall(_) | Error::BudgetExceeded { .. } => {
            FhStatus::InvalidConfig
        }
        Error::LevelOutOfRange { .. } | Error::ShapeError(_) | Error::NormalizationError(_) => FhStatus::InvalidArgument,
        Error::TrajectoryDiverged { .. } | Error::CombinatorialBudget(_) | Error::NotADistribution(_) | Error::UnsupportedDynamics(_) => FhStatus::Oracle,
        Error::Io(_) | Error::Json(_) => FhStatus::Io,
        _ => FhStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (FhStatus, String)>) -> FhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FhStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            set_error(format!("panic: {}", msg.unwrap_or_default()));
            FhStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FhStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FhStatus, String) {
    (FhStatus::NullPointer, format!("{what} is null"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, (FhStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (FhStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `s` plus a terminating NUL into `buf`; `needed` receives the size
/// including the NUL. A null `buf` only queries the size.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), (FhStatus, String)> {
    let n = s.len() + 1;
    if let Some(w) = needed.as_mut() {
        *w = n;
    }
    if buf.is_null() {
        return Ok(());
    }
    if len < n {
        return Err((FhStatus::BufferTooSmall, format!("buffer holds {len} bytes, {n} needed")));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf`.
///
/// Returns the size including the NUL; with `len` too small (or `buf` null)
/// nothing is written.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fh_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len() + 1;
        if !buf.is_null() && len >= n {
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, e.len());
            *buf.add(e.len()) = 0;
        }
        n
    })
}

/// Parses an experiment from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out_exp` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_experiment_from_toml(toml: *const c_char, out_exp: *mut *mut FhExperiment) -> FhStatus {
    guard(|| {
        let slot = out(out_exp, "out_exp")?;
        *slot = ptr::null_mut();
        if toml.is_null() {
            return Err(null("toml"));
        }
        let text = CStr::from_ptr(toml).to_str().map_err(|e| (FhStatus::InvalidConfig, e.to_string()))?;
        let config = ExperimentConfig::from_toml(text).map_err(lib_err)?;
        *slot = Box::into_raw(Box::new(FhExperiment { config }));
        Ok(())
    })
}

/// Overrides the coupling of a parsed experiment.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fh_experiment_set_lambda(exp: *mut FhExperiment, lambda: f64) -> FhStatus {
    guard(|| {
        let e = out(exp, "exp")?;
        if !lambda.is_finite() {
            return Err((FhStatus::InvalidArgument, "lambda must be finite".into()));
        }
        e.config.model.lambda = lambda;
        Ok(())
    })
}

/// Releases an experiment. Null is ignored.
///
/// # Safety
/// `exp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fh_experiment_free(exp: *mut FhExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Solves the truncated hierarchy with the configured method.
///
/// # Safety
/// `exp` must be a live handle; `out_sol` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_solve(exp: *const FhExperiment, out_sol: *mut *mut FhSolution) -> FhStatus {
    guard(|| {
        let slot = out(out_sol, "out_sol")?;
        *slot = ptr::null_mut();
        let e = get(exp, "exp")?;
        let report = run_solver(&e.config).map_err(lib_err)?;
        *slot = Box::into_raw(Box::new(FhSolution { report }));
        Ok(())
    })
}

/// # Safety
/// `sol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fh_solution_free(sol: *mut FhSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Number of base labels `d` and truncation level `L`.
///
/// # Safety
/// `sol` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_solution_shape(sol: *const FhSolution, out_d: *mut usize, out_max_level: *mut usize) -> FhStatus {
    guard(|| {
        let s = get(sol, "sol")?;
        *out(out_d, "out_d")? = s.report.v.d();
        *out(out_max_level, "out_max_level")? = s.report.v.max_level();
        Ok(())
    })
}

/// Highest level free of truncation effects; `-1` when none is.
///
/// # Safety
/// `sol` must be a live handle; `out_level` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_solution_trusted_levels(sol: *const FhSolution, out_level: *mut c_int) -> FhStatus {
    guard(|| {
        let s = get(sol, "sol")?;
        *out(out_level, "out_level")? = s.report.trusted_levels.map_or(-1, |l| l as c_int);
        Ok(())
    })
}

/// Largest hierarchy residual over the trusted levels.
///
/// # Safety
/// `sol` must be a live handle; `out_residual` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_solution_max_residual(sol: *const FhSolution, out_residual: *mut f64) -> FhStatus {
    guard(|| {
        let s = get(sol, "sol")?;
        *out(out_residual, "out_residual")? = s.report.max_trusted_residual();
        Ok(())
    })
}

/// Copies level `level` (`d^level` values, slot 1 most significant) into
/// `buf`. `out_len` receives the length; a null `buf` only queries it.
///
/// # Safety
/// `sol` must be a live handle; `buf` must be null or hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fh_solution_level(sol: *const FhSolution, level: usize, buf: *mut f64, len: usize, out_len: *mut usize) -> FhStatus {
    guard(|| {
        let s = get(sol, "sol")?;
        let v = &s.report.v;
        if level > v.max_level() {
            return Err((FhStatus::InvalidArgument, format!("level {level} above truncation level {}", v.max_level())));
        }
        let data = v.level(level);
        if let Some(n) = out_len.as_mut() {
            *n = data.len();
        }
        if buf.is_null() {
            return Ok(());
        }
        if len < data.len() {
            return Err((FhStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Full solve report as JSON text; see [`fh_last_error_message`] for the
/// buffer protocol.
///
/// # Safety
/// `sol` must be a live handle; `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fh_solution_json(sol: *const FhSolution, buf: *mut c_char, len: usize, out_needed: *mut usize) -> FhStatus {
    guard(|| {
        let s = get(sol, "sol")?;
        let text = serde_json::to_string(&s.report).map_err(|e| (FhStatus::Io, e.to_string()))?;
        write_str(&text, buf, len, out_needed)
    })
}

/// Simulates the configured ensemble and estimates correlations.
///
/// # Safety
/// `exp` must be a live handle; `out_table` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_oracle_run(exp: *const FhExperiment, out_table: *mut *mut FhTable) -> FhStatus {
    guard(|| {
        let slot = out(out_table, "out_table")?;
        *slot = ptr::null_mut();
        let e = get(exp, "exp")?;
        let (_, _, table) = run_oracle(&e.config).map_err(lib_err)?;
        *slot = Box::into_raw(Box::new(FhTable { table }));
        Ok(())
    })
}

/// # Safety
/// `table` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fh_table_free(table: *mut FhTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Estimate for the word `labels[0..n]` (order does not matter).
///
/// # Safety
/// `table` must be a live handle; `labels` must hold `n` values (may be null
/// when `n` is 0); the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_table_get(
    table: *const FhTable,
    labels: *const usize,
    n: usize,
    out_value: *mut f64,
    out_stderr: *mut f64,
) -> FhStatus {
    guard(|| {
        let t = get(table, "table")?;
        let word: &[usize] = if n == 0 {
            &[]
        } else if labels.is_null() {
            return Err(null("labels"));
        } else {
            std::slice::from_raw_parts(labels, n)
        };
        let e = t.table.get(word).ok_or_else(|| (FhStatus::InvalidArgument, format!("word {word:?} not in table")))?;
        *out(out_value, "out_value")? = e.value;
        *out(out_stderr, "out_stderr")? = e.stderr;
        Ok(())
    })
}

/// Runs solver and oracle and compares them word by word. `out_pass` is 1
/// when every compared word is within tolerance.
///
/// # Safety
/// `exp` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fh_compare(exp: *const FhExperiment, out_pass: *mut c_int, out_max_abs_diff: *mut f64) -> FhStatus {
    guard(|| {
        let e = get(exp, "exp")?;
        let pass = out(out_pass, "out_pass")?;
        let diff = out(out_max_abs_diff, "out_max_abs_diff")?;
        let (cmp, ..) = run_compare(&e.config).map_err(lib_err)?;
        *pass = c_int::from(cmp.pass);
        *diff = cmp.max_abs_diff;
        Ok(())
    })
}
