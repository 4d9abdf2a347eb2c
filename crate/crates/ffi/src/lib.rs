//! C ABI over the scenario runner and the expression engine.
//!
//! Every fallible function returns an [`StStatus`]; on failure the message is available
//! from [`st_last_error`] on the same thread. Handles are opaque and must be released
//! with the matching `*_free` function. Strings returned through `char **` outputs are
//! owned by the caller and released with [`st_string_free`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use supertransport::scenario::{run, RunError, RunOptions, Scenario, Suite};
use supertransport::ScalarExpr;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Scenario document or option is invalid.
    Config = 3,
    /// A check could not be evaluated.
    Runtime = 4,
    /// Expression syntax error.
    Parse = 5,
    /// Expression evaluation failed.
    Eval = 6,
    /// Internal panic caught at the boundary.
    Panic = 7,
}

/// Opaque validated scenario.
pub struct StScenario {
    inner: Scenario,
}

/// Opaque scalar expression.
pub struct StExpr {
    inner: ScalarExpr,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: StStatus, msg: impl Into<String>) -> StStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> StStatus) -> StStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(StStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, StStatus> {
    if p.is_null() {
        return Err(fail(StStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(StStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

fn run_error(e: RunError) -> StStatus {
    let status = match e {
        RunError::Config(_) => StStatus::Config,
        RunError::Runtime { .. } => StStatus::Runtime,
    };
    fail(status, e.to_string())
}

/// Message of the last failure on this thread. Valid until the next call on the thread.
#[no_mangle]
pub extern "C" fn st_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a scenario document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn st_scenario_from_json(json: *const c_char, out: *mut *mut StScenario) -> StStatus {
    guard(|| {
        if out.is_null() {
            return fail(StStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let text = match read_str(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::from_json(text) {
            Ok(sc) => {
                *out = Box::into_raw(Box::new(StScenario { inner: sc }));
                StStatus::Ok
            }
            Err(e) => run_error(e),
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn st_scenario_from_file(path: *const c_char, out: *mut *mut StScenario) -> StStatus {
    guard(|| {
        if out.is_null() {
            return fail(StStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let p = match read_str(path, "path") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::from_file(Path::new(p)) {
            Ok(sc) => {
                *out = Box::into_raw(Box::new(StScenario { inner: sc }));
                StStatus::Ok
            }
            Err(e) => run_error(e),
        }
    })
}

/// # Safety
/// `sc` must be NULL or a handle from `st_scenario_from_*` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn st_scenario_free(sc: *mut StScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// Runs `suite` (`check-flat`, `transport`, …, `all`) and returns the JSON report.
/// `*all_pass` is set to 1 when every check passed and 0 otherwise.
///
/// # Safety
/// `sc` must be a live scenario handle, `suite` a NUL-terminated string, and
/// `report_json` and `all_pass` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn st_run(
    sc: *const StScenario,
    suite: *const c_char,
    seed: u64,
    report_json: *mut *mut c_char,
    all_pass: *mut i32,
) -> StStatus {
    guard(|| {
        if sc.is_null() || report_json.is_null() || all_pass.is_null() {
            return fail(StStatus::NullPointer, "scenario, report_json and all_pass must be non-NULL");
        }
        *report_json = ptr::null_mut();
        *all_pass = 0;
        let name = match read_str(suite, "suite") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let suite: Suite = match name.parse() {
            Ok(s) => s,
            Err(e) => return run_error(e),
        };
        match run(&(*sc).inner, suite, &RunOptions { seed }) {
            Ok(out) => {
                *all_pass = i32::from(out.all_pass());
                *report_json = into_c_string(out.to_json());
                StStatus::Ok
            }
            Err(e) => run_error(e),
        }
    })
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn st_expr_parse(text: *const c_char, out: *mut *mut StExpr) -> StStatus {
    guard(|| {
        if out.is_null() {
            return fail(StStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let t = match read_str(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ScalarExpr::parse(t) {
            Ok(e) => {
                *out = Box::into_raw(Box::new(StExpr { inner: e }));
                StStatus::Ok
            }
            Err(e) => fail(StStatus::Parse, e.to_string()),
        }
    })
}

/// Evaluates at the point `names[i] = values[i]`, `i < n`.
///
/// # Safety
/// `expr` must be a live handle; `names` and `values` must point to `n` entries
/// (they may be NULL when `n == 0`); `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn st_expr_eval(
    expr: *const StExpr,
    names: *const *const c_char,
    values: *const f64,
    n: usize,
    out: *mut f64,
) -> StStatus {
    guard(|| {
        if expr.is_null() || out.is_null() || (n > 0 && (names.is_null() || values.is_null())) {
            return fail(StStatus::NullPointer, "expr, out, names and values must be non-NULL");
        }
        let mut env = HashMap::with_capacity(n);
        for i in 0..n {
            let name = match read_str(*names.add(i), "variable name") {
                Ok(t) => t,
                Err(s) => return s,
            };
            env.insert(name.to_string(), *values.add(i));
        }
        match (*expr).inner.eval(&env) {
            Ok(v) => {
                *out = v;
                StStatus::Ok
            }
            Err(e) => fail(StStatus::Eval, e.to_string()),
        }
    })
}

/// Partial derivative with respect to `var`, as a new handle.
///
/// # Safety
/// `expr` must be a live handle, `var` a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn st_expr_diff(expr: *const StExpr, var: *const c_char, out: *mut *mut StExpr) -> StStatus {
    guard(|| {
        if expr.is_null() || out.is_null() {
            return fail(StStatus::NullPointer, "expr and out must be non-NULL");
        }
        *out = ptr::null_mut();
        let v = match read_str(var, "var") {
            Ok(t) => t,
            Err(s) => return s,
        };
        *out = Box::into_raw(Box::new(StExpr { inner: (*expr).inner.diff(v) }));
        StStatus::Ok
    })
}

/// Canonical text of the expression; free with [`st_string_free`].
///
/// # Safety
/// `expr` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn st_expr_to_string(expr: *const StExpr, out: *mut *mut c_char) -> StStatus {
    guard(|| {
        if expr.is_null() || out.is_null() {
            return fail(StStatus::NullPointer, "expr and out must be non-NULL");
        }
        *out = into_c_string((*expr).inner.to_string());
        StStatus::Ok
    })
}

/// # Safety
/// `expr` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn st_expr_free(expr: *mut StExpr) {
    if !expr.is_null() {
        drop(Box::from_raw(expr));
    }
}
