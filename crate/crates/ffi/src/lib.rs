//! C ABI over the driftguard simulator.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every fallible call returns a [`DgStatus`]; on failure the
//! message is available from [`dg_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use driftguard::experiment::{render_summary, run_experiment, run_matrix, steps_csv, ExperimentConfig, RunOutput};
use driftguard::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Config text, field values or shapes were rejected.
    Config = 3,
    /// The simulation itself failed.
    Run = 4,
    Io = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// A validated experiment configuration.
pub struct DgExperiment {
    cfg: ExperimentConfig,
}

/// Outputs of one run of the policy × seed matrix.
pub struct DgResults {
    outputs: Vec<RunOutput>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> DgStatus {
    match err {
        Error::Config(_) | Error::InvalidField { .. } | Error::Load { .. } | Error::Policy(_) => DgStatus::Config,
        Error::Io(_) => DgStatus::Io,
        _ => DgStatus::Run,
    }
}

fn fail(status: DgStatus, msg: impl Into<String>) -> DgStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> DgStatus) -> DgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DgStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, DgStatus> {
    if p.is_null() {
        return Err(fail(DgStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(DgStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn into_c_string(s: String, out: *mut *mut c_char) -> DgStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for null before building the string
            unsafe { *out = c.into_raw() };
            DgStatus::Ok
        }
        Err(_) => fail(DgStatus::Run, "output contains an interior NUL byte"),
    }
}

fn finish_experiment(cfg: driftguard::Result<ExperimentConfig>, out: *mut *mut DgExperiment) -> DgStatus {
    let cfg = match cfg.and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => return fail(status_of(&e), e.to_string()),
    };
    // SAFETY: callers check `out` for null first
    unsafe { *out = Box::into_raw(Box::new(DgExperiment { cfg })) };
    DgStatus::Ok
}

/// Parses and validates a TOML experiment config. Relative external data
/// paths resolve against the working directory.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_from_toml(toml: *const c_char, out: *mut *mut DgExperiment) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return fail(DgStatus::NullPointer, "out is null");
        }
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        finish_experiment(ExperimentConfig::from_toml(text), out)
    })
}

/// Loads a config file; relative external data paths resolve against the
/// file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_from_file(path: *const c_char, out: *mut *mut DgExperiment) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return fail(DgStatus::NullPointer, "out is null");
        }
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        finish_experiment(ExperimentConfig::load(Path::new(path)), out)
    })
}

/// Replaces the seed list.
///
/// # Safety
/// `exp` must come from this library; `seeds` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_set_seeds(exp: *mut DgExperiment, seeds: *const u64, n: usize) -> DgStatus {
    guard(|| {
        if exp.is_null() || seeds.is_null() {
            return fail(DgStatus::NullPointer, "null argument");
        }
        if n == 0 {
            return fail(DgStatus::Config, "seed list must not be empty");
        }
        (&mut *exp).cfg.seeds = std::slice::from_raw_parts(seeds, n).to_vec();
        DgStatus::Ok
    })
}

/// SHA-256 of the canonical config, as a newly allocated hex string.
///
/// # Safety
/// `exp` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_hash(exp: *const DgExperiment, out: *mut *mut c_char) -> DgStatus {
    guard(|| {
        if exp.is_null() || out.is_null() {
            return fail(DgStatus::NullPointer, "null argument");
        }
        into_c_string((&*exp).cfg.hash(), out)
    })
}

/// Runs every policy for every seed in memory.
///
/// # Safety
/// `exp` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_run(exp: *const DgExperiment, out: *mut *mut DgResults) -> DgStatus {
    guard(|| {
        if exp.is_null() || out.is_null() {
            return fail(DgStatus::NullPointer, "null argument");
        }
        match run_matrix(&(&*exp).cfg) {
            Ok(outputs) => {
                *out = Box::into_raw(Box::new(DgResults { outputs }));
                DgStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Runs the experiment and writes the full output tree under `dir`.
///
/// # Safety
/// `exp` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_write(exp: *const DgExperiment, dir: *const c_char) -> DgStatus {
    guard(|| {
        if exp.is_null() {
            return fail(DgStatus::NullPointer, "exp is null");
        }
        let dir = match read_str(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match run_experiment(&(&*exp).cfg, Path::new(dir)) {
            Ok(_) => DgStatus::Ok,
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `exp` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_experiment_free(exp: *mut DgExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Number of runs, ordered seed-major then by configured policy.
///
/// # Safety
/// `res` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dg_results_len(res: *const DgResults) -> usize {
    if res.is_null() {
        0
    } else {
        (&*res).outputs.len()
    }
}

unsafe fn run_at<'a>(res: *const DgResults, index: usize) -> Result<&'a RunOutput, DgStatus> {
    if res.is_null() {
        return Err(fail(DgStatus::NullPointer, "results handle is null"));
    }
    (&*res)
        .outputs
        .get(index)
        .ok_or_else(|| fail(DgStatus::OutOfRange, format!("run index {index} out of range")))
}

/// Efficiency E = A / TC of run `index`; may be +inf when no retraining ran.
///
/// # Safety
/// `res` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_results_efficiency(res: *const DgResults, index: usize, out: *mut f64) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return fail(DgStatus::NullPointer, "out is null");
        }
        match run_at(res, index) {
            Ok(r) => {
                *out = r.report.metrics.efficiency;
                DgStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Mean accuracy and normalized total cost of run `index`.
///
/// # Safety
/// `res` must come from this library; `acc` and `cost` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dg_results_metrics(res: *const DgResults, index: usize, acc: *mut f64, cost: *mut f64) -> DgStatus {
    guard(|| {
        if acc.is_null() || cost.is_null() {
            return fail(DgStatus::NullPointer, "null output pointer");
        }
        match run_at(res, index) {
            Ok(r) => {
                *acc = r.report.metrics.mean_acc;
                *cost = r.report.metrics.total_cost;
                DgStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Run report of `index` as a newly allocated JSON string.
///
/// # Safety
/// `res` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_results_report_json(res: *const DgResults, index: usize, out: *mut *mut c_char) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return fail(DgStatus::NullPointer, "out is null");
        }
        let run = match run_at(res, index) {
            Ok(r) => r,
            Err(s) => return s,
        };
        match serde_json::to_string(&run.report) {
            Ok(s) => into_c_string(s, out),
            Err(e) => fail(DgStatus::Run, e.to_string()),
        }
    })
}

/// Cross-policy summary table as a newly allocated string.
///
/// # Safety
/// `res` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_results_summary(res: *const DgResults, out: *mut *mut c_char) -> DgStatus {
    guard(|| {
        if res.is_null() || out.is_null() {
            return fail(DgStatus::NullPointer, "null argument");
        }
        let reports: Vec<_> = (&*res).outputs.iter().map(|o| o.report.clone()).collect();
        into_c_string(render_summary(&reports), out)
    })
}

/// Per-step CSV of every run as a newly allocated string.
///
/// # Safety
/// `res` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dg_results_steps_csv(res: *const DgResults, out: *mut *mut c_char) -> DgStatus {
    guard(|| {
        if res.is_null() || out.is_null() {
            return fail(DgStatus::NullPointer, "null argument");
        }
        into_c_string(steps_csv(&(&*res).outputs), out)
    })
}

/// # Safety
/// `res` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_results_free(res: *mut DgResults) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be null or a string allocated by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn dg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
