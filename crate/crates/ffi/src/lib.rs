//! C interface to `impflow`.
//!
//! Conventions:
//!
//! - Every fallible function returns an [`ImpflowStatus`]; results go through
//!   out-pointers, which are written only on success.
//! - Objects are opaque handles created by `*_read`/`*_from_*`/`*_estimate`
//!   functions and released with the matching `*_free` (which accepts NULL).
//! - On failure, [`impflow_last_error`] returns a message for the calling
//!   thread, valid until the next call into this library on that thread.
//! - Paths are NUL-terminated UTF-8.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use impflow::flow::{
    coarse_grain_factor, compute_c_schedule, compute_observables, estimate_eigen, EigenReport, FlowObservables,
    Relevance,
};
use impflow::io::{read_summary_csv, read_trajectory, write_report, ReportDocument};
use impflow::scaling::{eval_scaling, fit_scaling, DensityErrorCurve, FitOptions, ScalingParams};
use impflow::trajectory::ImpTrajectory;
use impflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Dimension = 4,
    Format = 5,
    Io = 6,
    Runtime = 7,
    OutOfRange = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpflowRelevance {
    Relevant = 0,
    Marginal = 1,
    Irrelevant = 2,
    Undefined = 3,
}

impl From<Relevance> for ImpflowRelevance {
    fn from(r: Relevance) -> Self {
        match r {
            Relevance::Relevant => ImpflowRelevance::Relevant,
            Relevance::Marginal => ImpflowRelevance::Marginal,
            Relevance::Irrelevant => ImpflowRelevance::Irrelevant,
            Relevance::Undefined => ImpflowRelevance::Undefined,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpflowScalingParams {
    pub eps_np: f64,
    pub eps_up: f64,
    pub gamma: f64,
    pub p: f64,
}

impl From<ImpflowScalingParams> for ScalingParams {
    fn from(p: ImpflowScalingParams) -> Self {
        ScalingParams {
            eps_np: p.eps_np,
            eps_up: p.eps_up,
            gamma: p.gamma,
            p: p.p,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpflowFitResult {
    pub params: ImpflowScalingParams,
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Opaque trajectory handle.
pub struct ImpflowTrajectory(ImpTrajectory);

/// Opaque per-group observables handle.
pub struct ImpflowObservables(FlowObservables);

/// Opaque eigen report handle.
pub struct ImpflowReport(EigenReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(ImpflowStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Argument(_) => ImpflowStatus::InvalidArgument,
            Error::Domain(_) => ImpflowStatus::Domain,
            Error::Dimension(_) => ImpflowStatus::Dimension,
            Error::Format(_) => ImpflowStatus::Format,
            Error::Io { .. } => ImpflowStatus::Io,
            Error::Divergence { .. } | Error::LayerCollapse { .. } => ImpflowStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: ImpflowStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic for [`impflow_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ImpflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            ImpflowStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            ImpflowStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(ImpflowStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(ImpflowStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(ImpflowStatus::NullPointer, format!("{what} is NULL")))
}

fn out<T>(p: *mut T, what: &str) -> Result<*mut T, Failure> {
    if p.is_null() {
        Err(fail(ImpflowStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(p)
    }
}

/// Message describing the last failure on this thread (empty after success).
#[no_mangle]
pub extern "C" fn impflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn impflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a trajectory directory (`manifest.json` plus `round_<n>.bin`).
#[no_mangle]
pub unsafe extern "C" fn impflow_trajectory_read(dir: *const c_char, result: *mut *mut ImpflowTrajectory) -> ImpflowStatus {
    guard(|| {
        let result = out(result, "result")?;
        let t = read_trajectory(path_arg(dir, "dir")?)?;
        *result = Box::into_raw(Box::new(ImpflowTrajectory(t)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_trajectory_round_count(t: *const ImpflowTrajectory, count: *mut usize) -> ImpflowStatus {
    guard(|| {
        let count = out(count, "count")?;
        *count = handle(t, "trajectory")?.0.rounds.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_trajectory_free(t: *mut ImpflowTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

#[no_mangle]
pub unsafe extern "C" fn impflow_observables_from_trajectory(
    t: *const ImpflowTrajectory,
    result: *mut *mut ImpflowObservables,
) -> ImpflowStatus {
    guard(|| {
        let result = out(result, "result")?;
        let obs = compute_observables(&handle(t, "trajectory")?.0)?;
        *result = Box::into_raw(Box::new(ImpflowObservables(obs)));
        Ok(())
    })
}

/// Builds observables from a summary CSV; `x_schedule` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn impflow_observables_from_summary(
    summary: *const c_char,
    x_schedule: *const c_char,
    result: *mut *mut ImpflowObservables,
) -> ImpflowStatus {
    guard(|| {
        let result = out(result, "result")?;
        let sidecar = if x_schedule.is_null() {
            None
        } else {
            Some(path_arg(x_schedule, "x_schedule")?)
        };
        let obs = read_summary_csv(path_arg(summary, "summary")?, sidecar.as_deref())?;
        *result = Box::into_raw(Box::new(ImpflowObservables(obs)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_observables_shape(
    obs: *const ImpflowObservables,
    groups: *mut usize,
    rounds: *mut usize,
) -> ImpflowStatus {
    guard(|| {
        let (g, r) = (out(groups, "groups")?, out(rounds, "rounds")?);
        let obs = &handle(obs, "observables")?.0;
        *g = obs.group_names.len();
        *r = obs.round_count();
        Ok(())
    })
}

/// Magnitude share `M` of `group` at `round`.
#[no_mangle]
pub unsafe extern "C" fn impflow_observables_m(
    obs: *const ImpflowObservables,
    group: usize,
    round: usize,
    value: *mut f64,
) -> ImpflowStatus {
    guard(|| {
        let value = out(value, "value")?;
        let obs = &handle(obs, "observables")?.0;
        *value = *obs
            .m
            .get(group)
            .and_then(|row| row.get(round))
            .ok_or_else(|| fail(ImpflowStatus::OutOfRange, format!("no cell ({group}, {round})")))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_observables_free(obs: *mut ImpflowObservables) {
    if !obs.is_null() {
        drop(Box::from_raw(obs));
    }
}

/// Estimates per-group exponents from the magnitude shares, using the
/// sparsification schedule carried by the observables.
#[no_mangle]
pub unsafe extern "C" fn impflow_eigen_estimate(
    obs: *const ImpflowObservables,
    band: f64,
    result: *mut *mut ImpflowReport,
) -> ImpflowStatus {
    guard(|| {
        let result = out(result, "result")?;
        let obs = &handle(obs, "observables")?.0;
        let c = compute_c_schedule(&obs.x_schedule)?;
        let report = estimate_eigen(obs, &c, band)?;
        *result = Box::into_raw(Box::new(ImpflowReport(report)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_report_group_count(r: *const ImpflowReport, count: *mut usize) -> ImpflowStatus {
    guard(|| {
        let count = out(count, "count")?;
        *count = handle(r, "report")?.0.groups.len();
        Ok(())
    })
}

/// Mean exponent and its standard error for `group`; NaN where undefined.
#[no_mangle]
pub unsafe extern "C" fn impflow_report_sigma(
    r: *const ImpflowReport,
    group: usize,
    mean: *mut f64,
    sem: *mut f64,
) -> ImpflowStatus {
    guard(|| {
        let (mean, sem) = (out(mean, "mean")?, out(sem, "sem")?);
        let g = handle(r, "report")?
            .0
            .groups
            .get(group)
            .ok_or_else(|| fail(ImpflowStatus::OutOfRange, format!("no group {group}")))?;
        *mean = g.sigma_mean.unwrap_or(f64::NAN);
        *sem = g.sigma_sem.unwrap_or(f64::NAN);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_report_label(
    r: *const ImpflowReport,
    group: usize,
    label: *mut ImpflowRelevance,
) -> ImpflowStatus {
    guard(|| {
        let label = out(label, "label")?;
        let g = handle(r, "report")?
            .0
            .groups
            .get(group)
            .ok_or_else(|| fail(ImpflowStatus::OutOfRange, format!("no group {group}")))?;
        *label = g.label.into();
        Ok(())
    })
}

/// Writes the report as deterministic JSON.
#[no_mangle]
pub unsafe extern "C" fn impflow_report_write_json(r: *const ImpflowReport, path: *const c_char) -> ImpflowStatus {
    guard(|| {
        let report = handle(r, "report")?.0.clone();
        write_report(&ReportDocument::Eigen(report), path_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_report_free(r: *mut ImpflowReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Coarse-graining factor `1/(1 - x)` for a sparsification fraction in (0, 1).
#[no_mangle]
pub unsafe extern "C" fn impflow_coarse_grain_factor(x: f64, c: *mut f64) -> ImpflowStatus {
    guard(|| {
        let c = out(c, "c")?;
        *c = coarse_grain_factor(x)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn impflow_scaling_eval(params: ImpflowScalingParams, d: f64, value: *mut f64) -> ImpflowStatus {
    guard(|| {
        let value = out(value, "value")?;
        *value = eval_scaling(&params.into(), d)?;
        Ok(())
    })
}

/// Fits the scaling law to `n` points with default bounds; `starts` is the
/// multi-start count (0 selects the default).
#[no_mangle]
pub unsafe extern "C" fn impflow_scaling_fit(
    densities: *const f64,
    errors: *const f64,
    n: usize,
    dense_error: f64,
    starts: usize,
    log_space: bool,
    result: *mut ImpflowFitResult,
) -> ImpflowStatus {
    guard(|| {
        let result = out(result, "result")?;
        if densities.is_null() || errors.is_null() {
            return Err(fail(ImpflowStatus::NullPointer, "densities or errors is NULL"));
        }
        let d = std::slice::from_raw_parts(densities, n);
        let e = std::slice::from_raw_parts(errors, n);
        let curve = DensityErrorCurve::new(d.iter().copied().zip(e.iter().copied()).collect(), dense_error)?;
        let defaults = FitOptions::default();
        let options = FitOptions {
            starts: if starts == 0 { defaults.starts } else { starts },
            log_space,
            ..defaults
        };
        let fit = fit_scaling(&curve, &options)?;
        *result = ImpflowFitResult {
            params: ImpflowScalingParams {
                eps_np: fit.params.eps_np,
                eps_up: fit.params.eps_up,
                gamma: fit.params.gamma,
                p: fit.params.p,
            },
            rms_residual: fit.rms_residual,
            iterations: fit.iterations,
            converged: fit.converged,
        };
        Ok(())
    })
}
