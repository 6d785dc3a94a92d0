//! C interface to `exitrate`.
//!
//! Every function returns an [`ExrStatus`]. On failure the message is kept per
//! thread and read with [`exr_last_error`]. Configurations are opaque
//! [`ExrConfig`] handles created from JSON text and released with
//! [`exr_config_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use exitrate::action::minimize_action;
use exitrate::config::{parse_config, RunConfig};
use exitrate::drift::Drift;
use exitrate::eig::{build_grid, linear_eigenpair};
use exitrate::hjb::solve_channels;
use exitrate::model::closed_loop;
use exitrate::pareto::{pareto_front, sweep, InvarianceScreen, SweepSetup};
use exitrate::run::{execute, Command, Overrides};
use exitrate::sde::{estimate_exit_rate, sample_exit_times, ExitProblem};
use exitrate::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Input = 4,
    Structural = 5,
    Domain = 6,
    Numeric = 7,
    NotConverged = 8,
    TailStarved = 9,
    EmptyGamma = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
    Other = 14,
}

/// Parsed and validated run configuration.
pub struct ExrConfig {
    inner: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn status_of(e: &Error) -> ExrStatus {
    match e.kind() {
        "config" => ExrStatus::Config,
        "input" | "usage" => ExrStatus::Input,
        "structural" | "ellipticity" => ExrStatus::Structural,
        "domain" => ExrStatus::Domain,
        "numeric" | "stencil" | "convention_violation" => ExrStatus::Numeric,
        "not_converged" => ExrStatus::NotConverged,
        "tail_starved" => ExrStatus::TailStarved,
        "empty_gamma" => ExrStatus::EmptyGamma,
        "io" => ExrStatus::Io,
        _ => ExrStatus::Other,
    }
}

struct Failure(ExrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ExrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ExrStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            ExrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ExrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(ExrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn config<'a>(cfg: *const ExrConfig) -> Result<&'a RunConfig, Failure> {
    cfg.as_ref().map(|c| &c.inner).ok_or_else(|| null("config"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Failure(ExrStatus::BufferTooSmall, format!("{what} holds {len} values, need {needed}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

fn candidate_index(cfg: &RunConfig, candidate: usize) -> Result<(), Failure> {
    if candidate >= cfg.candidates.len() {
        return Err(Failure(
            ExrStatus::Input,
            format!("candidate {candidate} out of range, configuration has {}", cfg.candidates.len()),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn exr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parse a JSON configuration. On success `*out` owns a new handle.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_config_from_json(json: *const c_char, out: *mut *mut ExrConfig) -> ExrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = parse_config(text(json, "json")?)?;
        *out = Box::into_raw(Box::new(ExrConfig { inner }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `cfg` must come from [`exr_config_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn exr_config_free(cfg: *mut ExrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exr_config_dim(cfg: *const ExrConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.inner.system.dim())
}

/// Number of control channels, or 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exr_config_channels(cfg: *const ExrConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.inner.system.channel_count())
}

/// Number of feedback candidates, or 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exr_config_candidates(cfg: *const ExrConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.inner.candidates.len())
}

/// Principal Dirichlet eigenvalue of the closed loop of `candidate` on the configured grid.
///
/// # Safety
/// `cfg` must be a live handle and `lambda` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_principal_eigenvalue(
    cfg: *const ExrConfig,
    candidate: usize,
    epsilon: f64,
    lambda: *mut f64,
) -> ExrStatus {
    guard(|| {
        let cfg = config(cfg)?;
        candidate_index(cfg, candidate)?;
        if lambda.is_null() {
            return Err(null("lambda"));
        }
        let grid = build_grid(&cfg.domain, &cfg.run.grid)?;
        let m = closed_loop(&cfg.system, &cfg.candidates[candidate])?;
        *lambda = linear_eigenpair(&m, &cfg.diffusion, epsilon, &grid)?.lambda;
        Ok(())
    })
}

/// Optimal exit rate of every channel for `candidate`, written to `rates[0..channels]`.
///
/// # Safety
/// `cfg` must be a live handle and `rates` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn exr_rate_vector(
    cfg: *const ExrConfig,
    candidate: usize,
    epsilon: f64,
    rates: *mut f64,
    len: usize,
) -> ExrStatus {
    guard(|| {
        let cfg = config(cfg)?;
        candidate_index(cfg, candidate)?;
        let out = out_slice(rates, len, cfg.system.channel_count(), "rates")?;
        let grid = Arc::new(build_grid(&cfg.domain, &cfg.run.grid)?);
        let sols = solve_channels(&cfg.system, &cfg.candidates[candidate], &cfg.controls, &cfg.diffusion, epsilon, &grid)?;
        for (o, s) in out.iter_mut().zip(&sols) {
            *o = s.lambda();
        }
        Ok(())
    })
}

/// Monte Carlo exit rate from the configured `x0` with the configured sample
/// count, step and time cap.
///
/// # Safety
/// `cfg` must be a live handle; `rate` and `stderr` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn exr_simulate_exit_rate(
    cfg: *const ExrConfig,
    candidate: usize,
    epsilon: f64,
    seed: u64,
    rate: *mut f64,
    stderr: *mut f64,
) -> ExrStatus {
    guard(|| {
        let cfg = config(cfg)?;
        candidate_index(cfg, candidate)?;
        if rate.is_null() || stderr.is_null() {
            return Err(null("rate or stderr"));
        }
        let drift = Drift::Linear(closed_loop(&cfg.system, &cfg.candidates[candidate])?);
        let problem = ExitProblem {
            drift: &drift,
            diffusion: &cfg.diffusion,
            epsilon,
            domain: &cfg.domain,
            dt: cfg.run.dt,
            t_max: cfg.run.t_max,
        };
        let samples = sample_exit_times(&problem, &cfg.run.x0, cfg.run.samples, seed)?;
        let est = estimate_exit_rate(&samples, None)?;
        *rate = est.rate;
        *stderr = est.stderr;
        Ok(())
    })
}

/// Minimal confined action from the configured `x0` over `[0, horizon]` with `steps` steps.
///
/// # Safety
/// `cfg` must be a live handle and `value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn exr_minimize_action(
    cfg: *const ExrConfig,
    candidate: usize,
    horizon: f64,
    steps: usize,
    value: *mut f64,
) -> ExrStatus {
    guard(|| {
        let cfg = config(cfg)?;
        candidate_index(cfg, candidate)?;
        if value.is_null() {
            return Err(null("value"));
        }
        let m = closed_loop(&cfg.system, &cfg.candidates[candidate])?;
        *value = minimize_action(&cfg.run.x0, horizon, steps, &m, &cfg.diffusion, &cfg.domain)?.value;
        Ok(())
    })
}

/// Candidate is on the non-dominated front.
pub const EXR_FRONT: u8 = 1;
/// Candidate is dominated by another.
pub const EXR_DOMINATED: u8 = 0;
/// Candidate failed the invariant-set screen; its rates are NaN.
pub const EXR_EXCLUDED: u8 = 2;

/// Rate vectors of all candidates (row-major, `candidates × channels`) and
/// one [`EXR_FRONT`]/[`EXR_DOMINATED`]/[`EXR_EXCLUDED`] flag per candidate.
///
/// # Safety
/// `cfg` must be a live handle; `rates` must hold `rates_len` doubles and
/// `flags` `flags_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn exr_pareto_front(
    cfg: *const ExrConfig,
    epsilon: f64,
    rates: *mut f64,
    rates_len: usize,
    flags: *mut u8,
    flags_len: usize,
) -> ExrStatus {
    guard(|| {
        let cfg = config(cfg)?;
        let n = cfg.candidates.len();
        let channels = cfg.system.channel_count();
        let rates = out_slice(rates, rates_len, n * channels, "rates")?;
        if flags.is_null() {
            return Err(null("flags"));
        }
        if flags_len < n {
            return Err(Failure(ExrStatus::BufferTooSmall, format!("flags holds {flags_len} bytes, need {n}")));
        }
        let flags = std::slice::from_raw_parts_mut(flags, n);
        let grid = Arc::new(build_grid(&cfg.domain, &cfg.run.grid)?);
        let setup = SweepSetup {
            system: &cfg.system,
            controls: &cfg.controls,
            diffusion: &cfg.diffusion,
            epsilon,
            domain: &cfg.domain,
            grid: &grid,
            screen: InvarianceScreen {
                resolution: cfg.run.invariance_grid.clone(),
                horizon_cap: cfg.run.horizon_cap,
                dt: 0.01,
            },
        };
        let mut outcome = sweep(&cfg.candidates, &setup)?;
        pareto_front(&mut outcome.records)?;
        rates.fill(f64::NAN);
        flags.fill(EXR_EXCLUDED);
        for r in &outcome.records {
            rates[r.id * channels..(r.id + 1) * channels].copy_from_slice(r.rates.values());
            flags[r.id] = if r.dominated { EXR_DOMINATED } else { EXR_FRONT };
        }
        Ok(())
    })
}

/// Run a CLI subcommand (`simulate`, `eig`, `hjb`, `action`, `asymptotics`,
/// `pareto`, `verify`) writing outputs under `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle; `command` and `out_dir` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn exr_run(
    cfg: *const ExrConfig,
    command: *const c_char,
    out_dir: *const c_char,
    seed: u64,
) -> ExrStatus {
    guard(|| {
        let cfg = config(cfg)?;
        let command: Command = text(command, "command")?.parse()?;
        let overrides = Overrides { seed: Some(seed), out: Some(PathBuf::from(text(out_dir, "out_dir")?)), epsilon: None };
        execute(command, cfg, &overrides)?;
        Ok(())
    })
}
