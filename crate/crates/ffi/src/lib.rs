//! C ABI over `fedq-core`.
//!
//! Handles are opaque pointers created by `fedq_*_new`-style constructors and
//! released with the matching `*_free`. Every fallible call returns a
//! [`FedqStatus`]; on failure a description is kept per thread and can be
//! copied out with [`fedq_last_error_message`]. Panics never cross the
//! boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedq_core::feddvr::{derive_params, run_fed_dvr, DvrRun, DvrSettings};
use fedq_core::fedsync::{run_sync, CommSchedule, StepSizeSchedule, SyncRunConfig};
use fedq_core::mdp::{build_experiment_mdp, build_hard_mdp, solve_q_star};
use fedq_core::sampling::RngPlan;
use fedq_core::{Error, TabularMdp};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidMdp = 3,
    OutOfBound = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque MDP handle.
pub struct FedqMdp {
    inner: TabularMdp,
}

/// Opaque result of a distributed variance-reduced run.
pub struct FedqDvrRun {
    inner: DvrRun,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FedqDvrSettings {
    pub eps: f64,
    pub delta: f64,
    pub eta: f64,
    pub num_agents: usize,
    /// Fraction of coordinates per upload; 1 sends all of them.
    pub alpha: f64,
    pub scale_l: f64,
    pub scale_b: f64,
    pub min_recentering: u64,
    pub min_batch: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedqCommKind {
    EveryStep = 0,
    FinalOnly = 1,
    Periodic = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FedqSyncSettings {
    pub total_steps: u64,
    pub batch_size: usize,
    pub num_agents: usize,
    /// Constant step size when positive; otherwise `c_eta` selects the
    /// rescaled linear schedule.
    pub eta: f64,
    pub c_eta: f64,
    pub comm: FedqCommKind,
    /// Averaging period for `FEDQ_COMM_KIND_PERIODIC`.
    pub period: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FedqLedger {
    pub rounds: u64,
    pub bits_per_agent: u64,
    pub samples_per_agent_per_sa: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FedqEpochReport {
    pub epoch: usize,
    /// Sup-norm error against `Q*` (the run always solves for it).
    pub error: f64,
    pub samples_per_agent_per_sa: u64,
    pub rounds: u64,
    pub bits_per_agent: u64,
    pub max_compressor_input: f64,
    pub bound: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> FedqStatus {
    if err.is_out_of_bound() {
        FedqStatus::OutOfBound
    } else {
        match err {
            Error::InvalidMdp(_) | Error::InvalidRow { .. } | Error::Json(_) => FedqStatus::InvalidMdp,
            Error::Io(_) => FedqStatus::Io,
            _ => FedqStatus::InvalidArgument,
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FedqStatus, String)>) -> FedqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedqStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FedqStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (FedqStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FedqStatus, String) {
    (FedqStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (FedqStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), (FedqStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_into(src: &[f64], buf: *mut f64, len: usize) -> Result<(), (FedqStatus, String)> {
    if buf.is_null() {
        return Err(null("buf"));
    }
    if len < src.len() {
        return Err((
            FedqStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} are needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn fedq_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Four-state hard instance with one copy and two actions in state 1.
#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_new_hard(gamma: f64, out: *mut *mut FedqMdp) -> FedqStatus {
    guard(|| {
        let inst = build_hard_mdp(gamma, 1, 2).map_err(core_err)?;
        write_out(out, FedqMdp { inner: inst.mdp })
    })
}

/// Three-state, two-action instance with self-loop probability `p`.
#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_new_experiment(gamma: f64, p: f64, out: *mut *mut FedqMdp) -> FedqStatus {
    guard(|| {
        let mdp = build_experiment_mdp(gamma, p).map_err(core_err)?;
        write_out(out, FedqMdp { inner: mdp })
    })
}

/// Parses an MDP from a NUL-terminated JSON document.
#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_from_json(json: *const c_char, out: *mut *mut FedqMdp) -> FedqStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| (FedqStatus::InvalidArgument, format!("json is not UTF-8: {e}")))?;
        let mdp = TabularMdp::from_json_str(text).map_err(core_err)?;
        write_out(out, FedqMdp { inner: mdp })
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_free(mdp: *mut FedqMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_num_states(mdp: *const FedqMdp) -> usize {
    mdp.as_ref().map_or(0, |m| m.inner.num_states())
}

#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_num_actions(mdp: *const FedqMdp) -> usize {
    mdp.as_ref().map_or(0, |m| m.inner.num_actions())
}

#[no_mangle]
pub unsafe extern "C" fn fedq_mdp_gamma(mdp: *const FedqMdp) -> f64 {
    mdp.as_ref().map_or(f64::NAN, |m| m.inner.gamma())
}

/// Writes `Q*` (row-major by state, `num_states * num_actions` values) into `q_out`.
#[no_mangle]
pub unsafe extern "C" fn fedq_solve(mdp: *const FedqMdp, tol: f64, q_out: *mut f64, len: usize) -> FedqStatus {
    guard(|| {
        let mdp = deref(mdp, "mdp")?;
        let report = solve_q_star(&mdp.inner, tol).map_err(core_err)?;
        copy_into(report.q_star.as_slice(), q_out, len)
    })
}

/// Prescribed constants (no scaling, no floors, `alpha = 1`).
#[no_mangle]
pub extern "C" fn fedq_dvr_settings_default(eps: f64, delta: f64, eta: f64, num_agents: usize) -> FedqDvrSettings {
    FedqDvrSettings {
        eps,
        delta,
        eta,
        num_agents,
        alpha: 1.0,
        scale_l: 1.0,
        scale_b: 1.0,
        min_recentering: 1,
        min_batch: 1,
    }
}

/// Runs every epoch from `Q = 0`; the result owns per-epoch reports and the final table.
#[no_mangle]
pub unsafe extern "C" fn fedq_dvr_run(
    mdp: *const FedqMdp,
    settings: *const FedqDvrSettings,
    seed: u64,
    out: *mut *mut FedqDvrRun,
) -> FedqStatus {
    guard(|| {
        let mdp = &deref(mdp, "mdp")?.inner;
        let s = *deref(settings, "settings")?;
        let params = derive_params(&DvrSettings {
            alpha: s.alpha,
            scale_l: s.scale_l,
            scale_b: s.scale_b,
            min_recentering: s.min_recentering,
            min_batch: s.min_batch,
            ..DvrSettings::new(mdp.gamma(), s.eps, s.delta, s.num_agents, s.eta, mdp.num_state_actions())
        })
        .map_err(core_err)?;
        let q_star = solve_q_star(mdp, 1e-12).map_err(core_err)?.q_star;
        let run = run_fed_dvr(mdp, &params, &RngPlan::new(seed), Some(&q_star)).map_err(core_err)?;
        write_out(out, FedqDvrRun { inner: run })
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedq_dvr_run_free(run: *mut FedqDvrRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

#[no_mangle]
pub unsafe extern "C" fn fedq_dvr_run_num_epochs(run: *const FedqDvrRun) -> usize {
    run.as_ref().map_or(0, |r| r.inner.reports.len())
}

/// Report of epoch `index` (0-based; the report's own `epoch` field is 1-based).
#[no_mangle]
pub unsafe extern "C" fn fedq_dvr_run_epoch(
    run: *const FedqDvrRun,
    index: usize,
    out: *mut FedqEpochReport,
) -> FedqStatus {
    guard(|| {
        let run = deref(run, "run")?;
        let r = run.inner.reports.get(index).ok_or_else(|| {
            (
                FedqStatus::InvalidArgument,
                format!("epoch index {index} out of range ({} epochs)", run.inner.reports.len()),
            )
        })?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = FedqEpochReport {
            epoch: r.epoch,
            error: r.error.unwrap_or(f64::NAN),
            samples_per_agent_per_sa: r.samples_per_agent_per_sa,
            rounds: r.rounds,
            bits_per_agent: r.bits_per_agent,
            max_compressor_input: r.max_compressor_input,
            bound: r.bound,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedq_dvr_run_ledger(run: *const FedqDvrRun, out: *mut FedqLedger) -> FedqStatus {
    guard(|| {
        let l = deref(run, "run")?.inner.ledger;
        *out.as_mut().ok_or_else(|| null("out"))? = FedqLedger {
            rounds: l.rounds,
            bits_per_agent: l.bits_per_agent,
            samples_per_agent_per_sa: l.samples_per_agent_per_sa,
        };
        Ok(())
    })
}

/// Final Q-table of the run, row-major by state.
#[no_mangle]
pub unsafe extern "C" fn fedq_dvr_run_q(run: *const FedqDvrRun, buf: *mut f64, len: usize) -> FedqStatus {
    guard(|| copy_into(deref(run, "run")?.inner.q.as_slice(), buf, len))
}

/// Intermittent-communication run; reports agent 0's final error and the ledger.
#[no_mangle]
pub unsafe extern "C" fn fedq_sync_run(
    mdp: *const FedqMdp,
    settings: *const FedqSyncSettings,
    seed: u64,
    final_error: *mut f64,
    ledger: *mut FedqLedger,
) -> FedqStatus {
    guard(|| {
        let mdp = &deref(mdp, "mdp")?.inner;
        let s = *deref(settings, "settings")?;
        let comm = match s.comm {
            FedqCommKind::EveryStep => CommSchedule::every_step(s.total_steps),
            FedqCommKind::FinalOnly => CommSchedule::final_only(s.total_steps),
            FedqCommKind::Periodic => CommSchedule::periodic(s.period, s.total_steps).map_err(core_err)?,
        };
        let step_size = if s.eta > 0.0 {
            StepSizeSchedule::Constant { eta: s.eta }
        } else {
            StepSizeSchedule::RescaledLinear { c_eta: s.c_eta }
        };
        let cfg = SyncRunConfig {
            total_steps: s.total_steps,
            batch_size: s.batch_size,
            num_agents: s.num_agents,
            step_size,
            comm,
            seed: RngPlan::new(seed),
            bits_per_real: 64,
        };
        let q_star = solve_q_star(mdp, 1e-12).map_err(core_err)?.q_star;
        let record = run_sync(mdp, &cfg, &q_star, &[s.total_steps]).map_err(core_err)?;
        let last = record.last().ok_or_else(|| (FedqStatus::InvalidArgument, "empty run".to_string()))?;
        if let Some(e) = final_error.as_mut() {
            *e = last.agent_error;
        }
        if let Some(l) = ledger.as_mut() {
            *l = FedqLedger {
                rounds: last.rounds,
                bits_per_agent: last.bits_per_agent,
                samples_per_agent_per_sa: last.samples_per_agent,
            };
        }
        Ok(())
    })
}
