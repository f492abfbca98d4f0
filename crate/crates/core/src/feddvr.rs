//! Federated distributionally variance-reduced Q-learning.
//!
//! The run is split into `K` epochs. Epoch `k` refines the previous estimate
//! `Q_bar` as follows:
//!
//! 1. Every agent averages `ceil(L_k / M)` empirical Bellman operators at
//!    `Q_bar` and uploads the quantized difference to `Q_bar`; the server
//!    averages the decoded differences into `T_L(Q_bar)`, an accurate
//!    estimate of `T Q_bar` (one round).
//! 2. Starting from `Q_0 = Q_bar`, `I` iterations follow. At iteration `i`
//!    each agent draws one size-`B` minibatch and evaluates it at both
//!    `Q_{i-1}` and `Q_bar`:
//!
//!    ```text
//!    Q_{i-1/2}^m = (1 - eta) Q_{i-1} + eta [T_i^m Q_{i-1} - T_i^m Q_bar + T_L(Q_bar)]
//!    Q_i         = Q_{i-1} + (1/M) sum_m C(Q_{i-1/2}^m - Q_{i-1}; D_k, J)
//!    ```
//!
//! Each epoch therefore costs exactly `I + 1` rounds, and every upload is a
//! `J`-bit-per-coordinate quantized vector whose range `D_k` halves per epoch.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::compression::{decode, index_bits, quantize, subsample_count, subsample_quantize, QuantizerConfig};
use crate::error::{Error, Result};
use crate::fedsync::{RunRecord, RunRow};
use crate::mdp::{QTable, TabularMdp};
use crate::metrics::CommLedger;
use crate::sampling::{EmpiricalKernel, Purpose, RngPlan, StreamKey};
use crate::util::ceil_snap;

/// Leading constant of the re-centering sample size.
pub const RECENTER_CONSTANT: f64 = 39_200.0;
/// Leading constant of the re-centering sample size in the subsampling variant.
pub const RECENTER_CONSTANT_SUBSAMPLED: f64 = 19_600.0;

/// Inputs from which every run parameter is derived.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DvrSettings {
    pub gamma: f64,
    pub eps: f64,
    pub delta: f64,
    pub num_agents: usize,
    pub eta: f64,
    pub num_state_actions: usize,
    /// Multiplier on the re-centering sample sizes (1 = prescribed constants).
    pub scale_l: f64,
    /// Multiplier on the minibatch size (1 = prescribed constants).
    pub scale_b: f64,
    /// Lower bound applied to every `L_k` after scaling.
    pub min_recentering: u64,
    /// Lower bound applied to `B` after scaling.
    pub min_batch: u64,
    /// Fraction of coordinates sent per message; 1 disables subsampling.
    pub alpha: f64,
}

impl DvrSettings {
    pub fn new(gamma: f64, eps: f64, delta: f64, num_agents: usize, eta: f64, num_state_actions: usize) -> Self {
        Self {
            gamma,
            eps,
            delta,
            num_agents,
            eta,
            num_state_actions,
            scale_l: 1.0,
            scale_b: 1.0,
            min_recentering: 1,
            min_batch: 1,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DvrParams {
    pub gamma: f64,
    pub num_agents: usize,
    pub num_state_actions: usize,
    /// `K`.
    pub num_epochs: usize,
    /// `K0 = ceil(log2(1 / (1 - gamma)) / 2)`.
    pub k0: usize,
    /// `I`.
    pub iters_per_epoch: u64,
    /// `B`.
    pub batch_size: u64,
    /// `J`.
    pub bits: u32,
    /// `L_1 .. L_K`.
    pub recentering_sizes: Vec<u64>,
    /// `D_1 .. D_K`.
    pub bounds: Vec<f64>,
    pub step: f64,
    pub target_eps: f64,
    pub confidence: f64,
    pub scale_l: f64,
    pub scale_b: f64,
    pub alpha: f64,
    /// `ln(8 K I |S||A| / delta)`.
    pub log_factor: f64,
}

/// Parameters of one call to [`refine_estimate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochParams {
    pub batch_size: u64,
    pub iters: u64,
    pub recentering_size: u64,
    pub bound: f64,
    pub bits: u32,
    pub eta: f64,
    pub alpha: f64,
}

fn half_log2_ceil(x: f64) -> usize {
    ceil_snap(0.5 * x.log2()).max(0.0) as usize
}

/// Derives `(K, K0, I, B, J, L_k, D_k)` from the target accuracy, failure
/// probability, number of agents and step size.
pub fn derive_params(s: &DvrSettings) -> Result<DvrParams> {
    let DvrSettings {
        gamma,
        eps,
        delta,
        num_agents,
        eta,
        num_state_actions,
        scale_l,
        scale_b,
        min_recentering,
        min_batch,
        alpha,
    } = *s;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::param("eps", format!("must lie in (0, 1], got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", format!("must lie in (0, 1), got {delta}")));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::param("eta", format!("must lie in (0, 1), got {eta}")));
    }
    if num_agents == 0 {
        return Err(Error::param("num_agents", "must be at least 1"));
    }
    if num_state_actions == 0 {
        return Err(Error::param("num_state_actions", "must be at least 1"));
    }
    if !(scale_l > 0.0 && scale_l.is_finite()) {
        return Err(Error::param("scale_l", format!("must be positive, got {scale_l}")));
    }
    if !(scale_b > 0.0 && scale_b.is_finite()) {
        return Err(Error::param("scale_b", format!("must be positive, got {scale_b}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param("alpha", format!("must lie in (0, 1], got {alpha}")));
    }

    let horizon = 1.0 / (1.0 - gamma);
    let k0 = half_log2_ceil(horizon);
    let num_epochs = k0 + half_log2_ceil(horizon / (eps * eps));
    let iters_per_epoch = ceil_snap(2.0 / (eta * (1.0 - gamma))) as u64;
    let m = num_agents as f64;
    let log_factor =
        (8.0 * num_epochs as f64 * iters_per_epoch as f64 * num_state_actions as f64 / delta).ln();

    let batch_raw = scale_b * (2.0 / m) * (12.0 * gamma / (1.0 - gamma)).powi(2) * log_factor;
    let batch_size = (ceil_snap(batch_raw) as u64).max(min_batch).max(1);

    let bits_raw = ((70.0 / (eta * (1.0 - gamma))) * ((4.0 / m) * log_factor).sqrt()).log2();
    let bits = ceil_snap(bits_raw).max(1.0);
    if bits > f64::from(crate::compression::MAX_BITS) {
        return Err(Error::param("bits", format!("derived J = {bits} exceeds the supported width")));
    }
    let bits = bits as u32;

    let lead = if alpha < 1.0 {
        RECENTER_CONSTANT_SUBSAMPLED / alpha
    } else {
        RECENTER_CONSTANT
    };
    let base = scale_l * lead * horizon * horizon * log_factor;
    let recentering_sizes = (1..=num_epochs)
        .map(|k| {
            let exponent = if k <= k0 { k } else { k - k0 };
            let raw = base * 4f64.powi(exponent as i32);
            (ceil_snap(raw) as u64).max(min_recentering).max(1)
        })
        .collect();
    let bounds = (1..=num_epochs)
        .map(|k| 16.0 * 0.5f64.powi(k as i32) * horizon)
        .collect();

    Ok(DvrParams {
        gamma,
        num_agents,
        num_state_actions,
        num_epochs,
        k0,
        iters_per_epoch,
        batch_size,
        bits,
        recentering_sizes,
        bounds,
        step: eta,
        target_eps: eps,
        confidence: delta,
        scale_l,
        scale_b,
        alpha,
        log_factor,
    })
}

impl DvrParams {
    /// Parameters of epoch `k` (1-based).
    pub fn epoch(&self, k: usize) -> EpochParams {
        EpochParams {
            batch_size: self.batch_size,
            iters: self.iters_per_epoch,
            recentering_size: self.recentering_sizes[k - 1],
            bound: self.bounds[k - 1],
            bits: self.bits,
            eta: self.step,
            alpha: self.alpha,
        }
    }

    /// Bits in one upload.
    pub fn message_bits(&self) -> u64 {
        message_bits(self.num_state_actions, self.bits, self.alpha)
    }

    /// `ceil(L_k / M) + I B`.
    pub fn epoch_samples(&self, k: usize) -> u64 {
        self.recentering_sizes[k - 1].div_ceil(self.num_agents as u64) + self.iters_per_epoch * self.batch_size
    }

    /// The ledger a complete run must produce.
    pub fn predicted_ledger(&self) -> CommLedger {
        let rounds = (self.iters_per_epoch + 1) * self.num_epochs as u64;
        CommLedger {
            rounds,
            bits_per_agent: rounds * self.message_bits(),
            samples_per_agent_per_sa: (1..=self.num_epochs).map(|k| self.epoch_samples(k)).sum(),
        }
    }

    fn log2_accuracy(&self) -> f64 {
        (1.0 / ((1.0 - self.gamma) * self.target_eps)).log2()
    }

    /// `16 / (eta (1 - gamma)) * log2(1 / ((1 - gamma) eps))`.
    pub fn round_bound(&self) -> f64 {
        16.0 / (self.step * (1.0 - self.gamma)) * self.log2_accuracy()
    }

    /// `32 |S||A| / (eta (1 - gamma)) * log2(1 / ((1 - gamma) eps)) * log2(70 / (eta (1 - gamma)) sqrt(4 log_factor / M))`.
    pub fn bit_bound(&self) -> f64 {
        let inner = (70.0 / (self.step * (1.0 - self.gamma)))
            * ((4.0 / self.num_agents as f64) * self.log_factor).sqrt();
        32.0 * self.num_state_actions as f64 / (self.step * (1.0 - self.gamma)) * self.log2_accuracy() * inner.log2()
    }

    /// Sample count up to the universal constant of the sample bound:
    /// `log2(1 / ((1 - gamma) eps)) log_factor / (eta M (1 - gamma)^3 eps^2)`.
    pub fn sample_bound_shape(&self) -> f64 {
        self.log2_accuracy() * self.log_factor
            / (self.step * self.num_agents as f64 * (1.0 - self.gamma).powi(3) * self.target_eps.powi(2))
    }
}

/// Bits per upload of an `n`-coordinate message.
pub fn message_bits(num_coordinates: usize, bits: u32, alpha: f64) -> u64 {
    if alpha < 1.0 {
        subsample_count(num_coordinates, alpha) as u64 * (u64::from(bits) + u64::from(index_bits(num_coordinates)))
    } else {
        u64::from(bits) * num_coordinates as u64
    }
}

/// Outcome of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// `||Q^(k) - Q*||_inf`, when `Q*` was supplied.
    pub error: Option<f64>,
    pub samples_per_agent_per_sa: u64,
    pub rounds: u64,
    pub bits_per_agent: u64,
    /// Largest sup-norm of any vector handed to the quantizer this epoch.
    pub max_compressor_input: f64,
    pub bound: f64,
}

impl EpochReport {
    pub fn ledger(&self) -> CommLedger {
        CommLedger {
            rounds: self.rounds,
            bits_per_agent: self.bits_per_agent,
            samples_per_agent_per_sa: self.samples_per_agent_per_sa,
        }
    }
}

/// What the server learns from one aggregation round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundStats {
    pub bits_per_agent: u64,
    pub max_compressor_input: f64,
}

struct Upload {
    decoded: Vec<f64>,
    bits: u64,
    input_norm: f64,
}

fn compress_upload<R: Rng + ?Sized>(diff: &[f64], cfg: &QuantizerConfig, alpha: f64, rng: &mut R) -> Result<Upload> {
    let norm = diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (msg, input_norm) = if alpha < 1.0 {
        (subsample_quantize(diff, cfg, alpha, rng)?, norm / alpha)
    } else {
        (quantize(diff, cfg, rng)?, norm)
    };
    Ok(Upload {
        decoded: decode(&msg, cfg, diff.len())?,
        bits: msg.bit_cost,
        input_norm,
    })
}

/// `base + (1/M) sum_m decoded_m`, summed in agent order.
fn aggregate(base: &QTable, uploads: &[Upload]) -> (QTable, RoundStats) {
    let mut out = base.clone();
    let m = uploads.len() as f64;
    let mut sum = vec![0.0; base.len()];
    for up in uploads {
        for (s, d) in sum.iter_mut().zip(&up.decoded) {
            *s += d;
        }
    }
    for (o, s) in out.as_mut_slice().iter_mut().zip(&sum) {
        *o += s / m;
    }
    let stats = RoundStats {
        bits_per_agent: uploads.iter().map(|u| u.bits).max().unwrap_or(0),
        max_compressor_input: uploads.iter().fold(0.0, |acc, u| acc.max(u.input_norm)),
    };
    (out, stats)
}

/// Collaborative estimate `T_L(q_bar)`: each agent averages `ceil(L/M)`
/// empirical operators at `q_bar` and uploads the quantized difference.
#[allow(clippy::too_many_arguments)]
pub fn estimate_recentered_operator(
    mdp: &TabularMdp,
    q_bar: &QTable,
    recentering_size: u64,
    num_agents: usize,
    cfg: &QuantizerConfig,
    alpha: f64,
    plan: &RngPlan,
    epoch: usize,
) -> Result<(QTable, RoundStats)> {
    if recentering_size == 0 {
        return Err(Error::param("recentering_size", "must be at least 1"));
    }
    if num_agents == 0 {
        return Err(Error::param("num_agents", "must be at least 1"));
    }
    q_bar.check_shape(mdp.num_states(), mdp.num_actions())?;
    let per_agent = recentering_size.div_ceil(num_agents as u64);
    let uploads = (0..num_agents)
        .into_par_iter()
        .map(|m| -> Result<Upload> {
            let mut rng = plan.stream(StreamKey::new(m, epoch, 0, Purpose::Recenter));
            let local = EmpiricalKernel::draw(mdp, per_agent, &mut rng)?.apply(mdp, q_bar)?;
            let diff: Vec<f64> = local
                .as_slice()
                .iter()
                .zip(q_bar.as_slice())
                .map(|(t, q)| t - q)
                .collect();
            let mut qrng = plan.stream(StreamKey::new(m, epoch, 0, Purpose::Quantize));
            compress_upload(&diff, cfg, alpha, &mut qrng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(q_bar, &uploads))
}

/// The bracketed update direction `T_i Q - T_i Q_bar + T_L(Q_bar)`, with both
/// operator evaluations sharing one minibatch.
pub fn variance_reduced_target(
    mdp: &TabularMdp,
    kernel: &EmpiricalKernel,
    q: &QTable,
    q_bar: &QTable,
    recentered: &QTable,
) -> Result<QTable> {
    let at_q = kernel.apply(mdp, q)?;
    let at_bar = kernel.apply(mdp, q_bar)?;
    let mut out = at_q;
    for ((o, b), t) in out
        .as_mut_slice()
        .iter_mut()
        .zip(at_bar.as_slice())
        .zip(recentered.as_slice())
    {
        *o = *o - b + t;
    }
    Ok(out)
}

/// One epoch: re-centering round followed by `I` variance-reduced rounds.
pub fn refine_estimate(
    mdp: &TabularMdp,
    q_bar: &QTable,
    ep: &EpochParams,
    num_agents: usize,
    plan: &RngPlan,
    epoch: usize,
    q_star: Option<&QTable>,
) -> Result<(QTable, EpochReport)> {
    if ep.batch_size == 0 || ep.iters == 0 {
        return Err(Error::param("epoch", "batch size and iteration count must be positive"));
    }
    let cfg = QuantizerConfig::new(ep.bound, ep.bits)?;
    let label = |round: u64| {
        move |e: Error| Error::Epoch {
            epoch,
            round: round as usize,
            source: Box::new(e),
        }
    };

    let (recentered, first) = estimate_recentered_operator(
        mdp,
        q_bar,
        ep.recentering_size,
        num_agents,
        &cfg,
        ep.alpha,
        plan,
        epoch,
    )
    .map_err(label(0))?;
    let mut bits = first.bits_per_agent;
    let mut max_input = first.max_compressor_input;

    let mut q = q_bar.clone();
    for i in 1..=ep.iters {
        let uploads = (0..num_agents)
            .into_par_iter()
            .map(|m| -> Result<Upload> {
                let mut rng = plan.stream(StreamKey::new(m, epoch, i, Purpose::Minibatch));
                let kernel = EmpiricalKernel::draw(mdp, ep.batch_size, &mut rng)?;
                let target = variance_reduced_target(mdp, &kernel, &q, q_bar, &recentered)?;
                // Q_{i-1/2} - Q_{i-1} = eta (target - Q_{i-1})
                let diff: Vec<f64> = target
                    .as_slice()
                    .iter()
                    .zip(q.as_slice())
                    .map(|(t, x)| ((1.0 - ep.eta) * x + ep.eta * t) - x)
                    .collect();
                let mut qrng = plan.stream(StreamKey::new(m, epoch, i, Purpose::Quantize));
                compress_upload(&diff, &cfg, ep.alpha, &mut qrng)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(label(i))?;
        let (next, stats) = aggregate(&q, &uploads);
        q = next;
        bits += stats.bits_per_agent;
        max_input = max_input.max(stats.max_compressor_input);
    }

    let per_agent_recenter = ep.recentering_size.div_ceil(num_agents as u64);
    let report = EpochReport {
        epoch,
        error: q_star.map(|qs| q.sup_distance(qs)),
        samples_per_agent_per_sa: per_agent_recenter + ep.iters * ep.batch_size,
        rounds: ep.iters + 1,
        bits_per_agent: bits,
        max_compressor_input: max_input,
        bound: ep.bound,
    };
    Ok((q, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DvrRun {
    pub q: QTable,
    pub reports: Vec<EpochReport>,
    pub ledger: CommLedger,
    /// `||0 - Q*||_inf`, the error before the first epoch.
    pub initial_error: Option<f64>,
}

impl DvrRun {
    /// Cumulative record with one row per epoch boundary (row 0 is the start).
    pub fn to_record(&self) -> RunRecord {
        let mut rows = Vec::with_capacity(self.reports.len() + 1);
        let mut ledger = CommLedger::default();
        let start = self.initial_error.unwrap_or(f64::NAN);
        rows.push(RunRow {
            step: 0,
            samples_per_agent: 0,
            agent_error: start,
            averaged_error: start,
            rounds: 0,
            bits_per_agent: 0,
        });
        for r in &self.reports {
            ledger.absorb(&r.ledger());
            let err = r.error.unwrap_or(f64::NAN);
            rows.push(RunRow {
                step: r.epoch as u64,
                samples_per_agent: ledger.samples_per_agent_per_sa,
                agent_error: err,
                averaged_error: err,
                rounds: ledger.rounds,
                bits_per_agent: ledger.bits_per_agent,
            });
        }
        RunRecord { rows }
    }

    /// Whether `||Q^(k) - Q*|| <= 2^-k / (1 - gamma)` held for every epoch.
    pub fn halving_holds(&self, gamma: f64) -> bool {
        let horizon = 1.0 / (1.0 - gamma);
        self.initial_error.is_some_and(|e| e <= horizon)
            && self
                .reports
                .iter()
                .all(|r| r.error.is_some_and(|e| e <= 0.5f64.powi(r.epoch as i32) * horizon))
    }
}

/// Runs all `K` epochs from `Q^(0) = 0`.
pub fn run_fed_dvr(mdp: &TabularMdp, params: &DvrParams, plan: &RngPlan, q_star: Option<&QTable>) -> Result<DvrRun> {
    if params.num_state_actions != mdp.num_state_actions() {
        return Err(Error::param(
            "num_state_actions",
            format!(
                "parameters were derived for {} state-action pairs, the MDP has {}",
                params.num_state_actions,
                mdp.num_state_actions()
            ),
        ));
    }
    if (params.gamma - mdp.gamma()).abs() > 1e-15 {
        return Err(Error::param("gamma", "parameters were derived for a different discount"));
    }
    let mut q = mdp.zero_q();
    let initial_error = q_star.map(|qs| q.sup_distance(qs));
    let mut reports = Vec::with_capacity(params.num_epochs);
    let mut ledger = CommLedger::default();
    for k in 1..=params.num_epochs {
        let (next, report) = refine_estimate(mdp, &q, &params.epoch(k), params.num_agents, plan, k, q_star)?;
        ledger.absorb(&report.ledger());
        q = next;
        reports.push(report);
    }
    Ok(DvrRun {
        q,
        reports,
        ledger,
        initial_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bellman_apply, build_experiment_mdp, solve_q_star};
    use approx::assert_abs_diff_eq;

    fn deterministic_mdp() -> TabularMdp {
        let next = [[1, 2], [2, 0], [0, 0]];
        let mut t = vec![0.0; 3 * 2 * 3];
        for s in 0..3 {
            for a in 0..2 {
                t[(s * 2 + a) * 3 + next[s][a]] = 1.0;
            }
        }
        TabularMdp::new(3, 2, 0.8, vec![0.1, 0.9, 0.5, 0.2, 1.0, 0.0], t).unwrap()
    }

    fn settings(gamma: f64, eps: f64, m: usize, n: usize) -> DvrSettings {
        DvrSettings::new(gamma, eps, 0.05, m, 0.5, n)
    }

    #[test]
    fn epoch_counts_and_iterations() {
        let p = derive_params(&settings(0.9, 0.1, 5, 6)).unwrap();
        assert_eq!(p.k0, 2);
        assert_eq!(p.num_epochs, 7);
        assert_eq!(p.iters_per_epoch, 40);
        assert_abs_diff_eq!(p.bounds[0], 80.0, epsilon = 1e-9);
        for w in p.bounds.windows(2) {
            assert_abs_diff_eq!(w[1], w[0] / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn prescribed_batch_bits_and_recentering() {
        // independent evaluation of the closed forms
        let (gamma, delta, m, n) = (0.9f64, 0.05, 5.0, 6.0);
        let (k, i) = (7.0f64, 40.0f64);
        let log_factor = (8.0 * k * i * n / delta).ln();
        let b = ((2.0 / m) * (12.0 * gamma / (1.0 - gamma)).powi(2) * log_factor).ceil() as u64;
        let j = ((70.0 / (0.5 * (1.0 - gamma))) * ((4.0 / m) * log_factor).sqrt()).log2().ceil() as u32;
        let p = derive_params(&settings(0.9, 0.1, 5, 6)).unwrap();
        assert_eq!(p.batch_size, b);
        assert_eq!(p.bits, j);
        let base = 39200.0 / (1.0 - gamma).powi(2) * log_factor;
        assert_eq!(p.recentering_sizes[0], (base * 4.0).ceil() as u64);
        assert_eq!(p.recentering_sizes[1], (base * 16.0).ceil() as u64);
        // second regime restarts at 4^(k - K0)
        assert_eq!(p.recentering_sizes[2], (base * 4.0).ceil() as u64);
        assert_eq!(p.recentering_sizes[6], (base * 4f64.powi(5)).ceil() as u64);
    }

    #[test]
    fn scale_knobs_and_floors() {
        let mut s = settings(0.8, 0.125, 4, 6);
        s.scale_l = 1.0 / 200.0;
        s.scale_b = 1.0 / 200.0;
        s.min_recentering = 50;
        s.min_batch = 4;
        let scaled = derive_params(&s).unwrap();
        let full = derive_params(&settings(0.8, 0.125, 4, 6)).unwrap();
        assert_eq!(scaled.num_epochs, full.num_epochs);
        assert_eq!(scaled.bits, full.bits);
        assert!(scaled.batch_size >= 4 && scaled.batch_size < full.batch_size);
        assert!(scaled.recentering_sizes.iter().all(|&l| l >= 50));
        s.scale_b = 1e-9;
        assert_eq!(derive_params(&s).unwrap().batch_size, 4);
    }

    #[test]
    fn parameter_validation() {
        let good = settings(0.9, 0.1, 5, 6);
        for bad in [
            DvrSettings { eps: 0.0, ..good },
            DvrSettings { eps: 1.5, ..good },
            DvrSettings { delta: 1.0, ..good },
            DvrSettings { eta: 1.0, ..good },
            DvrSettings { num_agents: 0, ..good },
            DvrSettings { gamma: 1.0, ..good },
            DvrSettings { alpha: 0.0, ..good },
            DvrSettings { scale_l: 0.0, ..good },
        ] {
            assert!(derive_params(&bad).is_err());
        }
    }

    #[test]
    fn subsampled_variant_changes_only_recentering_and_bits() {
        let base = derive_params(&settings(0.9, 0.1, 5, 6)).unwrap();
        let sub = derive_params(&DvrSettings {
            alpha: 0.5,
            ..settings(0.9, 0.1, 5, 6)
        })
        .unwrap();
        assert_eq!(sub.batch_size, base.batch_size);
        assert_eq!(sub.iters_per_epoch, base.iters_per_epoch);
        let ratio = sub.recentering_sizes[0] as f64 / base.recentering_sizes[0] as f64;
        assert_abs_diff_eq!(ratio, 1.0, epsilon = 1e-6); // 19600 / 0.5 == 39200
        assert_eq!(sub.message_bits(), 3 * (u64::from(sub.bits) + 3));
    }

    #[test]
    fn ledger_identities_hold_exactly() {
        let p = derive_params(&settings(0.9, 0.1, 5, 6)).unwrap();
        let ledger = p.predicted_ledger();
        assert_eq!(ledger.rounds, 287);
        assert_eq!(ledger.bits_per_agent, u64::from(p.bits) * 6 * 287);
        assert!(ledger.rounds as f64 <= p.round_bound());
        assert!(ledger.bits_per_agent as f64 <= p.bit_bound());
    }

    #[test]
    fn recentering_sample_term_scales_as_one_over_m() {
        let lk = 1_000_003u64;
        for m in [1u64, 2, 4, 8] {
            let per = lk.div_ceil(m);
            assert!(per * m >= lk && per * m < lk + m);
        }
    }

    #[test]
    fn recentered_operator_on_noiseless_mdp() {
        let mdp = deterministic_mdp();
        let q_bar = QTable::from_values(3, 2, vec![1.0, 0.4, 2.0, 0.0, 3.0, 1.5]).unwrap();
        let cfg = QuantizerConfig::new(20.0, 30).unwrap();
        let (t, stats) =
            estimate_recentered_operator(&mdp, &q_bar, 6, 3, &cfg, 1.0, &RngPlan::new(3), 1).unwrap();
        let exact = bellman_apply(&mdp, &q_bar).unwrap();
        assert!(t.sup_distance(&exact) <= cfg.spacing());
        assert_eq!(stats.bits_per_agent, 30 * 6);
    }

    #[test]
    fn recentered_operator_is_unbiased() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let q_bar = QTable::from_values(3, 2, vec![0.3, 0.1, 2.0, 3.0, 1.0, 0.5]).unwrap();
        let exact = bellman_apply(&mdp, &q_bar).unwrap();
        let cfg = QuantizerConfig::new(1e3, 30).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        for rep in 0..n {
            let (t, _) =
                estimate_recentered_operator(&mdp, &q_bar, 1, 1, &cfg, 1.0, &RngPlan::new(rep), 1).unwrap();
            for (i, v) in t.as_slice().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..6 {
            let mean = sum[i] / n as f64;
            let se = ((sq[i] / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
            assert!((mean - exact.as_slice()[i]).abs() <= 4.0 * se + 1e-9);
        }
    }

    #[test]
    fn coupling_cancels_at_the_anchor() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let q = QTable::from_values(3, 2, vec![0.3, 0.1, 2.0, 3.0, 1.0, 0.5]).unwrap();
        let recentered = QTable::from_values(3, 2, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let mut rng = RngPlan::new(1).stream(StreamKey::new(0, 0, 0, Purpose::Auxiliary));
        let kernel = EmpiricalKernel::draw(&mdp, 7, &mut rng).unwrap();
        let target = variance_reduced_target(&mdp, &kernel, &q, &q, &recentered).unwrap();
        assert_eq!(target, recentered);
    }

    #[test]
    fn noiseless_epoch_tracks_bellman_iterates() {
        let mdp = deterministic_mdp();
        let q_bar = QTable::from_values(3, 2, vec![1.0, 0.4, 2.0, 0.0, 3.0, 1.5]).unwrap();
        let ep = EpochParams {
            batch_size: 3,
            iters: 1,
            recentering_size: 4,
            bound: 20.0,
            bits: 40,
            eta: 0.999_999,
            alpha: 1.0,
        };
        let (q1, report) = refine_estimate(&mdp, &q_bar, &ep, 2, &RngPlan::new(5), 1, None).unwrap();
        let exact = bellman_apply(&mdp, &q_bar).unwrap();
        assert!(q1.sup_distance(&exact) <= 1e-5);
        assert_eq!(report.rounds, 2);
        assert_eq!(report.samples_per_agent_per_sa, 2 + 3);
        assert_eq!(report.bits_per_agent, 2 * 40 * 6);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let mdp = deterministic_mdp();
        let q_star = solve_q_star(&mdp, 1e-13).unwrap().q_star;
        let ep = EpochParams {
            batch_size: 2,
            iters: 10,
            recentering_size: 5,
            bound: 10.0,
            bits: 30,
            eta: 0.5,
            alpha: 1.0,
        };
        let (q, _) = refine_estimate(&mdp, &q_star, &ep, 3, &RngPlan::new(9), 1, None).unwrap();
        let spacing = QuantizerConfig::new(10.0, 30).unwrap().spacing();
        assert!(q.sup_distance(&q_star) <= 30.0 * spacing);
    }

    #[test]
    fn noiseless_run_contracts_monotonically() {
        let mdp = deterministic_mdp();
        let q_star = solve_q_star(&mdp, 1e-13).unwrap().q_star;
        let mut s = DvrSettings::new(0.8, 0.1, 0.05, 2, 0.5, 6);
        s.scale_l = 1e-6;
        s.scale_b = 1e-6;
        let mut p = derive_params(&s).unwrap();
        p.bits = 40;
        let run = run_fed_dvr(&mdp, &p, &RngPlan::new(1), Some(&q_star)).unwrap();
        let errors: Vec<f64> = run.reports.iter().map(|r| r.error.unwrap()).collect();
        assert!(errors.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errors:?}");
        assert!(run.halving_holds(0.8));
        assert_eq!(run.ledger, p.predicted_ledger());
    }

    #[test]
    fn sample_ledger_matches_formula() {
        let mdp = build_experiment_mdp(0.8, 0.9).unwrap();
        let q_star = solve_q_star(&mdp, 1e-10).unwrap().q_star;
        for m in [1, 3] {
            let mut s = DvrSettings::new(0.8, 0.5, 0.1, m, 0.5, 6);
            s.scale_l = 1e-3;
            s.scale_b = 1e-2;
            let p = derive_params(&s).unwrap();
            let run = run_fed_dvr(&mdp, &p, &RngPlan::new(2), Some(&q_star)).unwrap();
            let expected: u64 = (1..=p.num_epochs)
                .map(|k| p.recentering_sizes[k - 1].div_ceil(m as u64) + p.iters_per_epoch * p.batch_size)
                .sum();
            assert_eq!(run.ledger.samples_per_agent_per_sa, expected);
            assert_eq!(run.ledger.rounds, (p.iters_per_epoch + 1) * p.num_epochs as u64);
            for r in &run.reports {
                assert_eq!(r.rounds, p.iters_per_epoch + 1);
            }
        }
    }

    #[test]
    fn out_of_bound_is_labelled_with_the_epoch() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let ep = EpochParams {
            batch_size: 2,
            iters: 3,
            recentering_size: 10,
            bound: 0.1,
            bits: 8,
            eta: 0.5,
            alpha: 1.0,
        };
        let err = refine_estimate(&mdp, &mdp.zero_q(), &ep, 2, &RngPlan::new(1), 4, None).unwrap_err();
        assert!(err.is_out_of_bound());
        assert!(matches!(err, Error::Epoch { epoch: 4, round: 0, .. }));
    }

    #[test]
    fn runs_are_deterministic_across_thread_counts() {
        let mdp = build_experiment_mdp(0.8, 0.9).unwrap();
        let mut s = DvrSettings::new(0.8, 0.25, 0.1, 4, 0.5, 6);
        s.scale_l = 1e-3;
        s.scale_b = 1e-2;
        let p = derive_params(&s).unwrap();
        let a = run_fed_dvr(&mdp, &p, &RngPlan::new(3), None).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_fed_dvr(&mdp, &p, &RngPlan::new(3), None).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn subsampled_run_charges_id_overhead() {
        let mdp = build_experiment_mdp(0.8, 0.9).unwrap();
        let mut s = DvrSettings::new(0.8, 0.5, 0.1, 2, 0.5, 6);
        s.alpha = 0.5;
        s.scale_l = 1e-3;
        s.scale_b = 1e-2;
        let mut p = derive_params(&s).unwrap();
        // room for the 1/alpha scaling of the inputs
        p.bounds.iter_mut().for_each(|d| *d *= 2.0);
        let run = run_fed_dvr(&mdp, &p, &RngPlan::new(4), None).unwrap();
        assert_eq!(run.ledger.bits_per_agent, run.ledger.rounds * 3 * (u64::from(p.bits) + 3));
    }

    #[test]
    fn mismatched_mdp_is_rejected() {
        let mdp = build_experiment_mdp(0.8, 0.9).unwrap();
        let p = derive_params(&DvrSettings::new(0.8, 0.5, 0.1, 2, 0.5, 8)).unwrap();
        assert!(run_fed_dvr(&mdp, &p, &RngPlan::new(1), None).is_err());
    }
}
