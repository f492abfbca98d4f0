//! Intermittent-communication federated Q-learning.
//!
//! Each of `M` agents starts from `Q = 0` and at every step `t` forms
//!
//! ```text
//! Q_{t-1/2}^m = (1 - eta_t) Q_{t-1}^m + (eta_t / B) sum_b T_{Z_b}(Q_{t-1}^m)
//! ```
//!
//! from its own minibatch. At the instants of the communication schedule the
//! server replaces every local table by the exact average; otherwise agents
//! keep their own tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{QTable, TabularMdp};
use crate::metrics::{error_rate, samples_to_target};
use crate::sampling::{minibatch_bellman, Purpose, RngPlan, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSizeSchedule {
    Constant { eta: f64 },
    /// `eta_t = 1 / (1 + c_eta (1 - gamma) t)`.
    RescaledLinear { c_eta: f64 },
}

impl StepSizeSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSizeSchedule::Constant { eta } if !(eta > 0.0 && eta <= 1.0) => {
                Err(Error::param("eta", format!("must lie in (0, 1], got {eta}")))
            }
            StepSizeSchedule::RescaledLinear { c_eta } if !(c_eta > 0.0 && c_eta.is_finite()) => {
                Err(Error::param("c_eta", format!("must be positive, got {c_eta}")))
            }
            _ => Ok(()),
        }
    }
}

/// Step size at step `t >= 1`.
pub fn step_size_at(schedule: &StepSizeSchedule, t: u64, gamma: f64) -> f64 {
    match *schedule {
        StepSizeSchedule::Constant { eta } => eta,
        StepSizeSchedule::RescaledLinear { c_eta } => 1.0 / (1.0 + c_eta * (1.0 - gamma) * t as f64),
    }
}

/// Averaging instants `t_1 < ... < t_R = T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommSchedule {
    instants: Vec<u64>,
}

impl CommSchedule {
    pub fn from_instants(instants: Vec<u64>, total_steps: u64) -> Result<Self> {
        if instants.last() != Some(&total_steps) {
            return Err(Error::param(
                "comm",
                format!("the last averaging instant must equal T = {total_steps}"),
            ));
        }
        if instants[0] == 0 || instants.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param(
                "comm",
                "instants must be strictly increasing and start at 1 or later",
            ));
        }
        Ok(Self { instants })
    }

    pub fn every_step(total_steps: u64) -> Self {
        Self {
            instants: (1..=total_steps).collect(),
        }
    }

    pub fn final_only(total_steps: u64) -> Self {
        Self {
            instants: vec![total_steps],
        }
    }

    /// Every `period` steps, plus `T` itself.
    pub fn periodic(period: u64, total_steps: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::param("period", "must be positive"));
        }
        let mut instants: Vec<u64> = (1..=total_steps / period).map(|r| r * period).collect();
        if instants.last() != Some(&total_steps) {
            instants.push(total_steps);
        }
        Ok(Self { instants })
    }

    pub fn instants(&self) -> &[u64] {
        &self.instants
    }

    pub fn rounds(&self) -> usize {
        self.instants.len()
    }

    pub fn contains(&self, t: u64) -> bool {
        self.instants.binary_search(&t).is_ok()
    }

    /// `|C ∩ [1, t]|`.
    pub fn rounds_until(&self, t: u64) -> u64 {
        self.instants.partition_point(|&x| x <= t) as u64
    }
}

#[derive(Clone, Debug)]
pub struct SyncRunConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub num_agents: usize,
    pub step_size: StepSizeSchedule,
    pub comm: CommSchedule,
    pub seed: RngPlan,
    /// Bits charged per real number in an exact averaging round.
    pub bits_per_real: u32,
}

impl SyncRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::param("total_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if self.num_agents == 0 {
            return Err(Error::param("num_agents", "must be at least 1"));
        }
        if self.bits_per_real == 0 {
            return Err(Error::param("bits_per_real", "must be positive"));
        }
        self.step_size.validate()?;
        if self.comm.instants().last() != Some(&self.total_steps) {
            return Err(Error::param("comm", "schedule does not end at T"));
        }
        Ok(())
    }
}

/// One checkpoint of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub step: u64,
    pub samples_per_agent: u64,
    /// `||Q^0 - Q*||_inf` for agent 0.
    pub agent_error: f64,
    /// Error of the mean of all local tables.
    pub averaged_error: f64,
    pub rounds: u64,
    pub bits_per_agent: u64,
}

/// Error and cost time series of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }
}

/// Step-by-step driver of the template; [`run_sync`] wraps it.
pub struct SyncRunner<'a> {
    mdp: &'a TabularMdp,
    cfg: SyncRunConfig,
    agents: Vec<QTable>,
    step: u64,
    rounds: u64,
}

impl<'a> SyncRunner<'a> {
    pub fn new(mdp: &'a TabularMdp, cfg: SyncRunConfig) -> Result<Self> {
        cfg.validate()?;
        let agents = vec![mdp.zero_q(); cfg.num_agents];
        Ok(Self {
            mdp,
            cfg,
            agents,
            step: 0,
            rounds: 0,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn agents(&self) -> &[QTable] {
        &self.agents
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn samples_per_agent(&self) -> u64 {
        self.step * self.cfg.batch_size as u64
    }

    pub fn bits_per_agent(&self) -> u64 {
        self.rounds * u64::from(self.cfg.bits_per_real) * self.mdp.num_state_actions() as u64
    }

    /// Advances one step; returns whether it was an averaging instant.
    pub fn advance(&mut self) -> Result<bool> {
        if self.is_done() {
            return Err(Error::param("step", "run already finished"));
        }
        let t = self.step + 1;
        let eta = step_size_at(&self.cfg.step_size, t, self.mdp.gamma());
        let mdp = self.mdp;
        let plan = self.cfg.seed;
        let batch = self.cfg.batch_size;
        self.agents
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(m, q)| -> Result<()> {
                let mut rng = plan.stream(StreamKey::new(m, 0, t, Purpose::SyncMinibatch));
                let target = minibatch_bellman(mdp, q, batch, &mut rng)?;
                for (x, y) in q.as_mut_slice().iter_mut().zip(target.as_slice()) {
                    *x = (1.0 - eta) * *x + eta * y;
                }
                debug_assert!(q.within_range(mdp.value_bound(), 1e-9));
                Ok(())
            })?;
        let averaged = self.cfg.comm.contains(t);
        if averaged {
            let mean = QTable::mean_of(&self.agents)?;
            for q in &mut self.agents {
                q.clone_from(&mean);
            }
            self.rounds += 1;
        }
        self.step = t;
        Ok(averaged)
    }

    pub fn row(&self, q_star: &QTable) -> Result<RunRow> {
        let mean = QTable::mean_of(&self.agents)?;
        Ok(RunRow {
            step: self.step,
            samples_per_agent: self.samples_per_agent(),
            agent_error: self.agents[0].sup_distance(q_star),
            averaged_error: mean.sup_distance(q_star),
            rounds: self.rounds,
            bits_per_agent: self.bits_per_agent(),
        })
    }

    pub fn into_agents(self) -> Vec<QTable> {
        self.agents
    }
}

/// Runs the template for `T` steps and records errors at `checkpoints`.
pub fn run_sync(
    mdp: &TabularMdp,
    cfg: &SyncRunConfig,
    q_star: &QTable,
    checkpoints: &[u64],
) -> Result<RunRecord> {
    q_star.check_shape(mdp.num_states(), mdp.num_actions())?;
    if let Some(&bad) = checkpoints.iter().find(|&&c| c > cfg.total_steps) {
        return Err(Error::param(
            "checkpoints",
            format!("checkpoint {bad} lies beyond T = {}", cfg.total_steps),
        ));
    }
    let mut wanted: Vec<u64> = checkpoints.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let mut runner = SyncRunner::new(mdp, cfg.clone())?;
    let mut record = RunRecord::default();
    let mut next = wanted.iter().peekable();
    if next.peek() == Some(&&0) {
        record.rows.push(runner.row(q_star)?);
        next.next();
    }
    while let Some(&&c) = next.peek() {
        while runner.step_index() < c {
            runner.advance()?;
        }
        record.rows.push(runner.row(q_star)?);
        next.next();
    }
    Ok(record)
}

/// Checkpoints at `1, 2, 4, ...` steps plus `T`.
pub fn geometric_checkpoints(total_steps: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut c = 1;
    while c < total_steps {
        out.push(c);
        c *= 2;
    }
    out.push(total_steps);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupProbeRow {
    pub num_agents: usize,
    pub mean_final_error: f64,
    pub stderr_final_error: f64,
    /// Mean sample complexity over the seeds that reached the target.
    pub mean_samples_to_target: Option<f64>,
    pub seeds_reaching_target: usize,
    pub final_errors: Vec<f64>,
}

/// Runs `num_seeds` seeds for every agent count and summarises the final
/// agent-0 errors. Seed `i` uses master seed `base.seed.master_seed + i`.
pub fn run_speedup_probe(
    mdp: &TabularMdp,
    base: &SyncRunConfig,
    q_star: &QTable,
    agent_counts: &[usize],
    num_seeds: usize,
    target_error: f64,
) -> Result<Vec<SpeedupProbeRow>> {
    if agent_counts.is_empty() {
        return Err(Error::Empty("agent_counts"));
    }
    if num_seeds == 0 {
        return Err(Error::param("num_seeds", "must be at least 1"));
    }
    let checkpoints = geometric_checkpoints(base.total_steps);
    let jobs: Vec<(usize, usize)> = agent_counts
        .iter()
        .flat_map(|&m| (0..num_seeds).map(move |i| (m, i)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(m, i)| {
            let cfg = SyncRunConfig {
                num_agents: m,
                seed: RngPlan::new(base.seed.master_seed.wrapping_add(i as u64)),
                ..base.clone()
            };
            run_sync(mdp, &cfg, q_star, &checkpoints)
        })
        .collect::<Result<_>>()?;
    let num_sa = mdp.num_state_actions() as u64;
    agent_counts
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let runs = &records[k * num_seeds..(k + 1) * num_seeds];
            let finals: Vec<f64> = runs
                .iter()
                .map(|r| r.last().map(|row| row.agent_error).unwrap_or(f64::NAN))
                .collect();
            let er = error_rate(&finals)?;
            let reached: Vec<f64> = runs
                .iter()
                .filter_map(|r| samples_to_target(r, target_error, num_sa))
                .map(|x| x as f64)
                .collect();
            Ok(SpeedupProbeRow {
                num_agents: m,
                mean_final_error: er.mean,
                stderr_final_error: er.stderr,
                mean_samples_to_target: (!reached.is_empty())
                    .then(|| reached.iter().sum::<f64>() / reached.len() as f64),
                seeds_reaching_target: reached.len(),
                final_errors: finals,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bellman_apply, build_experiment_mdp, build_hard_mdp, solve_q_star};
    use approx::assert_abs_diff_eq;

    fn cfg(t: u64, b: usize, m: usize, step: StepSizeSchedule, comm: CommSchedule) -> SyncRunConfig {
        SyncRunConfig {
            total_steps: t,
            batch_size: b,
            num_agents: m,
            step_size: step,
            comm,
            seed: RngPlan::new(17),
            bits_per_real: 64,
        }
    }

    #[test]
    fn step_sizes() {
        let c = StepSizeSchedule::Constant { eta: 0.1 };
        assert_eq!(step_size_at(&c, 1, 0.9), 0.1);
        assert_eq!(step_size_at(&c, 1000, 0.9), 0.1);
        let r = StepSizeSchedule::RescaledLinear { c_eta: 1.0 };
        assert_abs_diff_eq!(step_size_at(&r, 10, 0.9), 0.5, epsilon = 1e-12);
        let mut prev = step_size_at(&r, 1, 0.9);
        for t in 2..500 {
            let cur = step_size_at(&r, t, 0.9);
            assert!(cur < prev);
            assert!(cur > 0.0 && cur <= 1.0);
            prev = cur;
        }
        assert!(StepSizeSchedule::Constant { eta: 1.5 }.validate().is_err());
        assert!(StepSizeSchedule::RescaledLinear { c_eta: 0.0 }.validate().is_err());
    }

    #[test]
    fn comm_schedule_rules() {
        assert!(CommSchedule::from_instants(vec![2, 5, 10], 10).is_ok());
        assert!(CommSchedule::from_instants(vec![2, 5], 10).is_err());
        assert!(CommSchedule::from_instants(vec![5, 5, 10], 10).is_err());
        assert!(CommSchedule::from_instants(vec![0, 10], 10).is_err());
        assert!(CommSchedule::from_instants(vec![], 10).is_err());
        let p = CommSchedule::periodic(4, 10).unwrap();
        assert_eq!(p.instants(), &[4, 8, 10]);
        assert_eq!(p.rounds_until(7), 1);
        assert_eq!(p.rounds_until(10), 3);
        assert_eq!(CommSchedule::every_step(5).rounds(), 5);
    }

    #[test]
    fn noiseless_full_step_equals_value_iteration() {
        let mut t = vec![0.0; 3 * 2 * 3];
        let next = [[1, 2], [2, 0], [0, 0]];
        for s in 0..3 {
            for a in 0..2 {
                t[(s * 2 + a) * 3 + next[s][a]] = 1.0;
            }
        }
        let mdp = TabularMdp::new(3, 2, 0.8, vec![0.1, 0.9, 0.5, 0.2, 1.0, 0.0], t).unwrap();
        let c = cfg(6, 2, 1, StepSizeSchedule::Constant { eta: 1.0 }, CommSchedule::final_only(6));
        let mut runner = SyncRunner::new(&mdp, c).unwrap();
        let mut expected = mdp.zero_q();
        while !runner.is_done() {
            runner.advance().unwrap();
            expected = bellman_apply(&mdp, &expected).unwrap();
            assert!(runner.agents()[0].sup_distance(&expected) <= 1e-12);
        }
    }

    #[test]
    fn state_three_follows_closed_form() {
        let mdp = build_hard_mdp(0.9, 1, 2).unwrap().mdp;
        let gamma = 0.9;
        let schedules = [
            StepSizeSchedule::Constant { eta: 0.3 },
            StepSizeSchedule::RescaledLinear { c_eta: 2.0 },
        ];
        for step in schedules {
            for comm in [CommSchedule::every_step(60), CommSchedule::periodic(7, 60).unwrap()] {
                let mut runner = SyncRunner::new(&mdp, cfg(60, 3, 3, step, comm)).unwrap();
                let mut prod = 1.0;
                while !runner.is_done() {
                    runner.advance().unwrap();
                    let t = runner.step_index();
                    prod *= 1.0 - step_size_at(&step, t, gamma) * (1.0 - gamma);
                    let expected = (1.0 - prod) / (1.0 - gamma);
                    for q in runner.agents() {
                        assert!((q.get(3, 0) - expected).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn averaging_produces_consensus() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let comm = CommSchedule::from_instants(vec![3, 8], 8).unwrap();
        let mut runner = SyncRunner::new(&mdp, cfg(8, 1, 4, StepSizeSchedule::Constant { eta: 0.5 }, comm)).unwrap();
        runner.advance().unwrap();
        runner.advance().unwrap();
        let before: Vec<QTable> = runner.agents().to_vec();
        assert!(before.windows(2).any(|w| w[0] != w[1]));
        assert!(runner.advance().unwrap());
        let agents = runner.agents();
        assert!(agents.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(runner.rounds(), 1);
    }

    #[test]
    fn mean_of_pre_average_tables() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let comm = CommSchedule::final_only(5);
        let base = cfg(5, 1, 3, StepSizeSchedule::Constant { eta: 0.5 }, comm.clone());
        let mut runner = SyncRunner::new(&mdp, base.clone()).unwrap();
        for _ in 0..4 {
            runner.advance().unwrap();
        }
        // replay step 5 without averaging to get the half-step tables
        let long = SyncRunConfig {
            total_steps: 6,
            comm: CommSchedule::final_only(6),
            ..base
        };
        let mut shadow = SyncRunner::new(&mdp, long).unwrap();
        for _ in 0..5 {
            shadow.advance().unwrap();
        }
        let expected = QTable::mean_of(shadow.agents()).unwrap();
        runner.advance().unwrap();
        assert_eq!(runner.agents()[0], expected);
    }

    #[test]
    fn iterates_stay_in_range_and_ledger_counts() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let q_star = solve_q_star(&mdp, 1e-10).unwrap().q_star;
        let comm = CommSchedule::periodic(5, 40).unwrap();
        let c = cfg(40, 2, 3, StepSizeSchedule::RescaledLinear { c_eta: 1.0 }, comm.clone());
        let checkpoints = [0, 1, 4, 5, 13, 40];
        let rec = run_sync(&mdp, &c, &q_star, &checkpoints).unwrap();
        for row in &rec.rows {
            assert_eq!(row.rounds, comm.rounds_until(row.step));
            assert_eq!(row.samples_per_agent, 2 * row.step);
            assert_eq!(row.bits_per_agent, row.rounds * 64 * 6);
        }
        let mut runner = SyncRunner::new(&mdp, c.clone()).unwrap();
        while !runner.is_done() {
            runner.advance().unwrap();
            for q in runner.agents() {
                assert!(q.within_range(10.0, 1e-12));
            }
        }
        assert!(run_sync(&mdp, &c, &q_star, &[41]).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let mdp = build_experiment_mdp(0.9, 0.8).unwrap();
        let q_star = solve_q_star(&mdp, 1e-10).unwrap().q_star;
        let c = cfg(50, 1, 5, StepSizeSchedule::Constant { eta: 0.2 }, CommSchedule::periodic(10, 50).unwrap());
        let cps = geometric_checkpoints(50);
        let a = run_sync(&mdp, &c, &q_star, &cps).unwrap();
        let b = run_sync(&mdp, &c, &q_star, &cps).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| run_sync(&mdp, &c, &q_star, &cps).unwrap());
        assert_eq!(a, serial);
    }

    #[test]
    fn speedup_probe_on_noiseless_mdp_is_flat() {
        let mdp = TabularMdp::new(2, 1, 0.5, vec![1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let q_star = solve_q_star(&mdp, 1e-12).unwrap().q_star;
        let c = cfg(30, 1, 1, StepSizeSchedule::Constant { eta: 0.5 }, CommSchedule::every_step(30));
        let rows = run_speedup_probe(&mdp, &c, &q_star, &[1, 4], 3, 1e-3).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean_final_error - rows[1].mean_final_error).abs() < 1e-12);
        assert_eq!(rows[0].seeds_reaching_target, 3);
        let sparse = SyncRunConfig {
            comm: CommSchedule::final_only(30),
            ..c.clone()
        };
        let rows2 = run_speedup_probe(&mdp, &sparse, &q_star, &[1, 4], 3, 1e-3).unwrap();
        assert!((rows2[1].mean_final_error - rows[1].mean_final_error).abs() < 1e-12);
        assert!(run_speedup_probe(&mdp, &c, &q_star, &[], 3, 1e-3).is_err());
    }
}
