//! Experiment configurations, sweeps and CSV output.
//!
//! Every study fans its (algorithm, agent count, seed) jobs out to the rayon
//! pool, gathers the rows in job order and writes them as CSV together with a
//! `<name>.meta.json` sidecar that holds the full configuration, the seeds and
//! all derived parameters. Nothing in either file depends on wall-clock time
//! or thread scheduling.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feddvr::{derive_params, run_fed_dvr, DvrParams, DvrSettings};
use crate::fedsync::{
    geometric_checkpoints, run_sync, CommSchedule, RunRecord, StepSizeSchedule, SyncRunConfig,
};
use crate::mdp::{
    build_experiment_mdp, build_hard_mdp, hard_instance_p, solve_q_star, QTable, TabularMdp,
};
use crate::metrics::{error_rate, linear_fit, loglog_fit, samples_to_target, TrendFit};
use crate::sampling::RngPlan;

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance used for the reference `Q*` of every study.
pub const Q_STAR_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Compare,
    Speedup,
    Horizon,
    Lowerbound,
    Single,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Compare => "compare",
            ExperimentKind::Speedup => "speedup",
            ExperimentKind::Horizon => "horizon",
            ExperimentKind::Lowerbound => "lowerbound",
            ExperimentKind::Single => "single",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSpec {
    /// Four-state lower-bound construction (`copies` disjoint copies).
    Hard {
        gamma: f64,
        #[serde(default = "one")]
        copies: usize,
        #[serde(default = "two")]
        actions: usize,
    },
    /// Three-state, two-action instance; `p` defaults to the hard-instance value.
    Experiment {
        gamma: f64,
        #[serde(default)]
        p: Option<f64>,
    },
    /// JSON MDP file; relative paths resolve against the config file.
    File { path: PathBuf },
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl MdpSpec {
    /// Builds the MDP, optionally replacing the discount of builtin instances.
    pub fn build(&self, gamma_override: Option<f64>) -> Result<TabularMdp> {
        match *self {
            MdpSpec::Hard {
                gamma,
                copies,
                actions,
            } => Ok(build_hard_mdp(gamma_override.unwrap_or(gamma), copies, actions)?.mdp),
            MdpSpec::Experiment { gamma, p } => {
                let g = gamma_override.unwrap_or(gamma);
                let p = match p {
                    Some(p) => p,
                    None => hard_instance_p(g),
                };
                build_experiment_mdp(g, p)
            }
            MdpSpec::File { ref path } => {
                if gamma_override.is_some() {
                    return Err(Error::Config("`gammas` cannot be combined with an MDP file".into()));
                }
                TabularMdp::from_json_file(path)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvrBlock {
    pub eps: f64,
    pub delta: f64,
    pub eta: f64,
    #[serde(default = "unit")]
    pub alpha: f64,
    #[serde(default = "unit")]
    pub scale_l: f64,
    #[serde(default = "unit")]
    pub scale_b: f64,
    #[serde(default = "one_u64")]
    pub min_recentering: u64,
    #[serde(default = "one_u64")]
    pub min_batch: u64,
}

fn unit() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

impl DvrBlock {
    pub fn settings(&self, gamma: f64, num_agents: usize, num_state_actions: usize) -> DvrSettings {
        DvrSettings {
            alpha: self.alpha,
            scale_l: self.scale_l,
            scale_b: self.scale_b,
            min_recentering: self.min_recentering,
            min_batch: self.min_batch,
            ..DvrSettings::new(gamma, self.eps, self.delta, num_agents, self.eta, num_state_actions)
        }
    }

    /// The desk-scale setting used by the contraction and speedup studies.
    pub fn desk_scale(eps: f64) -> Self {
        Self {
            eps,
            delta: 0.05,
            eta: 0.5,
            alpha: 1.0,
            scale_l: 1.0 / 200.0,
            scale_b: 1.0 / 200.0,
            min_recentering: 50,
            min_batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommPattern {
    EveryStep,
    FinalOnly,
    Periodic { period: u64 },
    Instants { at: Vec<u64> },
}

impl CommPattern {
    pub fn schedule(&self, total_steps: u64) -> Result<CommSchedule> {
        match self {
            CommPattern::EveryStep => Ok(CommSchedule::every_step(total_steps)),
            CommPattern::FinalOnly => Ok(CommSchedule::final_only(total_steps)),
            CommPattern::Periodic { period } => CommSchedule::periodic(*period, total_steps),
            CommPattern::Instants { at } => CommSchedule::from_instants(at.clone(), total_steps),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncBlock {
    pub total_steps: u64,
    pub batch_size: usize,
    pub step_size: StepSizeSchedule,
    pub comm: CommPattern,
    #[serde(default = "default_bits_per_real")]
    pub bits_per_real: u32,
}

fn default_bits_per_real() -> u32 {
    64
}

impl SyncBlock {
    pub fn run_config(&self, num_agents: usize, seed: u64) -> Result<SyncRunConfig> {
        let cfg = SyncRunConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            num_agents,
            step_size: self.step_size,
            comm: self.comm.schedule(self.total_steps)?,
            seed: RngPlan::new(seed),
            bits_per_real: self.bits_per_real,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One run entry: a label and exactly one algorithm block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dvr: Option<DvrBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncBlock>,
}

/// The algorithm block of an entry, once validated.
#[derive(Clone, Copy, Debug)]
pub enum Algorithm<'a> {
    Dvr(&'a DvrBlock),
    Sync(&'a SyncBlock),
}

impl AlgorithmEntry {
    pub fn algorithm(&self) -> Result<Algorithm<'_>> {
        match (&self.dvr, &self.sync) {
            (Some(d), None) => Ok(Algorithm::Dvr(d)),
            (None, Some(s)) => Ok(Algorithm::Sync(s)),
            _ => Err(Error::Config(format!(
                "algorithms[`{}`]: exactly one of `dvr` and `sync` must be given",
                self.label
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointPolicy {
    /// Steps `1, 2, 4, ...` and `T`.
    #[default]
    Geometric,
    /// Every `interval` steps and `T`.
    Every { interval: u64 },
}

impl CheckpointPolicy {
    pub fn checkpoints(&self, total_steps: u64) -> Result<Vec<u64>> {
        match *self {
            CheckpointPolicy::Geometric => Ok(geometric_checkpoints(total_steps)),
            CheckpointPolicy::Every { interval: 0 } => {
                Err(Error::Config("checkpoints.interval must be at least 1".into()))
            }
            CheckpointPolicy::Every { interval } => {
                let mut out: Vec<u64> = (1..=total_steps / interval).map(|i| i * interval).collect();
                if out.last() != Some(&total_steps) {
                    out.push(total_steps);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub mdp: MdpSpec,
    pub algorithms: Vec<AlgorithmEntry>,
    pub agent_counts: Vec<usize>,
    /// Discount sweep (horizon study only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "one")]
    pub num_seeds: usize,
    /// Explicit seeds; overrides `master_seed` and `num_seeds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Accuracy for samples-to-target; defaults to the `dvr` block's `eps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_error: Option<f64>,
    #[serde(default)]
    pub checkpoints: CheckpointPolicy,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative MDP paths resolve against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let MdpSpec::File { path: mdp_path } = &mut cfg.mdp {
            if mdp_path.is_relative() {
                if let Some(dir) = path.parent() {
                    *mdp_path = dir.join(&*mdp_path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of every replicate: the explicit list, or `master_seed + i`.
    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.num_seeds as u64)
                .map(|i| self.master_seed.wrapping_add(i))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return cfg_err(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if self.algorithms.is_empty() {
            return cfg_err("algorithms: at least one entry is required".into());
        }
        let mut labels: Vec<&str> = Vec::new();
        for entry in &self.algorithms {
            if entry.label.is_empty() || entry.label.contains([',', '"', '\n']) {
                return cfg_err(format!("algorithms.label: `{}` is empty or not CSV-safe", entry.label));
            }
            if labels.contains(&entry.label.as_str()) {
                return cfg_err(format!("algorithms.label: `{}` appears twice", entry.label));
            }
            labels.push(&entry.label);
            if let Algorithm::Sync(s) = entry.algorithm()? {
                s.run_config(1, 0)
                    .map_err(|e| Error::Config(format!("algorithms[`{}`].sync: {e}", entry.label)))?;
                self.checkpoints.checkpoints(s.total_steps)?;
            }
        }
        if self.agent_counts.is_empty() || self.agent_counts.contains(&0) {
            return cfg_err("agent_counts: must be a nonempty list of positive integers".into());
        }
        let seeds = self.seed_list();
        if seeds.is_empty() {
            return cfg_err("num_seeds: at least one seed is required".into());
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return cfg_err("seeds: values must be distinct".into());
        }
        if let Some(t) = self.target_error {
            if !(t > 0.0 && t.is_finite()) {
                return cfg_err(format!("target_error: must be positive, got {t}"));
            }
        }
        let single_entry = |what: &str| -> Result<()> {
            if self.algorithms.len() != 1 {
                return cfg_err(format!("algorithms: the {what} study takes exactly one entry"));
            }
            Ok(())
        };
        match self.kind {
            ExperimentKind::Compare => {
                if self.agent_counts.len() != 1 {
                    return cfg_err("agent_counts: the compare study takes a single agent count".into());
                }
            }
            ExperimentKind::Speedup => single_entry("speedup")?,
            ExperimentKind::Single => single_entry("single")?,
            ExperimentKind::Horizon => {
                single_entry("horizon")?;
                if !matches!(self.algorithms[0].algorithm()?, Algorithm::Dvr(_)) {
                    return cfg_err("algorithms: the horizon study needs a `dvr` entry".into());
                }
                if self.gammas.is_empty() {
                    return cfg_err("gammas: the horizon study needs at least one discount".into());
                }
                if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
                    return cfg_err(format!("gammas: {g} is outside (0, 1)"));
                }
            }
            ExperimentKind::Lowerbound => {
                if self
                    .algorithms
                    .iter()
                    .any(|e| !matches!(e.algorithm(), Ok(Algorithm::Sync(_))))
                {
                    return cfg_err("algorithms: the lowerbound study takes only `sync` entries".into());
                }
            }
        }
        if self.kind != ExperimentKind::Horizon && !self.gammas.is_empty() {
            return cfg_err("gammas: only the horizon study sweeps the discount".into());
        }
        Ok(())
    }

    /// Configuration reproducing the acceptance setup of each study.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let contraction_mdp = MdpSpec::Experiment { gamma: 0.8, p: None };
        let study_mdp = MdpSpec::Experiment {
            gamma: 0.9,
            p: Some(0.8),
        };
        let dvr = |label: &str, block: DvrBlock| AlgorithmEntry {
            label: label.into(),
            dvr: Some(block),
            sync: None,
        };
        let sync = |label: &str, block: SyncBlock| AlgorithmEntry {
            label: label.into(),
            dvr: None,
            sync: Some(block),
        };
        let base = |mdp, algorithms, agent_counts, num_seeds| ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind,
            mdp,
            algorithms,
            agent_counts,
            gammas: Vec::new(),
            master_seed: 0,
            num_seeds,
            seeds: None,
            target_error: None,
            checkpoints: CheckpointPolicy::Geometric,
        };
        match kind {
            ExperimentKind::Compare => base(
                study_mdp,
                vec![
                    dvr("fed-dvr-q", DvrBlock::desk_scale(0.1)),
                    sync(
                        "fed-synq",
                        SyncBlock {
                            total_steps: 20_000,
                            batch_size: 8,
                            step_size: StepSizeSchedule::RescaledLinear { c_eta: 1.0 },
                            comm: CommPattern::Periodic { period: 20 },
                            bits_per_real: 64,
                        },
                    ),
                ],
                vec![5],
                10,
            ),
            ExperimentKind::Speedup => base(
                contraction_mdp,
                vec![dvr("fed-dvr-q", DvrBlock::desk_scale(0.125))],
                vec![1, 2, 4, 8],
                20,
            ),
            ExperimentKind::Horizon => ExperimentConfig {
                gammas: vec![0.70, 0.75, 0.80, 0.85, 0.90],
                ..base(
                    study_mdp,
                    vec![dvr("fed-dvr-q", DvrBlock::desk_scale(0.1))],
                    vec![5],
                    1,
                )
            },
            ExperimentKind::Lowerbound => {
                let total_steps = 2000;
                let eta = 4.0 / ((1.0 - 0.9) * total_steps as f64);
                let block = |comm| SyncBlock {
                    total_steps,
                    batch_size: 1,
                    step_size: StepSizeSchedule::Constant { eta },
                    comm,
                    bits_per_real: 64,
                };
                base(
                    study_mdp,
                    vec![
                        sync("dense", block(CommPattern::EveryStep)),
                        sync("sparse", block(CommPattern::FinalOnly)),
                    ],
                    vec![1, 10],
                    20,
                )
            }
            ExperimentKind::Single => base(
                study_mdp,
                vec![dvr("fed-dvr-q", DvrBlock::desk_scale(0.1))],
                vec![5],
                1,
            ),
        }
    }

    fn target_for(&self, entry: &AlgorithmEntry) -> Result<f64> {
        match (self.target_error, entry.algorithm()?) {
            (Some(t), _) => Ok(t),
            (None, Algorithm::Dvr(d)) => Ok(d.eps),
            (None, Algorithm::Sync(_)) => Err(Error::Config(format!(
                "target_error: required for the sync entry `{}`",
                entry.label
            ))),
        }
    }
}

/// Derived parameters of one `dvr` run, recorded in sidecars.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivedEntry {
    pub label: String,
    pub num_agents: usize,
    pub params: DvrParams,
}

struct Context {
    mdp: TabularMdp,
    q_star: QTable,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mdp = cfg.mdp.build(None)?;
        let q_star = solve_q_star(&mdp, Q_STAR_TOLERANCE)?.q_star;
        Ok(Self { mdp, q_star })
    }

    fn dvr_params(&self, block: &DvrBlock, num_agents: usize) -> Result<DvrParams> {
        derive_params(&block.settings(self.mdp.gamma(), num_agents, self.mdp.num_state_actions()))
    }

    /// Full record of one run: epoch boundaries for `dvr`, checkpoints for `sync`.
    fn record(&self, cfg: &ExperimentConfig, entry: &AlgorithmEntry, num_agents: usize, seed: u64) -> Result<RunRecord> {
        match entry.algorithm()? {
            Algorithm::Dvr(block) => {
                let params = self.dvr_params(block, num_agents)?;
                Ok(run_fed_dvr(&self.mdp, &params, &RngPlan::new(seed), Some(&self.q_star))?.to_record())
            }
            Algorithm::Sync(block) => {
                let run = block.run_config(num_agents, seed)?;
                let checkpoints = cfg.checkpoints.checkpoints(block.total_steps)?;
                run_sync(&self.mdp, &run, &self.q_star, &checkpoints)
            }
        }
    }

    fn derived(&self, cfg: &ExperimentConfig) -> Result<Vec<DerivedEntry>> {
        let mut out = Vec::new();
        for entry in &cfg.algorithms {
            if let Algorithm::Dvr(block) = entry.algorithm()? {
                for &m in &cfg.agent_counts {
                    out.push(DerivedEntry {
                        label: entry.label.clone(),
                        num_agents: m,
                        params: self.dvr_params(block, m)?,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(usize, usize, u64)> {
    let seeds = cfg.seed_list();
    (0..cfg.algorithms.len())
        .flat_map(|a| {
            let seeds = seeds.clone();
            cfg.agent_counts
                .iter()
                .flat_map(move |&m| seeds.clone().into_iter().map(move |s| (a, m, s)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub algo: String,
    pub seed: u64,
    pub samples_per_agent: u64,
    pub error: f64,
    pub bits_per_agent: u64,
    pub rounds: u64,
}

pub fn compare_rows(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    let ctx = Context::new(cfg)?;
    let records = jobs(cfg)
        .into_par_iter()
        .map(|(a, m, s)| Ok((a, s, ctx.record(cfg, &cfg.algorithms[a], m, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(records
        .into_iter()
        .flat_map(|(a, seed, record)| {
            let algo = cfg.algorithms[a].label.clone();
            record.rows.into_iter().map(move |row| CompareRow {
                algo: algo.clone(),
                seed,
                samples_per_agent: row.samples_per_agent,
                error: row.agent_error,
                bits_per_agent: row.bits_per_agent,
                rounds: row.rounds,
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupRow {
    #[serde(rename = "M")]
    pub num_agents: usize,
    pub seed: u64,
    /// `|S||A| N` at the first record point with error at most the target.
    pub sc: Option<u64>,
    pub rounds: u64,
    pub bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupPoint {
    pub num_agents: usize,
    pub mean_sc: Option<f64>,
    pub seeds_reaching_target: usize,
    pub mean_final_error: f64,
    pub stderr_final_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupSummary {
    pub target_error: f64,
    pub points: Vec<SpeedupPoint>,
    /// Log-log fit of mean SC on `M`, over agent counts where every seed reached the target.
    pub fit: Option<TrendFit>,
    pub rounds_constant: bool,
}

pub fn speedup_rows(cfg: &ExperimentConfig) -> Result<(Vec<SpeedupRow>, SpeedupSummary)> {
    let ctx = Context::new(cfg)?;
    let entry = &cfg.algorithms[0];
    let target = cfg.target_for(entry)?;
    let num_sa = ctx.mdp.num_state_actions() as u64;
    let runs = jobs(cfg)
        .into_par_iter()
        .map(|(_, m, s)| {
            let record = ctx.record(cfg, entry, m, s)?;
            let last = record.last().cloned().ok_or(Error::Empty("run record"))?;
            let row = SpeedupRow {
                num_agents: m,
                seed: s,
                sc: samples_to_target(&record, target, num_sa),
                rounds: last.rounds,
                bits: last.bits_per_agent,
            };
            Ok((row, last.agent_error))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::new();
    for &m in &cfg.agent_counts {
        let group: Vec<_> = runs.iter().filter(|(r, _)| r.num_agents == m).collect();
        let reached: Vec<f64> = group.iter().filter_map(|(r, _)| r.sc.map(|x| x as f64)).collect();
        let finals: Vec<f64> = group.iter().map(|(_, e)| *e).collect();
        let er = error_rate(&finals)?;
        points.push(SpeedupPoint {
            num_agents: m,
            mean_sc: (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64),
            seeds_reaching_target: reached.len(),
            mean_final_error: er.mean,
            stderr_final_error: er.stderr,
        });
    }
    let full: Vec<&SpeedupPoint> = points
        .iter()
        .filter(|p| p.seeds_reaching_target == group_size(cfg))
        .collect();
    let fit = if full.len() >= 2 {
        let xs: Vec<f64> = full.iter().map(|p| p.num_agents as f64).collect();
        let ys: Vec<f64> = full.iter().map(|p| p.mean_sc.unwrap_or(f64::NAN)).collect();
        Some(loglog_fit(&xs, &ys)?)
    } else {
        None
    };
    let rows: Vec<SpeedupRow> = runs.into_iter().map(|(r, _)| r).collect();
    let rounds_constant = rows.windows(2).all(|w| w[0].rounds == w[1].rounds);
    Ok((
        rows,
        SpeedupSummary {
            target_error: target,
            points,
            fit,
            rounds_constant,
        },
    ))
}

fn group_size(cfg: &ExperimentConfig) -> usize {
    cfg.seed_list().len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonRow {
    pub gamma: f64,
    pub inv_horizon: f64,
    pub rounds: u64,
    pub bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonSummary {
    pub num_agents: usize,
    /// OLS of rounds on `1 / (1 - gamma)`.
    pub rounds_fit: Option<TrendFit>,
    pub bits_fit: Option<TrendFit>,
    pub rounds_strictly_increasing: bool,
    pub params: Vec<DvrParams>,
}

/// Analytic ledger of complete runs across the discount sweep.
pub fn horizon_rows(cfg: &ExperimentConfig) -> Result<(Vec<HorizonRow>, HorizonSummary)> {
    let Algorithm::Dvr(block) = cfg.algorithms[0].algorithm()? else {
        return Err(Error::Config("algorithms: the horizon study needs a `dvr` entry".into()));
    };
    let num_agents = cfg.agent_counts[0];
    let mut rows = Vec::new();
    let mut params = Vec::new();
    for &gamma in &cfg.gammas {
        let mdp = cfg.mdp.build(Some(gamma))?;
        let p = derive_params(&block.settings(gamma, num_agents, mdp.num_state_actions()))?;
        let ledger = p.predicted_ledger();
        rows.push(HorizonRow {
            gamma,
            inv_horizon: 1.0 / (1.0 - gamma),
            rounds: ledger.rounds,
            bits: ledger.bits_per_agent,
        });
        params.push(p);
    }
    let mut by_horizon = rows.clone();
    by_horizon.sort_by(|a, b| a.inv_horizon.total_cmp(&b.inv_horizon));
    let rounds_strictly_increasing = by_horizon
        .windows(2)
        .all(|w| w[1].inv_horizon > w[0].inv_horizon && w[1].rounds > w[0].rounds);
    let xs: Vec<f64> = rows.iter().map(|r| r.inv_horizon).collect();
    let fit = |ys: Vec<f64>| linear_fit(&xs, &ys).ok();
    let summary = HorizonSummary {
        num_agents,
        rounds_fit: fit(rows.iter().map(|r| r.rounds as f64).collect()),
        bits_fit: fit(rows.iter().map(|r| r.bits as f64).collect()),
        rounds_strictly_increasing,
        params,
    };
    Ok((rows, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundRow {
    pub schedule: String,
    #[serde(rename = "M")]
    pub num_agents: usize,
    pub seed: u64,
    pub final_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundSummary {
    pub schedule: String,
    pub rounds: u64,
    /// `(M, mean final error, standard error)`.
    pub errors: Vec<(usize, f64, f64)>,
    /// Mean error at the largest `M` over the mean error at the smallest `M`.
    pub ratio: f64,
}

pub fn lowerbound_rows(cfg: &ExperimentConfig) -> Result<(Vec<LowerBoundRow>, Vec<LowerBoundSummary>)> {
    let ctx = Context::new(cfg)?;
    let rows = jobs(cfg)
        .into_par_iter()
        .map(|(a, m, s)| {
            let entry = &cfg.algorithms[a];
            let Algorithm::Sync(block) = entry.algorithm()? else {
                return Err(Error::Config("algorithms: the lowerbound study takes only `sync` entries".into()));
            };
            let run = block.run_config(m, s)?;
            let record = run_sync(&ctx.mdp, &run, &ctx.q_star, &[block.total_steps])?;
            let last = record.last().ok_or(Error::Empty("run record"))?;
            Ok(LowerBoundRow {
                schedule: entry.label.clone(),
                num_agents: m,
                seed: s,
                final_error: last.agent_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (m_lo, m_hi) = (
        *cfg.agent_counts.iter().min().unwrap_or(&1),
        *cfg.agent_counts.iter().max().unwrap_or(&1),
    );
    let mut summaries = Vec::new();
    for entry in &cfg.algorithms {
        let Algorithm::Sync(block) = entry.algorithm()? else { continue };
        let mut errors = Vec::new();
        for &m in &cfg.agent_counts {
            let finals: Vec<f64> = rows
                .iter()
                .filter(|r| r.schedule == entry.label && r.num_agents == m)
                .map(|r| r.final_error)
                .collect();
            let er = error_rate(&finals)?;
            errors.push((m, er.mean, er.stderr));
        }
        let mean_at = |m: usize| errors.iter().find(|e| e.0 == m).map_or(f64::NAN, |e| e.1);
        summaries.push(LowerBoundSummary {
            schedule: entry.label.clone(),
            rounds: block.comm.schedule(block.total_steps)?.rounds() as u64,
            ratio: mean_at(m_hi) / mean_at(m_lo),
            errors,
        });
    }
    Ok((rows, summaries))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleRow {
    pub algo: String,
    #[serde(rename = "M")]
    pub num_agents: usize,
    pub seed: u64,
    /// Epoch index for `dvr`, step index for `sync`.
    pub step: u64,
    pub samples_per_agent: u64,
    pub error: f64,
    pub averaged_error: f64,
    pub rounds: u64,
    pub bits_per_agent: u64,
}

pub fn single_rows(cfg: &ExperimentConfig) -> Result<Vec<SingleRow>> {
    let ctx = Context::new(cfg)?;
    let records = jobs(cfg)
        .into_par_iter()
        .map(|(a, m, s)| Ok((a, m, s, ctx.record(cfg, &cfg.algorithms[a], m, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(records
        .into_iter()
        .flat_map(|(a, m, seed, record)| {
            let algo = cfg.algorithms[a].label.clone();
            record.rows.into_iter().map(move |row| SingleRow {
                algo: algo.clone(),
                num_agents: m,
                seed,
                step: row.step,
                samples_per_agent: row.samples_per_agent,
                error: row.agent_error,
                averaged_error: row.averaged_error,
                rounds: row.rounds,
                bits_per_agent: row.bits_per_agent,
            })
        })
        .collect())
}

#[derive(Serialize)]
struct Sidecar<'a, S: Serialize> {
    schema_version: u32,
    generator: &'static str,
    version: &'static str,
    output: &'a str,
    config: &'a ExperimentConfig,
    seeds: Vec<u64>,
    derived: Vec<DerivedEntry>,
    summary: S,
    notes: &'a [&'a str],
}

const ERROR_NOTE: &str = "errors are sup-norm distances to the Q* of the configured MDP";

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("CSV serialization failed: {other:?}")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs the configured study and writes its CSV and sidecar into `out_dir`.
/// Returns the paths written, CSV first.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let name = cfg.kind.name();
    let csv_path = out_dir.join(format!("{name}.csv"));
    let meta_path = out_dir.join(format!("{name}.meta.json"));
    let derived = if cfg.kind == ExperimentKind::Horizon {
        Vec::new()
    } else {
        Context::new(cfg)?.derived(cfg)?
    };
    let sidecar = |summary| Sidecar {
        schema_version: SCHEMA_VERSION,
        generator: "fedq",
        version: env!("CARGO_PKG_VERSION"),
        output: name,
        config: cfg,
        seeds: cfg.seed_list(),
        derived: derived.clone(),
        summary,
        notes: &[ERROR_NOTE],
    };
    match cfg.kind {
        ExperimentKind::Compare => {
            let rows = compare_rows(cfg)?;
            write_csv(
                &csv_path,
                &rows,
                &["algo", "seed", "samples_per_agent", "error", "bits_per_agent", "rounds"],
            )?;
            write_json(&meta_path, &sidecar(serde_json::Value::Null))?;
        }
        ExperimentKind::Speedup => {
            let (rows, summary) = speedup_rows(cfg)?;
            write_csv(&csv_path, &rows, &["M", "seed", "sc", "rounds", "bits"])?;
            write_json(&meta_path, &sidecar(serde_json::to_value(&summary)?))?;
            log::info!(
                "speedup: slope {:?}, rounds constant {}",
                summary.fit.map(|f| f.slope),
                summary.rounds_constant
            );
        }
        ExperimentKind::Horizon => {
            let (rows, summary) = horizon_rows(cfg)?;
            write_csv(&csv_path, &rows, &["gamma", "inv_horizon", "rounds", "bits"])?;
            write_json(&meta_path, &sidecar(serde_json::to_value(&summary)?))?;
        }
        ExperimentKind::Lowerbound => {
            let (rows, summary) = lowerbound_rows(cfg)?;
            write_csv(&csv_path, &rows, &["schedule", "M", "seed", "final_error"])?;
            write_json(&meta_path, &sidecar(serde_json::to_value(&summary)?))?;
        }
        ExperimentKind::Single => {
            let rows = single_rows(cfg)?;
            write_csv(
                &csv_path,
                &rows,
                &[
                    "algo",
                    "M",
                    "seed",
                    "step",
                    "samples_per_agent",
                    "error",
                    "averaged_error",
                    "rounds",
                    "bits_per_agent",
                ],
            )?;
            write_json(&meta_path, &sidecar(serde_json::Value::Null))?;
        }
    }
    Ok(vec![csv_path, meta_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_for(kind);
        cfg.num_seeds = 2;
        if let Some(Some(s)) = cfg.algorithms.get_mut(1).map(|e| e.sync.as_mut()) {
            s.total_steps = 200;
        }
        cfg
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        for kind in [
            ExperimentKind::Compare,
            ExperimentKind::Speedup,
            ExperimentKind::Horizon,
            ExperimentKind::Lowerbound,
            ExperimentKind::Single,
        ] {
            let cfg = ExperimentConfig::default_for(kind);
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn entries_need_exactly_one_block() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Compare);
        cfg.algorithms[0].sync = cfg.algorithms[1].sync.clone();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("exactly one")));
        cfg.algorithms[0].sync = None;
        cfg.algorithms[0].dvr = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let cfg = ExperimentConfig::default_for(ExperimentKind::Speedup);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["schema_version"] = 7.into();
        let err = ExperimentConfig::from_json_str(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("schema_version"));

        let mut v = serde_json::to_value(&cfg).unwrap();
        v["agent_count"] = 3.into();
        let err = ExperimentConfig::from_json_str(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("agent_count"));

        let mut v = serde_json::to_value(&cfg).unwrap();
        v["seeds"] = serde_json::json!([1, 1]);
        assert!(ExperimentConfig::from_json_str(&v.to_string()).unwrap_err().to_string().contains("seeds"));
    }

    #[test]
    fn seed_list_offsets_master_seed() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Single);
        cfg.master_seed = 10;
        cfg.num_seeds = 3;
        assert_eq!(cfg.seed_list(), vec![10, 11, 12]);
        cfg.seeds = Some(vec![4, 2]);
        assert_eq!(cfg.seed_list(), vec![4, 2]);
    }

    #[test]
    fn checkpoint_policies() {
        assert_eq!(CheckpointPolicy::Geometric.checkpoints(5).unwrap(), vec![1, 2, 4, 5]);
        assert_eq!(
            CheckpointPolicy::Every { interval: 2 }.checkpoints(5).unwrap(),
            vec![2, 4, 5]
        );
        assert!(CheckpointPolicy::Every { interval: 0 }.checkpoints(5).is_err());
    }

    #[test]
    fn horizon_ledger_is_increasing() {
        let (rows, summary) = horizon_rows(&ExperimentConfig::default_for(ExperimentKind::Horizon)).unwrap();
        let rounds: Vec<u64> = rows.iter().map(|r| r.rounds).collect();
        assert_eq!(rounds, vec![90, 102, 147, 196, 287]);
        assert!(summary.rounds_strictly_increasing);
    }

    #[test]
    fn compare_rows_cover_both_algorithms() {
        let rows = compare_rows(&small(ExperimentKind::Compare)).unwrap();
        for algo in ["fed-dvr-q", "fed-synq"] {
            for seed in [0, 1] {
                let series: Vec<_> = rows.iter().filter(|r| r.algo == algo && r.seed == seed).collect();
                assert!(series.len() > 2);
                assert!(series.windows(2).all(|w| w[1].samples_per_agent >= w[0].samples_per_agent));
            }
        }
    }

    #[test]
    fn lowerbound_summary_has_one_ratio_per_schedule() {
        let mut cfg = small(ExperimentKind::Lowerbound);
        for e in &mut cfg.algorithms {
            e.sync.as_mut().unwrap().total_steps = 100;
        }
        let (rows, summary) = lowerbound_rows(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].rounds, 100);
        assert_eq!(summary[1].rounds, 1);
    }

    #[test]
    fn file_mdp_rejects_gamma_sweep() {
        let spec = MdpSpec::File { path: "x.json".into() };
        assert!(spec.build(Some(0.9)).is_err());
    }
}
