//! Finite MDPs, Q-tables, the Bellman optimality operator and the hard
//! instances used by the lower-bound and experiment studies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for transition kernels.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// A `|S| x |A|` table of action values stored row-major by state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::Dimension {
                expected: (num_states, num_actions),
                found: (values.len(), 1),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_states, self.num_actions)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    #[inline]
    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * self.num_actions + action] = value;
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let start = state * self.num_actions;
        &self.values[start..start + self.num_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `V(s) = max_a Q(s, a)`.
    #[inline]
    pub fn state_value(&self, state: usize) -> f64 {
        self.row(state)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn state_values(&self) -> Vec<f64> {
        (0..self.num_states).map(|s| self.state_value(s)).collect()
    }

    /// Greedy action; ties go to the lowest action index.
    pub fn greedy_action(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `||self - other||_inf`. Panics on shape mismatch.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        assert_eq!(self.shape(), other.shape(), "Q-table shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn check_shape(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.shape() != (num_states, num_actions) {
            return Err(Error::Dimension {
                expected: (num_states, num_actions),
                found: self.shape(),
            });
        }
        Ok(())
    }

    /// Arithmetic mean of equally shaped tables, accumulated in slice order.
    pub fn mean_of(tables: &[QTable]) -> Result<QTable> {
        let first = tables.first().ok_or(Error::Empty("no tables to average"))?;
        let mut out = QTable::zeros(first.num_states, first.num_actions);
        for t in tables {
            t.check_shape(first.num_states, first.num_actions)?;
            for (o, v) in out.values.iter_mut().zip(&t.values) {
                *o += v;
            }
        }
        let m = tables.len() as f64;
        out.values.iter_mut().for_each(|o| *o /= m);
        Ok(out)
    }

    /// True when every entry lies in `[0, upper]` up to `slack`.
    pub fn within_range(&self, upper: f64, slack: f64) -> bool {
        self.values
            .iter()
            .all(|&v| v >= -slack && v <= upper + slack)
    }
}

/// Finite discounted MDP with deterministic rewards and a dense kernel.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    rewards: Vec<f64>,
    transitions: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP. `rewards` is `[s][a]` and `transitions`
    /// is `[s][a][s']`, both flattened row-major.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        rewards: Vec<f64>,
        transitions: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp(
                "state and action counts must be positive".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!(
                "gamma must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        let num_sa = num_states
            .checked_mul(num_actions)
            .ok_or_else(|| Error::InvalidMdp("state-action count overflows".into()))?;
        let kernel_len = num_sa
            .checked_mul(num_states)
            .ok_or_else(|| Error::InvalidMdp("transition kernel size overflows".into()))?;
        if rewards.len() != num_sa {
            return Err(Error::InvalidMdp(format!(
                "expected {num_sa} rewards, found {}",
                rewards.len()
            )));
        }
        if transitions.len() != kernel_len {
            return Err(Error::InvalidMdp(format!(
                "expected {kernel_len} transition entries, found {}",
                transitions.len()
            )));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let idx = s * num_actions + a;
                let r = rewards[idx];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::InvalidRow {
                        state: s,
                        action: a,
                        reason: format!("reward {r} outside [0, 1]"),
                    });
                }
                let row = &transitions[idx * num_states..(idx + 1) * num_states];
                if let Some((next, p)) = row
                    .iter()
                    .enumerate()
                    .find(|(_, p)| !p.is_finite() || **p < 0.0)
                {
                    return Err(Error::InvalidRow {
                        state: s,
                        action: a,
                        reason: format!("transition probability to state {next} is {p}"),
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::InvalidRow {
                        state: s,
                        action: a,
                        reason: format!("transition row sums to {sum}"),
                    });
                }
            }
        }
        let mut cumulative = Vec::with_capacity(kernel_len);
        for row in transitions.chunks(num_states) {
            let mut acc = 0.0;
            for p in row {
                acc += p;
                cumulative.push(acc);
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            rewards,
            transitions,
            cumulative,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_state_actions(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Upper end of the value range, `1 / (1 - gamma)`.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    #[inline]
    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state * self.num_actions + action]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    #[inline]
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    /// Cumulative sums of `transition_row(state, action)`.
    #[inline]
    pub fn cumulative_row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.cumulative[start..start + self.num_states]
    }

    pub fn zero_q(&self) -> QTable {
        QTable::zeros(self.num_states, self.num_actions)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        file.into_mdp()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_file_format(&self) -> MdpFile {
        let (ns, na) = (self.num_states, self.num_actions);
        MdpFile {
            gamma: self.gamma,
            num_states: ns,
            num_actions: na,
            rewards: self.rewards.chunks(na).map(<[f64]>::to_vec).collect(),
            transitions: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| self.transition_row(s, a).to_vec())
                        .collect()
                })
                .collect(),
        }
    }
}

/// On-disk MDP layout with `[s][a][s']` nesting.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub gamma: f64,
    pub num_states: usize,
    pub num_actions: usize,
    pub rewards: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl MdpFile {
    pub fn into_mdp(self) -> Result<TabularMdp> {
        let (ns, na) = (self.num_states, self.num_actions);
        if self.rewards.len() != ns {
            return Err(Error::InvalidMdp(format!(
                "rewards has {} rows, expected {ns}",
                self.rewards.len()
            )));
        }
        if let Some((s, row)) = self.rewards.iter().enumerate().find(|(_, r)| r.len() != na) {
            return Err(Error::InvalidMdp(format!(
                "rewards row {s} has {} entries, expected {na}",
                row.len()
            )));
        }
        if self.transitions.len() != ns {
            return Err(Error::InvalidMdp(format!(
                "transitions has {} rows, expected {ns}",
                self.transitions.len()
            )));
        }
        for (s, per_action) in self.transitions.iter().enumerate() {
            if per_action.len() != na {
                return Err(Error::InvalidMdp(format!(
                    "transitions[{s}] has {} actions, expected {na}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns {
                    return Err(Error::InvalidRow {
                        state: s,
                        action: a,
                        reason: format!("row has {} entries, expected {ns}", row.len()),
                    });
                }
            }
        }
        let rewards = self.rewards.into_iter().flatten().collect();
        let transitions = self.transitions.into_iter().flatten().flatten().collect();
        TabularMdp::new(ns, na, self.gamma, rewards, transitions)
    }
}

/// Exact Bellman optimality operator:
/// `(T q)(s, a) = r(s, a) + gamma * sum_s' P(s' | s, a) max_a' q(s', a')`.
pub fn bellman_apply(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    q.check_shape(mdp.num_states(), mdp.num_actions())?;
    let v = q.state_values();
    let mut out = mdp.zero_q();
    bellman_from_values(mdp, &v, &mut out);
    Ok(out)
}

fn bellman_from_values(mdp: &TabularMdp, v: &[f64], out: &mut QTable) {
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let expected: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(v)
                .map(|(p, vn)| p * vn)
                .sum();
            out.set(s, a, mdp.reward(s, a) + mdp.gamma() * expected);
        }
    }
}

/// Ground-truth optimum computed by value iteration.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub q_star: QTable,
    pub v_star: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change of the final iteration.
    pub residual: f64,
}

/// Value iteration from `Q = 0`, stopped once the sup-norm change drops to
/// `tol (1 - gamma) / (2 gamma)`. On return `||q_star - Q*|| <= tol` and
/// `||T q_star - q_star|| <= tol (1 - gamma)`.
pub fn solve_q_star(mdp: &TabularMdp, tol: f64) -> Result<SolveReport> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::param("tol", format!("must be positive, got {tol}")));
    }
    let gamma = mdp.gamma();
    let threshold = tol * (1.0 - gamma) / (2.0 * gamma);
    let mut q = mdp.zero_q();
    let mut next = mdp.zero_q();
    let mut iterations = 0;
    loop {
        let v = q.state_values();
        bellman_from_values(mdp, &v, &mut next);
        iterations += 1;
        let change = next.sup_distance(&q);
        std::mem::swap(&mut q, &mut next);
        if change <= threshold {
            let v_star = q.state_values();
            return Ok(SolveReport {
                q_star: q,
                v_star,
                iterations,
                residual: change,
            });
        }
    }
}

/// `p = (4 gamma - 1) / (3 gamma)`, the self-loop probability of the hard instance.
pub fn hard_instance_p(gamma: f64) -> f64 {
    (4.0 * gamma - 1.0) / (3.0 * gamma)
}

/// Closed-form optimal values `[V*(0), V*(1), V*(2), V*(3)]` of one hard block
/// when `p = hard_instance_p(gamma)`.
pub fn hard_instance_values(gamma: f64) -> [f64; 4] {
    let mid = 3.0 / (4.0 * (1.0 - gamma));
    [0.0, mid, mid, 1.0 / (1.0 - gamma)]
}

/// Smallest discount factor covered by the lower-bound theorem.
pub const THEOREM_MIN_GAMMA: f64 = 5.0 / 6.0;

#[derive(Clone, Debug)]
pub struct HardInstance {
    pub mdp: TabularMdp,
    pub p: f64,
    /// `false` when `gamma < 5/6`, outside the regime of the lower bound.
    pub theorem_regime: bool,
}

/// Disjoint copies of the four-state hard block. Within a block: state 0 is
/// absorbing with reward 0, state 1 has `num_actions_state1` identical actions
/// staying with probability `p` (else to 0) with reward 1, state 2 mirrors
/// state 1 with a single action, state 3 is absorbing with reward 1.
/// Single-action states replicate their action across every slot.
pub fn build_hard_mdp(
    gamma: f64,
    num_copies: usize,
    num_actions_state1: usize,
) -> Result<HardInstance> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param("gamma", format!("must lie in (0, 1), got {gamma}")));
    }
    if num_copies == 0 {
        return Err(Error::param("num_copies", "must be positive"));
    }
    if num_actions_state1 < 2 {
        return Err(Error::param(
            "num_actions_state1",
            format!("must be at least 2, got {num_actions_state1}"),
        ));
    }
    let p = hard_instance_p(gamma);
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(
            "gamma",
            format!("gamma = {gamma} gives p = {p}, outside [0, 1]"),
        ));
    }
    let theorem_regime = gamma >= THEOREM_MIN_GAMMA;
    if !theorem_regime {
        log::warn!("hard instance built with gamma = {gamma} < 5/6, outside the lower-bound regime");
    }
    let num_states = num_copies
        .checked_mul(4)
        .ok_or_else(|| Error::param("num_copies", "state count overflows"))?;
    let na = num_actions_state1;
    let num_sa = num_states
        .checked_mul(na)
        .and_then(|x| x.checked_mul(num_states).map(|_| x))
        .ok_or_else(|| Error::param("num_copies", "kernel size overflows"))?;

    let mut rewards = vec![0.0; num_sa];
    let mut transitions = vec![0.0; num_sa * num_states];
    for copy in 0..num_copies {
        let base = 4 * copy;
        for a in 0..na {
            let mut set = |s: usize, r: f64, next: &[(usize, f64)]| {
                let idx = s * na + a;
                rewards[idx] = r;
                for &(n, prob) in next {
                    transitions[idx * num_states + n] += prob;
                }
            };
            set(base, 0.0, &[(base, 1.0)]);
            set(base + 1, 1.0, &[(base + 1, p), (base, 1.0 - p)]);
            set(base + 2, 1.0, &[(base + 2, p), (base, 1.0 - p)]);
            set(base + 3, 1.0, &[(base + 3, 1.0)]);
        }
    }
    let mdp = TabularMdp::new(num_states, na, gamma, rewards, transitions)?;
    Ok(HardInstance {
        mdp,
        p,
        theorem_regime,
    })
}

/// Three-state, two-action variant of the hard block used by the empirical
/// studies: state 0 absorbing with reward 0, states 1 and 2 each stay with
/// probability `p` (else fall to 0) and pay reward 1 under both actions.
pub fn build_experiment_mdp(gamma: f64, p: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", format!("must lie in [0, 1], got {p}")));
    }
    let (ns, na) = (3, 2);
    let mut rewards = vec![0.0; ns * na];
    let mut transitions = vec![0.0; ns * na * ns];
    for a in 0..na {
        let idx = |s: usize| s * na + a;
        transitions[idx(0) * ns] = 1.0;
        for s in 1..3 {
            rewards[idx(s)] = 1.0;
            transitions[idx(s) * ns + s] += p;
            transitions[idx(s) * ns] += 1.0 - p;
        }
    }
    TabularMdp::new(ns, na, gamma, rewards, transitions)
}
