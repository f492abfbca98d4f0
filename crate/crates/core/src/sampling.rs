//! Synchronous generative model and keyed random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(master_seed, agent, epoch, step, purpose)`. A stream is a ChaCha8
//! generator whose key is derived from the master seed and whose 64-bit
//! stream id is a hash of the remaining coordinates, so two keys never share
//! generator state and agents can be simulated in any order or in parallel.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::mdp::{QTable, TabularMdp};
use crate::util::mix64;

/// What a stream is used for. Part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    /// Local minibatches of the intermittent-communication template.
    SyncMinibatch = 1,
    /// Re-centering samples of a variance-reduced epoch.
    Recenter = 2,
    /// Per-iteration minibatches of a variance-reduced epoch.
    Minibatch = 3,
    /// Stochastic rounding inside the quantizer.
    Quantize = 4,
    /// Coordinate selection of the subsampling compressor.
    Subsample = 5,
    /// Free-form draws in tests and probes.
    Auxiliary = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub agent: u32,
    pub epoch: u32,
    pub step: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(agent: usize, epoch: usize, step: u64, purpose: Purpose) -> Self {
        Self {
            agent: agent as u32,
            epoch: epoch as u32,
            step,
            purpose,
        }
    }

    fn stream_id(&self) -> u64 {
        let head = mix64((u64::from(self.agent) << 32) | u64::from(self.epoch));
        let mid = mix64(head ^ self.step);
        mix64(mid ^ (self.purpose as u64).wrapping_mul(0xD134_2543_DE82_EF95))
    }
}

/// Master seed plus the keying convention that maps a [`StreamKey`] to an
/// independent generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngPlan {
    pub master_seed: u64,
}

impl RngPlan {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    fn chacha_seed(&self) -> [u8; 32] {
        let mut seed = [0u8; 32];
        let mut state = self.master_seed;
        for chunk in seed.chunks_mut(8) {
            state = mix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        seed
    }

    pub fn stream(&self, key: StreamKey) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.chacha_seed());
        rng.set_stream(key.stream_id());
        rng
    }
}

/// One realisation of the generative model: a next state for every `(s, a)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMatrix {
    num_states: usize,
    num_actions: usize,
    next_state: Vec<usize>,
}

impl SampleMatrix {
    pub fn from_indices(num_states: usize, num_actions: usize, next_state: Vec<usize>) -> Result<Self> {
        if next_state.len() != num_states * num_actions {
            return Err(Error::Dimension {
                expected: (num_states, num_actions),
                found: (next_state.len(), 1),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            next_state,
        })
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> usize {
        self.next_state[state * self.num_actions + action]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.next_state
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_states, self.num_actions)
    }
}

#[inline]
fn inverse_cdf(mdp: &TabularMdp, state: usize, action: usize, u: f64) -> usize {
    let cdf = mdp.cumulative_row(state, action);
    let idx = cdf.partition_point(|&c| c <= u);
    if idx < cdf.len() {
        idx
    } else {
        // u fell into the rounding gap above the final cumulative sum
        let row = mdp.transition_row(state, action);
        row.iter().rposition(|&p| p > 0.0).unwrap_or(cdf.len() - 1)
    }
}

/// Draws one next state per `(s, a)` by inverse-CDF sampling. Consumes
/// exactly one uniform per pair, in row-major order.
pub fn draw_sample<R: Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R) -> SampleMatrix {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut next_state = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let u: f64 = rng.random();
            next_state.push(inverse_cdf(mdp, s, a, u));
        }
    }
    SampleMatrix {
        num_states: ns,
        num_actions: na,
        next_state,
    }
}

/// Empirical Bellman operator `r(s, a) + gamma * max_a' q(z(s, a), a')`.
pub fn sample_bellman(mdp: &TabularMdp, q: &QTable, z: &SampleMatrix) -> Result<QTable> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    q.check_shape(ns, na)?;
    if z.shape() != (ns, na) {
        return Err(Error::Dimension {
            expected: (ns, na),
            found: z.shape(),
        });
    }
    let v = q.state_values();
    let mut out = mdp.zero_q();
    for s in 0..ns {
        for a in 0..na {
            let next = z.get(s, a);
            if next >= ns {
                return Err(Error::InvalidStateIndex {
                    state: s,
                    action: a,
                    next,
                });
            }
            out.set(s, a, mdp.reward(s, a) + mdp.gamma() * v[next]);
        }
    }
    Ok(out)
}

/// Mean of `batch_size` empirical Bellman operators on independent samples.
pub fn minibatch_bellman<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    q: &QTable,
    batch_size: usize,
    rng: &mut R,
) -> Result<QTable> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    q.check_shape(mdp.num_states(), mdp.num_actions())?;
    let v = q.state_values();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut acc = mdp.zero_q();
    for _ in 0..batch_size {
        let z = draw_sample(mdp, rng);
        for s in 0..ns {
            for a in 0..na {
                let idx = s * na + a;
                acc.as_mut_slice()[idx] += mdp.reward(s, a) + mdp.gamma() * v[z.get(s, a)];
            }
        }
    }
    let b = batch_size as f64;
    acc.as_mut_slice().iter_mut().for_each(|x| *x /= b);
    Ok(acc)
}

/// Next-state counts of `n` i.i.d. draws per `(s, a)`.
///
/// Empirical Bellman operators evaluated at a fixed table depend on a batch
/// only through these counts, so a kernel can stand in for a whole minibatch
/// and be applied to several tables (the variance-reduced update evaluates
/// the same batch at two points).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmpiricalKernel {
    num_states: usize,
    num_actions: usize,
    batch_size: u64,
    counts: Vec<u64>,
}

impl EmpiricalKernel {
    /// Draws per-row multinomial counts through a chain of conditional
    /// binomials. Cost is independent of `batch_size`.
    pub fn draw<R: RngCore + ?Sized>(mdp: &TabularMdp, batch_size: u64, rng: &mut R) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mut counts = vec![0u64; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let row = mdp.transition_row(s, a);
                let out = &mut counts[(s * na + a) * ns..(s * na + a + 1) * ns];
                let last = row.iter().rposition(|&p| p > 0.0).unwrap_or(ns - 1);
                let mut remaining = batch_size;
                let mut mass_left = 1.0f64;
                for next in 0..last {
                    if remaining == 0 {
                        break;
                    }
                    let p = row[next];
                    if p <= 0.0 {
                        continue;
                    }
                    let cond = if mass_left > 0.0 {
                        (p / mass_left).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let c = Binomial::new(remaining, cond)
                        .map_err(|e| Error::param("transition", e.to_string()))?
                        .sample(rng);
                    out[next] = c;
                    remaining -= c;
                    mass_left -= p;
                }
                out[last] += remaining;
            }
        }
        Ok(Self {
            num_states: ns,
            num_actions: na,
            batch_size,
            counts,
        })
    }

    /// Aggregates explicit sample matrices into counts.
    pub fn from_samples(samples: &[SampleMatrix]) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("no samples"))?;
        let (ns, na) = first.shape();
        let mut counts = vec![0u64; ns * na * ns];
        for z in samples {
            if z.shape() != (ns, na) {
                return Err(Error::Dimension {
                    expected: (ns, na),
                    found: z.shape(),
                });
            }
            for (idx, &next) in z.as_slice().iter().enumerate() {
                if next >= ns {
                    return Err(Error::InvalidStateIndex {
                        state: idx / na,
                        action: idx % na,
                        next,
                    });
                }
                counts[idx * ns + next] += 1;
            }
        }
        Ok(Self {
            num_states: ns,
            num_actions: na,
            batch_size: samples.len() as u64,
            counts,
        })
    }

    pub fn batch_size(&self) -> u64 {
        self.batch_size
    }

    pub fn counts(&self, state: usize, action: usize) -> &[u64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.counts[start..start + self.num_states]
    }

    /// `(1/n) sum_b T_{Z_b}(q)`, the minibatch empirical Bellman operator.
    pub fn apply(&self, mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        q.check_shape(ns, na)?;
        if (self.num_states, self.num_actions) != (ns, na) {
            return Err(Error::Dimension {
                expected: (ns, na),
                found: (self.num_states, self.num_actions),
            });
        }
        let v = q.state_values();
        let n = self.batch_size as f64;
        let mut out = mdp.zero_q();
        for s in 0..ns {
            for a in 0..na {
                let weighted: f64 = self
                    .counts(s, a)
                    .iter()
                    .zip(&v)
                    .filter(|(c, _)| **c > 0)
                    .map(|(&c, vn)| c as f64 * vn)
                    .sum();
                out.set(s, a, mdp.reward(s, a) + mdp.gamma() * (weighted / n));
            }
        }
        Ok(out)
    }
}
