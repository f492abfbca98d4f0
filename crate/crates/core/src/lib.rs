//! Deterministic simulator for federated tabular Q-learning.
//!
//! The crate models `M` agents that each own an independent generative model
//! of a finite MDP and cooperate through a central server. Two algorithm
//! families are provided:
//!
//! * [`fedsync`]: the generic intermittent-communication template, where agents
//!   run minibatch Q-learning locally and average their tables at scheduled
//!   instants.
//! * [`feddvr`]: distributed variance-reduced Q-learning with a stochastic
//!   quantizer on every upload, organised in epochs that halve the error.
//!
//! Every run keeps an exact ledger of rounds, uploaded bits and samples per
//! agent ([`metrics::CommLedger`]), and all randomness is drawn from keyed
//! streams ([`sampling::RngPlan`]) so results do not depend on thread
//! scheduling.

pub mod compression;
pub mod error;
pub mod experiments;
pub mod feddvr;
pub mod fedsync;
pub mod mdp;
pub mod metrics;
pub mod sampling;

mod util;

pub use error::{Error, Result};
pub use mdp::{QTable, SolveReport, TabularMdp};
