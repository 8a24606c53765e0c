//! Reward-free planning with state-time option kernels.
//!
//! Instead of maximizing a reward signal, everything here revolves around
//! *tasks*: a goal function and a constraint function attached to a
//! transition kernel (a task MDP). Feasibility iteration solves a task MDP
//! for the probability of completing the goal without violating a
//! constraint, and simultaneously constructs the option's
//! initiation-to-termination transition kernel over final states, final
//! times, and success/failure events (a state-time option kernel, STOK).
//!
//! STOKs compose by time convolution, factorize over product spaces into
//! base-level kernels and per-subsystem prediction kernels, and aggregate
//! into a goal kernel that jumps a whole state-vector and clock from option
//! initiation to post-termination. Breadth-first search over option
//! sequences plans on the goal kernel; sublimated high-level solutions
//! prune the search; channel capacity over option sequences scores states
//! by empowerment.
//!
//! Module map:
//!
//! - [`kernels`]: transition kernels, affordance/mode/feature functions,
//!   and the composition function that builds explicit product-space kernels.
//! - [`tmdp`]: task MDPs, goal/constraint functions, achievement and
//!   continuation functions, homogeneity validation.
//! - [`okbe`]: feasibility iteration, STOK/SOK types and composition, the
//!   absorbing-chain and trajectory oracles.
//! - [`factorization`]: regions, state-prediction kernels, high-level event
//!   functions, the STOK factorization, option ensembles, the goal kernel.
//! - [`planner`]: breadth-first option-sequence search, sublimation,
//!   abstract actions, Monte-Carlo rollouts.
//! - [`empowerment`]: channel construction and capacity, empowerment gain,
//!   valence-based plan selection.
//! - [`bridge`]: first-exit equivalence, makeshift STOKs from
//!   reward-maximizing policies, values from STOKs.
//! - [`scenarios`]: built-in worlds and a structured-text scenario loader.
//! - [`cli`]: solve/plan/verify/empower commands and CSV/PPM exports.
//!
//! Each major capability has a runnable example under `examples/`.

pub mod bridge;
pub mod cli;
pub mod empowerment;
mod error;
pub mod factorization;
pub mod kernels;
pub mod okbe;
pub mod planner;
pub mod scenarios;
pub mod tmdp;

pub use error::{Error, Result};

/// Tolerance to which every stored distribution must sum to one.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Tolerance used when comparing feasibility values for action ties.
pub const TIE_TOL: f64 = 1e-9;
