//! Deterministic federated-learning simulator.
//!
//! The crate partitions a labelled dataset across clients with Dirichlet
//! label skew, trains a multinomial logistic-regression model with
//! FedProx-regularized local SGD, and compares client selectors: a
//! multi-criteria softmax selector ([`scoring`]) and the baselines in
//! [`baselines`]. [`engine`] runs the round loop, [`metrics`] turns round
//! telemetry into summaries and diagnostics, and [`runner`] drives
//! config-file sweeps for the `fedsim` binary.
//!
//! All randomness flows from per-purpose streams keyed by the master seed
//! ([`rng`]), so results do not depend on thread scheduling. Client work
//! inside a round is data-parallel through [`exec`] when the `parallel`
//! feature is on.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod engine;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod scoring;

pub use error::{FedError, Result};
