//! Deterministic simulator of federated learning on battery-constrained devices.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: datasets (synthetic Gaussian classes or CSV) and Dirichlet label-skew partitioning.
//! - [`energy`]: per-device battery budgets, per-epoch costs and energy accounting.
//! - [`model`]: softmax regression trained with mini-batch SGD, the local learner.
//! - [`federation`]: participant sampling, data-fraction policies, the local round state
//!   machine and weighted aggregation.
//! - [`metrics`]: per-round and per-device records, multi-seed statistics, CSV/JSON output.
//! - [`config`] and [`cli`]: declarative experiment files, sweeps and reports.
//!
//! Every random decision is drawn from a stream derived from the master seed
//! (see [`rng`]), so a run is bit-reproducible regardless of thread scheduling.

pub mod cli;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
