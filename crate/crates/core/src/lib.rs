//! Deterministic federated-learning simulator with run-time detection of
//! negative federated learning (the global model doing worse for clients than
//! models they could train alone) and per-client recovery through adapted
//! models.
//!
//! Start with [`config::preset`] or [`SimConfig`], then either
//! [`run_simulation`] in memory or [`artifact::run_to_dir`] to write a run
//! directory.

pub mod adversary;
pub mod artifact;
pub mod client;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod model;
pub mod protocol;
pub mod recovery;
pub mod rng;
pub mod robust;
pub mod sim;

pub use artifact::{compare_dirs, compare_runs, load_run, run_to_dir, Comparison, RunRecord};
pub use config::{load_config, preset, Mode, SimConfig};
pub use error::{Error, Result};
pub use model::{Model, ModelSpec, ParamVector};
pub use sim::{run_simulation, Event, EventKind, RoundMetrics, RunArtifact, Simulation, Summary};
