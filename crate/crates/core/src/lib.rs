#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Deterministic simulator for heterogeneous federated learning through
//! per-class feature and logit exchange.
//!
//! Clients own models of different architectures that share a feature
//! width and class count. In the `felo` strategy the server averages the
//! per-class mean features and logits clients report; in `velo` it also
//! trains a conditional VAE on reported features and sends back generated
//! features instead of the plain averages. `fedavg` and `local` serve as
//! baselines. An experiment is a pure function of its [`ExperimentConfig`].

pub mod cli;
pub mod cvae;
pub mod data;
pub mod error;
pub mod knowledge;
pub mod losses;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod zoo;

pub use error::{FeloError, Result};

pub use orchestrator::{
    run_experiment, ExperimentConfig, FederationState, RoundMetrics, Simulation, Strategy,
};
