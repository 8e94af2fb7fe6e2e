//! Round-based execution of the four strategies.

mod config;
mod metrics;
mod state;
mod training;

pub use config::{
    CvaeSection, DataSection, DataSource, ExperimentConfig, ExperimentSection, KnowledgeCollection,
    ModelSection, OptimizerSection, PartitionKind, Strategy,
};
pub use metrics::{ClientMetrics, RoundMetrics};
pub use state::{run_experiment, Environment, FederationState, Simulation};
pub use training::{
    evaluate, local_train, sample_clients, ClientState, LocalOutcome, TrainingSettings,
};
