//! Replay, configuration, metrics and the training loop.

pub mod agent;
pub mod config;
pub mod metrics;
pub mod replay;

pub use agent::{random_policy_baseline, Agent, EvalSummary, Models, Params, TrainStats};
pub use config::TrainConfig;
pub use metrics::{MetricsRow, MetricsWriter, RowKind};
pub use replay::{Episode, ReplayBuffer};
