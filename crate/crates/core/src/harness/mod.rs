//! Scenario files, canned experiments, metrics and report output.

pub mod config;
pub mod experiments;
pub mod generate;
pub mod metrics;
pub mod runner;
pub mod world;

pub use config::{AdditionPolicy, ConfigError, Dist, ProtocolParams, Routing, ScenarioConfig, ScenarioKind};
