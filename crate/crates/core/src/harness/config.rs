//! Scenario files.
//!
//! A scenario is a TOML document with a `kind` and one matching section:
//!
//! ```toml
//! name = "flow-1"
//! kind = "flow"
//! seed = 1
//! runs = 10
//!
//! [flow]
//! sources = 1
//! relays = 40
//! stages = 8
//! capacity = { dist = "floor-uniform", lo = 1, hi = 3 }
//! link_cost = { dist = "floor-uniform", lo = 1, hi = 20 }
//! ```

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Objective;
use crate::recovery::RecoveryMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario kind {kind} needs a [{kind}] section")]
    MissingSection { kind: &'static str },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// A bounded random quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "kebab-case")]
pub enum Dist {
    Const { value: f64 },
    /// Floor of a uniform real draw in `[lo, hi)`.
    FloorUniform { lo: f64, hi: f64 },
    /// Uniform real in `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
}

impl Dist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Dist::Const { value } => value,
            Dist::FloorUniform { lo, hi } => rng.gen_range(lo..hi).floor(),
            Dist::Uniform { lo, hi } => rng.gen_range(lo..hi),
        }
    }

    /// Inclusive bounds of the values `sample` can return.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Dist::Const { value } => (value, value),
            Dist::FloorUniform { lo, hi } => (lo.floor(), (hi - 1.0).ceil().max(lo.floor())),
            Dist::Uniform { lo, hi } => (lo, hi),
        }
    }

    fn validate(&self, field: &str, min: f64) -> Result<(), ConfigError> {
        match *self {
            Dist::FloorUniform { lo, hi } | Dist::Uniform { lo, hi } if !(lo < hi) => {
                return Err(invalid(field, format!("empty range [{lo}, {hi})")))
            }
            _ => {}
        }
        let (lo, hi) = self.bounds();
        if !lo.is_finite() || !hi.is_finite() || lo < min {
            return Err(invalid(field, format!("values must be finite and at least {min}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Flow,
    Addition,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    Gwtf,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdditionPolicy {
    Gwtf,
    CapacityFirst,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    #[serde(default = "d_t0")]
    pub t0: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_window")]
    pub window: u64,
    #[serde(default = "d_max_rounds")]
    pub max_rounds: u64,
    #[serde(default)]
    pub objective: Objective,
}

fn d_t0() -> f64 {
    1.7
}
fn d_alpha() -> f64 {
    0.95
}
fn d_window() -> u64 {
    5
}
fn d_max_rounds() -> u64 {
    300
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            t0: d_t0(),
            alpha: d_alpha(),
            window: d_window(),
            max_rounds: d_max_rounds(),
            objective: Objective::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub sources: u32,
    pub relays: u32,
    pub stages: u32,
    pub capacity: Dist,
    pub link_cost: Dist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdditionSection {
    pub stages: u32,
    /// Relays per stage before the addition.
    pub per_stage: Dist,
    pub candidates: u32,
    pub capacity: Dist,
    pub interlayer: Dist,
    /// Added on top of the node's largest interlayer cost for its stage.
    pub intralayer: Dist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Relay stages; the data nodes host the first and last layers.
    pub stages: u32,
    pub relays: u32,
    pub data_nodes: u32,
    pub microbatches: u32,
    pub capacity: Dist,
    pub latency: Dist,
    pub bandwidth: Dist,
    pub compute: Dist,
    #[serde(default = "d_activation")]
    pub activation_size: f64,
    #[serde(default)]
    pub churn: f64,
    #[serde(default = "d_iterations")]
    pub iterations: u32,
    #[serde(default = "d_routing")]
    pub routing: Routing,
    #[serde(default)]
    pub recovery: RecoveryMode,
    #[serde(default = "d_k")]
    pub k: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    /// Iteration deadline as a multiple of the crash-free estimate.
    #[serde(default = "d_deadline")]
    pub deadline_factor: f64,
}

fn d_activation() -> f64 {
    100.0
}
fn d_iterations() -> u32 {
    25
}
fn d_routing() -> Routing {
    Routing::Gwtf
}
fn d_k() -> f64 {
    3.0
}
fn d_gamma() -> f64 {
    0.5
}
fn d_eta() -> f64 {
    0.1
}
fn d_deadline() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_runs")]
    pub runs: u32,
    /// Display label for one simulated time unit, used only in reports.
    #[serde(default)]
    pub time_unit: Option<String>,
    #[serde(default)]
    pub protocol: ProtocolParams,
    #[serde(default)]
    pub flow: Option<FlowSection>,
    #[serde(default)]
    pub addition: Option<AdditionSection>,
    #[serde(default)]
    pub training: Option<TrainingSection>,
}

fn d_runs() -> u32 {
    1
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.protocol;
        if !(p.t0 > 0.0) {
            return Err(invalid("protocol.t0", "must be positive"));
        }
        if !(p.alpha > 0.0 && p.alpha < 1.0) {
            return Err(invalid("protocol.alpha", "must lie in (0, 1)"));
        }
        if self.runs == 0 {
            return Err(invalid("runs", "must be at least 1"));
        }
        match self.kind {
            ScenarioKind::Flow => {
                let f = self.flow.as_ref().ok_or(ConfigError::MissingSection { kind: "flow" })?;
                if f.sources == 0 || f.stages == 0 || f.relays < f.stages {
                    return Err(invalid("flow", "need a source and at least one relay per stage"));
                }
                f.capacity.validate("flow.capacity", 1.0)?;
                f.link_cost.validate("flow.link_cost", 0.0)?;
            }
            ScenarioKind::Addition => {
                let a = self
                    .addition
                    .as_ref()
                    .ok_or(ConfigError::MissingSection { kind: "addition" })?;
                if a.stages == 0 {
                    return Err(invalid("addition.stages", "must be positive"));
                }
                a.per_stage.validate("addition.per_stage", 1.0)?;
                a.capacity.validate("addition.capacity", 1.0)?;
                a.interlayer.validate("addition.interlayer", 0.0)?;
                a.intralayer.validate("addition.intralayer", 0.0)?;
            }
            ScenarioKind::Training => {
                let t = self
                    .training
                    .as_ref()
                    .ok_or(ConfigError::MissingSection { kind: "training" })?;
                if t.stages == 0 || t.relays < t.stages || t.data_nodes == 0 || t.microbatches == 0 {
                    return Err(invalid(
                        "training",
                        "need data nodes, microbatches and a relay per stage",
                    ));
                }
                if !(0.0..=1.0).contains(&t.churn) {
                    return Err(invalid("training.churn", "must lie in [0, 1]"));
                }
                if !(t.k > 1.0) {
                    return Err(invalid("training.k", "must exceed 1"));
                }
                if !(t.gamma > 0.0 && t.gamma <= 1.0) {
                    return Err(invalid("training.gamma", "must lie in (0, 1]"));
                }
                if !(t.activation_size >= 0.0) {
                    return Err(invalid("training.activation_size", "must be non-negative"));
                }
                t.capacity.validate("training.capacity", 1.0)?;
                t.latency.validate("training.latency", 0.0)?;
                t.bandwidth.validate("training.bandwidth", f64::MIN_POSITIVE)?;
                t.compute.validate("training.compute", 0.0)?;
            }
        }
        Ok(())
    }
}
