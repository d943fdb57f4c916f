//! Deterministic simulator and protocol library for churn-tolerant decentralized
//! pipeline training with flow-based microbatch routing.

pub mod cost;
pub mod domain;
pub mod harness;
pub mod lifecycle;
pub mod membership;
pub mod message;
pub mod oracle;
pub mod protocol;
pub mod recovery;
pub mod simnet;
