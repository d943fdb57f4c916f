//! Iteration phases and the toy parameter state kept identical across stage replicas.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{NodeId, StageId};

pub const DEFAULT_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error("{node} is in {actual:?}, expected {expected:?}")]
    NotInPhase {
        node: NodeId,
        expected: Phase,
        actual: Phase,
    },
    #[error("{node} has no stored activation for batch {batch}")]
    MissingActivation { node: NodeId, batch: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    FlowFormation,
    Forward,
    Backward,
    Aggregation,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic gradient stand-in in `[-1, 1]^dim` for one stage and microbatch.
pub fn pseudo_gradient(stage: StageId, batch: u64, dim: usize) -> Vec<f64> {
    let base = splitmix(u64::from(stage.0) ^ splitmix(batch));
    (0..dim as u64)
        .map(|i| {
            let bits = splitmix(base ^ i.wrapping_mul(0x2545_f491_4f6c_dd1d)) >> 11;
            (bits as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub values: Vec<f64>,
    /// Per-microbatch gradients accumulated this iteration.
    pub grads: BTreeMap<u64, Vec<f64>>,
    pub version: u64,
}

impl StageParams {
    pub fn new(dim: usize) -> Self {
        StageParams {
            values: vec![0.0; dim],
            grads: BTreeMap::new(),
            version: 0,
        }
    }

    /// Copy of the parameters without any accumulated gradient, as handed to a joiner.
    pub fn snapshot(&self) -> Self {
        StageParams {
            values: self.values.clone(),
            grads: BTreeMap::new(),
            version: self.version,
        }
    }

    pub fn accumulate(&mut self, stage: StageId, batch: u64) {
        let g = pseudo_gradient(stage, batch, self.values.len());
        self.grads.insert(batch, g);
    }

    /// Sum of gradients of the given microbatches, in batch order.
    pub fn share(&self, completed: &BTreeSet<u64>) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (b, g) in &self.grads {
            if completed.contains(b) {
                for (o, x) in out.iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
        out
    }

    /// `values -= eta * mean(shares)`, with shares summed in node order.
    pub fn apply(&mut self, shares: &BTreeMap<NodeId, Vec<f64>>, eta: f64) {
        if !shares.is_empty() {
            let m = mean(shares);
            for (v, g) in self.values.iter_mut().zip(&m) {
                *v -= eta * g;
            }
        }
        self.grads.clear();
        self.version += 1;
    }

    pub fn digest(&self) -> u64 {
        self.values
            .iter()
            .fold(splitmix(self.version), |h, v| splitmix(h ^ v.to_bits()))
    }
}

pub fn mean(shares: &BTreeMap<NodeId, Vec<f64>>) -> Vec<f64> {
    let dim = shares.values().next().map(Vec::len).unwrap_or(0);
    let mut out = vec![0.0; dim];
    for v in shares.values() {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = shares.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Tracks the CAN TAKE handshake at one node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CanTake {
    pub aggregated: bool,
    pub downstream_ready: bool,
    pub sent: bool,
    /// Last-stage relays do not wait for anything downstream.
    pub last_stage: bool,
}

impl CanTake {
    pub fn new(last_stage: bool) -> Self {
        CanTake {
            last_stage,
            ..CanTake::default()
        }
    }

    /// Returns true exactly once, when CAN TAKE should go upstream.
    pub fn ready(&mut self) -> bool {
        if !self.sent && self.aggregated && (self.last_stage || self.downstream_ready) {
            self.sent = true;
            return true;
        }
        false
    }
}

/// Forward step bookkeeping at one node: checks phase, stores the activation and
/// returns the compute duration to charge.
pub fn process_forward(
    node: NodeId,
    phase: Phase,
    stored: &mut BTreeSet<u64>,
    batch: u64,
    compute_cost: f64,
) -> Result<f64, LifecycleError> {
    if phase != Phase::Forward && phase != Phase::Backward {
        return Err(LifecycleError::NotInPhase {
            node,
            expected: Phase::Forward,
            actual: phase,
        });
    }
    stored.insert(batch);
    Ok(compute_cost)
}

/// Backward step: requires the stored activation and accumulates the pseudo-gradient.
pub fn process_backward(
    node: NodeId,
    stage: StageId,
    stored: &BTreeSet<u64>,
    params: &mut StageParams,
    batch: u64,
    compute_cost: f64,
) -> Result<f64, LifecycleError> {
    if !stored.contains(&batch) {
        return Err(LifecycleError::MissingActivation { node, batch });
    }
    params.accumulate(stage, batch);
    Ok(compute_cost)
}
