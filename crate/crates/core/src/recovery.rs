//! Failure detection and repair decisions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{NodeId, StageId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("round-trip sample must be positive, got {0}")]
    NonPositiveRtt(f64),
    #[error("stage {0} has no alive node to repair the path")]
    IrreparablePath(StageId),
}

/// How backward-pass failures are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryMode {
    /// Repair the path and reuse stored activations and gradients.
    #[default]
    Gwtf,
    /// Restart the microbatch from its data node.
    PipelineRestart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryParams {
    /// Timeout multiplier over the round-trip estimate.
    pub k: f64,
    /// EWMA weight of the newest sample.
    pub gamma: f64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams { k: 3.0, gamma: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeerStats {
    pub ewma: Option<f64>,
}

impl PeerStats {
    pub fn observe(&mut self, rtt: f64, gamma: f64) -> Result<(), RecoveryError> {
        if rtt <= 0.0 || !rtt.is_finite() {
            return Err(RecoveryError::NonPositiveRtt(rtt));
        }
        self.ewma = Some(match self.ewma {
            None => rtt,
            Some(e) => gamma * rtt + (1.0 - gamma) * e,
        });
        Ok(())
    }

    pub fn threshold(&self, k: f64) -> Option<f64> {
        self.ewma.map(|e| k * e)
    }
}

/// Round-trip estimates for every peer a node has sent to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeerTable {
    pub peers: BTreeMap<NodeId, PeerStats>,
}

impl PeerTable {
    pub fn observe(&mut self, peer: NodeId, rtt: f64, gamma: f64) -> Result<(), RecoveryError> {
        self.peers.entry(peer).or_insert(PeerStats { ewma: None }).observe(rtt, gamma)
    }

    /// Timeout for `peer`: `k` times its estimate, or `k` times `initial` before any sample.
    pub fn timeout(&self, peer: NodeId, params: RecoveryParams, initial: f64) -> f64 {
        self.peers
            .get(&peer)
            .and_then(|s| s.threshold(params.k))
            .unwrap_or(params.k * initial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    Deny,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionList {
    pub entries: BTreeMap<NodeId, ExclusionReason>,
}

impl ExclusionList {
    pub fn exclude(&mut self, node: NodeId, reason: ExclusionReason) {
        self.entries.insert(node, reason);
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.entries.contains_key(&node)
    }

    /// A DENY exclusion lifts when the node reports freed capacity.
    pub fn on_capacity_freed(&mut self, node: NodeId) {
        if self.entries.get(&node) == Some(&ExclusionReason::Deny) {
            self.entries.remove(&node);
        }
    }

    /// A timeout exclusion lifts on a successful ping.
    pub fn on_pong(&mut self, node: NodeId) {
        if self.entries.get(&node) == Some(&ExclusionReason::Timeout) {
            self.entries.remove(&node);
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

pub fn can_accept(alive: bool, capacity_remaining: u32, deny_excluded: bool) -> bool {
    alive && capacity_remaining > 0 && !deny_excluded
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardDecision {
    Reroute(NodeId),
    Deny,
}

/// After a peer timed out: exclude it and pick the cheapest non-excluded alternative,
/// or fall back to DENY upstream. `options` pairs next-stage peers with a cost
/// (edge cost plus known cost to sink).
pub fn on_forward_timeout(
    exclusion: &mut ExclusionList,
    stale: NodeId,
    options: &[(NodeId, f64)],
) -> ForwardDecision {
    exclusion.exclude(stale, ExclusionReason::Timeout);
    pick_alternative(exclusion, options)
}

pub fn pick_alternative(exclusion: &ExclusionList, options: &[(NodeId, f64)]) -> ForwardDecision {
    options
        .iter()
        .filter(|(n, c)| !exclusion.contains(*n) && c.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|&(n, _)| ForwardDecision::Reroute(n))
        .unwrap_or(ForwardDecision::Deny)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairPlan {
    /// The repaired relay sequence (data node excluded).
    pub path: Vec<NodeId>,
    /// `(position, crashed, replacement)` for every repaired hop.
    pub replacements: Vec<(usize, NodeId, NodeId)>,
    /// Ping messages sent by the chase.
    pub pings: usize,
    /// Stages whose forward pass is computed again.
    pub recomputed_stages: usize,
}

/// Repair of a microbatch whose backward pass stalled. `relays` is the stored relay path
/// in stage order; `replacement(stage, position)` proposes a stand-in for a crashed relay.
/// The chase pings along the path; every crashed relay is replaced and only replacements
/// recompute their forward pass. With `PipelineRestart` the whole path recomputes.
pub fn on_backward_failure(
    relays: &[NodeId],
    alive: impl Fn(NodeId) -> bool,
    mut replacement: impl FnMut(StageId, usize) -> Option<NodeId>,
    mode: RecoveryMode,
) -> Result<RepairPlan, RecoveryError> {
    let mut path = relays.to_vec();
    let mut replacements = Vec::new();
    for (pos, node) in relays.iter().enumerate() {
        if alive(*node) {
            continue;
        }
        let stage = StageId(pos as u32);
        let sub = replacement(stage, pos).ok_or(RecoveryError::IrreparablePath(stage))?;
        path[pos] = sub;
        replacements.push((pos, *node, sub));
    }
    let recomputed_stages = match mode {
        RecoveryMode::Gwtf => replacements.len(),
        RecoveryMode::PipelineRestart => relays.len(),
    };
    Ok(RepairPlan {
        path,
        pings: relays.len(),
        replacements,
        recomputed_stages,
    })
}
