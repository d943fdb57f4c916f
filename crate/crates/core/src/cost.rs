//! Edge cost model and the two global flow objectives.
//!
//! The cost of moving one microbatch across a link averages both directions, since each
//! link carries the activation forward and the gradient backward:
//!
//! `d(i,j) = (c_i + c_j)/2 + (λ_ij + λ_ji)/2 + 2·size/(β_ij + β_ji)`

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{LinkSpec, NodeId, NodeSpec, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("no cost known for edge {0}->{1}")]
    MissingEdgeCost(NodeId, NodeId),
    #[error("no link between {0} and {1}")]
    MissingLink(NodeId, NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct EdgeCost(pub f64);

impl EdgeCost {
    pub const INFINITE: EdgeCost = EdgeCost(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

pub fn edge_cost(
    i: &NodeSpec,
    j: &NodeSpec,
    link_ij: &LinkSpec,
    link_ji: &LinkSpec,
    size: f64,
) -> EdgeCost {
    let compute = (i.compute_cost + j.compute_cost) / 2.0;
    let latency = (link_ij.latency + link_ji.latency) / 2.0;
    let transfer = 2.0 * size / (link_ij.bandwidth + link_ji.bandwidth);
    EdgeCost(compute + latency + transfer)
}

impl Topology {
    /// `d(a, b)` for two nodes of this topology; infinite when either direction is unlinked.
    pub fn edge_cost(&self, a: NodeId, b: NodeId) -> EdgeCost {
        match (
            self.node(a),
            self.node(b),
            self.link(a, b),
            self.link(b, a),
        ) {
            (Some(na), Some(nb), Some(ab), Some(ba)) => {
                edge_cost(na, nb, ab, ba, self.activation_size)
            }
            _ => EdgeCost::INFINITE,
        }
    }
}

/// Microbatches per iteration carried on each directed edge.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowAssignment {
    pub flows: BTreeMap<(NodeId, NodeId), u32>,
}

impl FlowAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, from: NodeId, to: NodeId, units: u32) {
        if units > 0 {
            *self.flows.entry((from, to)).or_insert(0) += units;
        }
    }

    /// Adds one unit along every hop of `path`.
    pub fn add_path(&mut self, path: &[NodeId]) {
        for w in path.windows(2) {
            self.add(w[0], w[1], 1);
        }
    }

    pub fn get(&self, from: NodeId, to: NodeId) -> u32 {
        self.flows.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.flows.values().all(|&f| f == 0)
    }

    /// Units leaving `node`.
    pub fn outflow(&self, node: NodeId) -> u32 {
        self.flows
            .iter()
            .filter(|((a, _), _)| *a == node)
            .map(|(_, f)| f)
            .sum()
    }

    pub fn inflow(&self, node: NodeId) -> u32 {
        self.flows
            .iter()
            .filter(|((_, b), _)| *b == node)
            .map(|(_, f)| f)
            .sum()
    }

    /// Edge costs for every edge carrying flow, read from `topology`.
    pub fn costs_from(&self, topology: &Topology) -> BTreeMap<(NodeId, NodeId), EdgeCost> {
        self.flows
            .keys()
            .map(|&(a, b)| ((a, b), topology.edge_cost(a, b)))
            .collect()
    }
}

pub type CostMap = BTreeMap<(NodeId, NodeId), EdgeCost>;

fn weighted_terms<'a>(
    assignment: &'a FlowAssignment,
    costs: &'a CostMap,
) -> impl Iterator<Item = Result<f64, CostError>> + 'a {
    assignment
        .flows
        .iter()
        .filter(|(_, &f)| f > 0)
        .map(move |(&(a, b), &f)| {
            costs
                .get(&(a, b))
                .map(|d| f as f64 * d.0)
                .ok_or(CostError::MissingEdgeCost(a, b))
        })
}

/// `Σ f(i,j)·d(i,j)`.
pub fn sum_cost(assignment: &FlowAssignment, costs: &CostMap) -> Result<f64, CostError> {
    weighted_terms(assignment, costs).sum()
}

/// `max f(i,j)·d(i,j)`, zero for an empty assignment.
pub fn minimax_cost(assignment: &FlowAssignment, costs: &CostMap) -> Result<f64, CostError> {
    weighted_terms(assignment, costs).try_fold(0.0, |acc, t| Ok(f64::max(acc, t?)))
}

/// Sum of edge costs along consecutive pairs of `path`.
pub fn path_cost(path: &[NodeId], topology: &Topology) -> Result<f64, CostError> {
    path.windows(2)
        .map(|w| {
            let d = topology.edge_cost(w[0], w[1]);
            if d.is_finite() {
                Ok(d.0)
            } else {
                Err(CostError::MissingLink(w[0], w[1]))
            }
        })
        .sum()
}
