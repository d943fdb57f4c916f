//! Identifiers, node/link/topology types and topology validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct StageId(pub u32);

impl StageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Holds training data; both source and sink of its own flows.
    Data,
    /// Serves one pipeline stage.
    Relay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: Role,
    /// `None` for data nodes, which bracket the pipeline.
    pub stage: Option<StageId>,
    /// Concurrent microbatch flow slots.
    pub capacity: u32,
    /// Simulated time per microbatch per pass.
    pub compute_cost: f64,
    pub alive: bool,
}

impl NodeSpec {
    pub fn relay(id: u32, stage: u32, capacity: u32, compute_cost: f64) -> Self {
        NodeSpec {
            id: NodeId(id),
            role: Role::Relay,
            stage: Some(StageId(stage)),
            capacity,
            compute_cost,
            alive: true,
        }
    }

    pub fn data(id: u32, capacity: u32) -> Self {
        NodeSpec {
            id: NodeId(id),
            role: Role::Data,
            stage: None,
            capacity,
            compute_cost: 0.0,
            alive: true,
        }
    }

    pub fn is_data(&self) -> bool {
        self.role == Role::Data
    }
}

/// One direction of a link. The reverse direction is a separate spec and may differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub latency: f64,
    pub bandwidth: f64,
}

impl LinkSpec {
    pub fn new(from: NodeId, to: NodeId, latency: f64, bandwidth: f64) -> Self {
        LinkSpec {
            from,
            to,
            latency,
            bandwidth,
        }
    }

    /// Delivery delay for a payload of `size` data units.
    pub fn transit_time(&self, size: f64) -> f64 {
        self.latency + size / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Next,
    Prev,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("stage {0} has no relay")]
    EmptyStage(StageId),
    #[error("{0} has no link to any node of the following stage")]
    MissingLink(NodeId),
    #[error("link {0}->{1} has non-positive bandwidth")]
    NonPositiveBandwidth(NodeId, NodeId),
    #[error("negative latency on link {0}->{1}")]
    NegativeLatency(NodeId, NodeId),
    #[error("{0} has zero capacity")]
    ZeroCapacity(NodeId),
    #[error("relay {0} has no stage in [0, {1})")]
    BadStage(NodeId, u32),
    #[error("topology has no data node")]
    NoDataNode,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Every violation found by [`Topology::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid topology: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct TopologyErrors(pub Vec<TopologyError>);

impl TopologyErrors {
    pub fn contains(&self, e: &TopologyError) -> bool {
        self.0.contains(e)
    }
}

/// The static world the protocol runs over. Liveness and stage membership may change
/// during a run (crashes, admissions); capacities never do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: BTreeMap<NodeId, NodeSpec>,
    pub links: BTreeMap<(NodeId, NodeId), LinkSpec>,
    pub num_stages: u32,
    pub activation_size: f64,
}

impl Topology {
    /// Builds and validates a topology. Node ids must be unique.
    pub fn new(
        nodes: Vec<NodeSpec>,
        links: Vec<LinkSpec>,
        num_stages: u32,
        activation_size: f64,
    ) -> Result<Topology, TopologyErrors> {
        let mut errors = Vec::new();
        let mut map = BTreeMap::new();
        for n in nodes {
            if map.contains_key(&n.id) {
                if !errors.contains(&TopologyError::DuplicateNodeId(n.id)) {
                    errors.push(TopologyError::DuplicateNodeId(n.id));
                }
                continue;
            }
            map.insert(n.id, n);
        }
        let links = links.into_iter().map(|l| ((l.from, l.to), l)).collect();
        let t = Topology {
            nodes: map,
            links,
            num_stages,
            activation_size,
        };
        match t.validate() {
            Ok(()) if errors.is_empty() => Ok(t),
            Ok(()) => Err(TopologyErrors(errors)),
            Err(TopologyErrors(more)) => {
                errors.extend(more);
                Err(TopologyErrors(errors))
            }
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), TopologyErrors> {
        let mut errors = Vec::new();
        if !self.nodes.values().any(|n| n.is_data()) {
            errors.push(TopologyError::NoDataNode);
        }
        for n in self.nodes.values() {
            if n.capacity == 0 {
                errors.push(TopologyError::ZeroCapacity(n.id));
            }
            if n.role == Role::Relay {
                match n.stage {
                    Some(s) if s.0 < self.num_stages => {}
                    _ => errors.push(TopologyError::BadStage(n.id, self.num_stages)),
                }
            }
        }
        for s in 0..self.num_stages {
            if self.stage_members(StageId(s)).next().is_none() {
                errors.push(TopologyError::EmptyStage(StageId(s)));
            }
        }
        for l in self.links.values() {
            if !(l.bandwidth > 0.0) {
                errors.push(TopologyError::NonPositiveBandwidth(l.from, l.to));
            }
            if l.latency < 0.0 {
                errors.push(TopologyError::NegativeLatency(l.from, l.to));
            }
        }
        for n in self.nodes.values().filter(|n| n.role == Role::Relay) {
            let Some(stage) = n.stage else { continue };
            if stage.0 >= self.num_stages {
                continue;
            }
            let successors: Vec<NodeId> = if stage.0 + 1 == self.num_stages {
                self.data_nodes().collect()
            } else {
                self.stage_members(StageId(stage.0 + 1)).collect()
            };
            if !successors.is_empty() && !successors.iter().any(|s| self.link(n.id, *s).is_some())
            {
                errors.push(TopologyError::MissingLink(n.id));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TopologyErrors(errors))
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeSpec> {
        self.nodes.get_mut(&id)
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> Option<&LinkSpec> {
        self.links.get(&(from, to))
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.alive)
    }

    pub fn data_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.values().filter(|n| n.is_data()).map(|n| n.id)
    }

    pub fn alive_data_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(|n| n.is_data() && n.alive)
            .map(|n| n.id)
    }

    /// All relays assigned to `stage`, alive or not.
    pub fn stage_members(&self, stage: StageId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(move |n| n.role == Role::Relay && n.stage == Some(stage))
            .map(|n| n.id)
    }

    pub fn alive_stage_members(&self, stage: StageId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(move |n| n.role == Role::Relay && n.alive && n.stage == Some(stage))
            .map(|n| n.id)
    }

    pub fn relays(&self) -> impl Iterator<Item = &NodeSpec> + '_ {
        self.nodes.values().filter(|n| n.role == Role::Relay)
    }

    pub fn stage_of(&self, id: NodeId) -> Option<StageId> {
        self.nodes.get(&id).and_then(|n| n.stage)
    }

    /// Alive nodes in the adjacent stage. Data nodes are the previous stage of stage 0
    /// and the next stage of the last stage.
    pub fn stage_neighbors(
        &self,
        n: NodeId,
        direction: Direction,
    ) -> Result<BTreeSet<NodeId>, TopologyError> {
        let spec = self.nodes.get(&n).ok_or(TopologyError::UnknownNode(n))?;
        let last = self.num_stages.saturating_sub(1);
        let out = match (spec.stage, direction) {
            (None, Direction::Next) => self.alive_stage_members(StageId(0)).collect(),
            (None, Direction::Prev) => self.alive_stage_members(StageId(last)).collect(),
            (Some(s), Direction::Next) if s.0 >= last => self.alive_data_nodes().collect(),
            (Some(s), Direction::Next) => self.alive_stage_members(StageId(s.0 + 1)).collect(),
            (Some(s), Direction::Prev) if s.0 == 0 => self.alive_data_nodes().collect(),
            (Some(s), Direction::Prev) => self.alive_stage_members(StageId(s.0 - 1)).collect(),
        };
        Ok(out)
    }

    /// Total capacity of the alive relays of `stage`.
    pub fn stage_capacity(&self, stage: StageId) -> u32 {
        self.alive_stage_members(stage)
            .map(|id| self.nodes[&id].capacity)
            .sum()
    }

    pub fn max_latency(&self) -> f64 {
        self.links.values().map(|l| l.latency).fold(0.0, f64::max)
    }

    pub fn min_bandwidth(&self) -> f64 {
        self.links
            .values()
            .map(|l| l.bandwidth)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_compute(&self) -> f64 {
        self.nodes
            .values()
            .map(|n| n.compute_cost)
            .fold(0.0, f64::max)
    }

    pub fn next_free_id(&self) -> NodeId {
        NodeId(self.nodes.keys().last().map_or(0, |id| id.0 + 1))
    }
}

/// A microbatch in flight. `path[0]` is always the origin data node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microbatch {
    pub id: u64,
    pub origin: NodeId,
    pub path: Vec<NodeId>,
}

impl Microbatch {
    pub fn new(id: u64, origin: NodeId) -> Self {
        Microbatch {
            id,
            origin,
            path: vec![origin],
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Symmetric complete link set over `nodes` with a constant latency and bandwidth.
    pub fn full_links(nodes: &[NodeSpec], latency: f64, bandwidth: f64) -> Vec<LinkSpec> {
        let mut links = Vec::new();
        for a in nodes {
            for b in nodes {
                if a.id != b.id {
                    links.push(LinkSpec::new(a.id, b.id, latency, bandwidth));
                }
            }
        }
        links
    }

    /// One data node (id 0) and `per_stage` relays in each of `stages` stages.
    pub fn layered(stages: u32, per_stage: u32, capacity: u32) -> Topology {
        let mut nodes = vec![NodeSpec::data(0, capacity * per_stage)];
        let mut id = 1;
        for s in 0..stages {
            for _ in 0..per_stage {
                nodes.push(NodeSpec::relay(id, s, capacity, 1.0));
                id += 1;
            }
        }
        let links = full_links(&nodes, 1.0, 10.0);
        Topology::new(nodes, links, stages, 1.0).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn duplicate_ids_are_reported() {
        let nodes = vec![
            NodeSpec::data(0, 1),
            NodeSpec::relay(3, 0, 1, 1.0),
            NodeSpec::relay(3, 0, 1, 1.0),
        ];
        let links = full_links(&nodes[..2], 1.0, 1.0);
        let err = Topology::new(nodes, links, 1, 1.0).unwrap_err();
        assert!(err.contains(&TopologyError::DuplicateNodeId(NodeId(3))));
    }

    #[test]
    fn minimal_instance_is_valid() {
        let nodes = vec![
            NodeSpec::data(0, 1),
            NodeSpec::relay(1, 0, 1, 1.0),
            NodeSpec::relay(2, 1, 1, 1.0),
        ];
        let links = full_links(&nodes, 1.0, 1.0);
        let t = Topology::new(nodes, links, 2, 1.0).unwrap();
        assert_eq!(t.nodes.len(), 3);
    }

    #[test]
    fn empty_stage_is_reported() {
        let nodes = vec![NodeSpec::data(0, 1), NodeSpec::relay(1, 0, 1, 1.0)];
        let links = full_links(&nodes, 1.0, 1.0);
        let err = Topology::new(nodes, links, 2, 1.0).unwrap_err();
        assert!(err.contains(&TopologyError::EmptyStage(StageId(1))));
    }

    #[test]
    fn missing_link_and_bandwidth_are_reported_together() {
        let nodes = vec![
            NodeSpec::data(0, 1),
            NodeSpec::relay(1, 0, 1, 1.0),
            NodeSpec::relay(2, 1, 1, 1.0),
        ];
        let links = vec![
            LinkSpec::new(NodeId(0), NodeId(1), 1.0, 0.0),
            LinkSpec::new(NodeId(2), NodeId(0), 1.0, 1.0),
        ];
        let err = Topology::new(nodes, links, 2, 1.0).unwrap_err();
        assert!(err.contains(&TopologyError::MissingLink(NodeId(1))));
        assert!(err.contains(&TopologyError::NonPositiveBandwidth(NodeId(0), NodeId(1))));
    }

    #[test]
    fn stage_neighbors_wrap_to_data_nodes() {
        let t = layered(3, 2, 1);
        let data: BTreeSet<_> = [NodeId(0)].into();
        assert_eq!(t.stage_neighbors(NodeId(1), Direction::Prev).unwrap(), data);
        assert_eq!(t.stage_neighbors(NodeId(5), Direction::Next).unwrap(), data);
        let s2: BTreeSet<_> = [NodeId(5), NodeId(6)].into();
        assert_eq!(t.stage_neighbors(NodeId(3), Direction::Next).unwrap(), s2);
        assert_eq!(
            t.stage_neighbors(NodeId(99), Direction::Next),
            Err(TopologyError::UnknownNode(NodeId(99)))
        );
    }

    #[test]
    fn dead_nodes_are_not_neighbors() {
        let mut t = layered(2, 2, 1);
        t.node_mut(NodeId(3)).unwrap().alive = false;
        let next = t.stage_neighbors(NodeId(1), Direction::Next).unwrap();
        assert_eq!(next, [NodeId(4)].into());
    }
}
