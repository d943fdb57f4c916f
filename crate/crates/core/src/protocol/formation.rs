//! Runs the flow-construction protocol over the simulated network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::node::{Outbox, ProtocolConfig, ProtocolNode};
use super::{steady_state, LedgerRole};
use crate::cost::path_cost;
use crate::domain::{NodeId, Topology};
use crate::simnet::{Engine, EventKind, NetConfig, RngStreams, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationConfig {
    pub protocol: ProtocolConfig,
    pub max_rounds: u64,
    /// Length of one phase (half a round); defaults to three maximum latencies plus one.
    pub phase_period: Option<f64>,
}

impl Default for FormationConfig {
    fn default() -> Self {
        FormationConfig {
            protocol: ProtocolConfig::default(),
            max_rounds: 300,
            phase_period: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FormationResult {
    /// Complete flows as `[data, relay.., data]`.
    pub paths: Vec<Vec<NodeId>>,
    pub rounds: u64,
    /// First round after which the steady-state window held.
    pub steady_round: Option<u64>,
    pub messages: u64,
    pub messages_by_kind: BTreeMap<String, u64>,
    /// Sum of complete path costs at the end of each round.
    pub cost_history: Vec<f64>,
    /// Pairings, changes and redirects applied during each round.
    pub changes_per_round: Vec<u64>,
    pub nodes: BTreeMap<NodeId, ProtocolNode>,
    pub trace_hash: String,
    /// Event trace lines, when the network config keeps them.
    pub trace: Option<String>,
    pub duration: f64,
}

impl FormationResult {
    pub fn sum_cost(&self, topology: &Topology) -> f64 {
        sum_path_cost(&self.paths, topology)
    }
}

pub fn sum_path_cost(paths: &[Vec<NodeId>], topology: &Topology) -> f64 {
    paths
        .iter()
        .map(|p| path_cost(p, topology).unwrap_or(f64::INFINITY))
        .sum()
}

fn dispatch(engine: &mut Engine, topology: &Topology, from: NodeId, out: Outbox) -> Result<(), SimError> {
    for (to, msg) in out {
        engine.send(topology, from, to, msg, 0.0)?;
    }
    Ok(())
}

/// Builds flows from scratch on the alive nodes of `topology` until steady state or
/// `max_rounds`, then lets in-flight messages drain.
pub fn run_formation(
    topology: &Topology,
    config: &FormationConfig,
    net: NetConfig,
    streams: &RngStreams,
) -> Result<FormationResult, SimError> {
    run_formation_observed(topology, config, net, streams, &mut |_| {})
}

/// As [`run_formation`]; `observe` sees each node right after every phase tick and
/// message handler it runs.
pub fn run_formation_observed(
    topology: &Topology,
    config: &FormationConfig,
    net: NetConfig,
    streams: &RngStreams,
    observe: &mut dyn FnMut(&ProtocolNode),
) -> Result<FormationResult, SimError> {
    let mut nodes: BTreeMap<NodeId, ProtocolNode> = topology
        .nodes
        .values()
        .filter(|n| n.alive)
        .map(|n| {
            let rng = streams.node_stream("annealing", n.id);
            (n.id, ProtocolNode::new(topology, n.id, config.protocol, rng))
        })
        .collect();
    let latency = match net.latency_bound {
        Some(b) => topology.max_latency().min(b),
        None => topology.max_latency(),
    };
    let period = config.phase_period.unwrap_or(3.0 * latency + 1.0);
    let mut engine = Engine::new(net);
    let mut last_change: Option<u64> = None;
    let mut seen_changes = 0u64;
    let mut steady_round = None;
    let mut cost_history = Vec::new();
    let mut changes_per_round = Vec::new();
    let mut rounds = 0;
    for round in 0..config.max_rounds {
        for half in 0..2 {
            let phase = 2 * round + half;
            let ids: Vec<NodeId> = nodes.keys().copied().collect();
            for id in ids {
                let node = nodes.get_mut(&id).expect("node");
                let out = node.on_phase(phase);
                observe(node);
                dispatch(&mut engine, topology, id, out)?;
            }
            let limit = (phase + 1) as f64 * period - period * 1e-9;
            pump(&mut engine, topology, &mut nodes, limit, observe)?;
        }
        rounds = round + 1;
        let changes: u64 = nodes.values().map(|n| n.changes).sum();
        changes_per_round.push(changes - seen_changes);
        if changes != seen_changes {
            seen_changes = changes;
            last_change = Some(round);
        }
        cost_history.push(sum_path_cost(&extract_paths(&nodes), topology));
        if steady_state(last_change, rounds, config.protocol.window) {
            steady_round = Some(round);
            break;
        }
    }
    pump(&mut engine, topology, &mut nodes, f64::INFINITY, observe)?;
    let paths = extract_paths(&nodes);
    Ok(FormationResult {
        paths,
        rounds,
        steady_round,
        messages: engine.total_sent(),
        messages_by_kind: engine
            .sent_counts()
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        cost_history,
        changes_per_round,
        nodes,
        trace_hash: engine.trace_hash(),
        trace: engine.config().keep_trace.then(|| engine.trace_lines()),
        duration: engine.now(),
    })
}

fn pump(
    engine: &mut Engine,
    topology: &Topology,
    nodes: &mut BTreeMap<NodeId, ProtocolNode>,
    limit: f64,
    observe: &mut dyn FnMut(&ProtocolNode),
) -> Result<(), SimError> {
    let mut failure = None;
    engine.run_until(
        limit,
        |_| false,
        |eng, ev| {
            if let EventKind::Deliver { from, to, msg, .. } = ev.kind {
                if let Some(node) = nodes.get_mut(&to) {
                    let out = node.on_message(from, msg);
                    observe(node);
                    if let Err(e) = dispatch(eng, topology, to, out) {
                        failure.get_or_insert(e);
                    }
                }
            }
        },
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Follows every source record of every data node down to its sink slot.
pub fn extract_paths(nodes: &BTreeMap<NodeId, ProtocolNode>) -> Vec<Vec<NodeId>> {
    let mut paths = Vec::new();
    for (&origin, node) in nodes {
        if node.ledger.role != LedgerRole::Data {
            continue;
        }
        for r in node.ledger.records.values() {
            let Some(mut hop) = r.downstream else {
                continue;
            };
            let mut path = vec![origin];
            let complete = loop {
                path.push(hop.peer);
                let Some(next) = nodes.get(&hop.peer) else {
                    break false;
                };
                let Some(id) = next.ledger.by_upstream(hop.id) else {
                    break false;
                };
                match next.ledger.records[&id].downstream {
                    Some(h) => hop = h,
                    None => break hop.peer == origin && next.ledger.role == LedgerRole::Data,
                }
                if path.len() > nodes.len() + 2 {
                    break false;
                }
            };
            if complete {
                paths.push(path);
            }
        }
    }
    paths
}

#[derive(Debug, Clone, PartialEq)]
pub enum InvariantViolation {
    Capacity { node: NodeId },
    Unmatched { node: NodeId, record: u32 },
    CostMismatch { node: NodeId, record: u32, recorded: f64, expected: f64 },
    Conservation { node: NodeId, sink: NodeId },
}

/// Capacity, pairing bijectivity and cost-to-sink consistency over quiesced ledgers.
pub fn check_invariants(nodes: &BTreeMap<NodeId, ProtocolNode>) -> Vec<InvariantViolation> {
    let mut v = Vec::new();
    for (&id, node) in nodes {
        let l = &node.ledger;
        if l.outgoing().count() as u32 + l.reserved > l.capacity {
            v.push(InvariantViolation::Capacity { node: id });
        }
        for r in l.records.values() {
            if let Some(up) = r.upstream {
                let ok = nodes
                    .get(&up.peer)
                    .and_then(|u| u.ledger.by_downstream(up.id))
                    .map(|rid| nodes[&up.peer].ledger.records[&rid].downstream.map(|h| h.peer) == Some(id))
                    .unwrap_or(false);
                if !ok {
                    v.push(InvariantViolation::Unmatched { node: id, record: r.id });
                }
            }
            if let Some(down) = r.downstream {
                let target = nodes
                    .get(&down.peer)
                    .and_then(|d| d.ledger.by_upstream(down.id).map(|rid| d.ledger.records[&rid]));
                match target {
                    Some(t) if t.upstream.map(|h| h.peer) == Some(id) => {
                        let expected = node.edge_to(down.peer).unwrap_or(f64::INFINITY) + t.cost_to_sink;
                        if (expected - r.cost_to_sink).abs() > 1e-6 {
                            v.push(InvariantViolation::CostMismatch {
                                node: id,
                                record: r.id,
                                recorded: r.cost_to_sink,
                                expected,
                            });
                        }
                    }
                    _ => v.push(InvariantViolation::Unmatched { node: id, record: r.id }),
                }
            }
        }
    }
    v
}

/// Relays whose inflow and outflow counts differ for some sink.
pub fn check_conservation(nodes: &BTreeMap<NodeId, ProtocolNode>) -> Vec<InvariantViolation> {
    let mut v = Vec::new();
    for (&id, node) in nodes {
        if node.ledger.role != LedgerRole::Relay {
            continue;
        }
        let mut balance: BTreeMap<NodeId, i64> = BTreeMap::new();
        for r in node.ledger.records.values() {
            let b = balance.entry(r.sink).or_insert(0);
            *b += i64::from(r.upstream.is_some()) - i64::from(r.downstream.is_some());
        }
        for (sink, b) in balance {
            if b != 0 {
                v.push(InvariantViolation::Conservation { node: id, sink });
            }
        }
    }
    v
}
