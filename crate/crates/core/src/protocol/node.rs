use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    accept_change, change_costs, handle_request_flow, on_flow_approved, redirect_costs, select_flow_target,
    should_propose, Annealer, CostTable, FlowId, FlowLedger, FlowReply, FlowTarget, Hop, LedgerRole, Objective,
    COST_EPSILON,
};
use crate::domain::{Direction, NodeId, StageId, Topology};
use crate::message::{EdgeRef, GossipEdge, Message, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub t0: f64,
    pub alpha: f64,
    pub objective: Objective,
    /// Quiet rounds required for steady state.
    pub window: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            t0: 1.7,
            alpha: 0.95,
            objective: Objective::Minimax,
            window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Pending {
    Flow { target: FlowTarget, hop: FlowId },
    Change { my_edge: EdgeRef, your_edge: EdgeRef },
    Redirect { segment: Segment },
}

#[derive(Debug, Clone, PartialEq)]
struct PeerView {
    edges: Vec<GossipEdge>,
    next_costs: BTreeMap<NodeId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Move {
    Change { my_edge: EdgeRef, your_edge: EdgeRef },
    Redirect { segment: Segment },
}

pub type Outbox = Vec<(NodeId, Message)>;

/// One node's flow-construction state machine. It reacts to round ticks and messages
/// and returns the messages to send.
#[derive(Debug, Clone)]
pub struct ProtocolNode {
    pub id: NodeId,
    pub stage: Option<StageId>,
    pub ledger: FlowLedger,
    pub table: CostTable,
    pub annealer: Annealer,
    config: ProtocolConfig,
    next: Vec<(NodeId, f64)>,
    prev: Vec<NodeId>,
    stage_peers: Vec<NodeId>,
    cost_to: BTreeMap<NodeId, f64>,
    gossip: BTreeMap<NodeId, PeerView>,
    pending: Option<Pending>,
    retried: bool,
    hop_seq: u32,
    announced: BTreeMap<NodeId, f64>,
    phase: u64,
    rng: ChaCha8Rng,
    /// Pairings, accepted changes and accepted redirects applied here.
    pub changes: u64,
    /// Accepted proposals that increased the local objective.
    pub uphill: u64,
}

impl ProtocolNode {
    /// Builds the node from the alive part of `topology`.
    pub fn new(topology: &Topology, id: NodeId, config: ProtocolConfig, rng: ChaCha8Rng) -> Self {
        let spec = topology.node(id).expect("node in topology");
        let alive = |n: &NodeId| topology.is_alive(*n);
        let next_ids: Vec<NodeId> = topology
            .stage_neighbors(id, Direction::Next)
            .unwrap_or_default()
            .into_iter()
            .filter(alive)
            .collect();
        let prev: Vec<NodeId> = topology
            .stage_neighbors(id, Direction::Prev)
            .unwrap_or_default()
            .into_iter()
            .filter(alive)
            .collect();
        let stage_peers: Vec<NodeId> = match spec.stage {
            Some(s) => topology.alive_stage_members(s).filter(|&n| n != id).collect(),
            None => Vec::new(),
        };
        let mut cost_to = BTreeMap::new();
        for &n in next_ids.iter().chain(prev.iter()) {
            let d = topology.edge_cost(id, n).0;
            if d.is_finite() {
                cost_to.insert(n, d);
            }
        }
        let next = next_ids
            .iter()
            .filter_map(|n| cost_to.get(n).map(|&d| (*n, d)))
            .collect();
        let ledger = if spec.is_data() {
            FlowLedger::data(id, spec.capacity)
        } else {
            FlowLedger::relay(id, spec.capacity)
        };
        ProtocolNode {
            id,
            stage: spec.stage,
            ledger,
            table: CostTable::default(),
            annealer: Annealer::new(config.t0, config.alpha),
            config,
            next,
            prev,
            stage_peers,
            cost_to,
            gossip: BTreeMap::new(),
            pending: None,
            retried: false,
            hop_seq: 0,
            announced: BTreeMap::new(),
            phase: 0,
            rng,
            changes: 0,
            uphill: 0,
        }
    }

    pub fn is_data(&self) -> bool {
        self.ledger.role == LedgerRole::Data
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_none()
    }

    pub fn edge_to(&self, peer: NodeId) -> Option<f64> {
        self.cost_to.get(&peer).copied()
    }

    fn alloc_hop(&mut self) -> FlowId {
        self.hop_seq += 1;
        FlowId::new(self.id, self.hop_seq)
    }

    /// One protocol phase. A round has two phases; local search runs only in phases
    /// whose parity matches the stage, so adjacent stages never move flows at once.
    pub fn on_phase(&mut self, phase: u64) -> Outbox {
        self.phase = phase;
        self.retried = false;
        let mut out = Vec::new();
        self.announce(&mut out);
        if !self.is_data() {
            self.gossip_out(&mut out);
        }
        if self.pending.is_some() {
            return out;
        }
        if !self.request_flow(&mut out) {
            let active = self.stage.map(|s| u64::from(s.0) % 2 == phase % 2).unwrap_or(false);
            if active {
                self.local_search(&mut out);
            }
        }
        out
    }

    pub fn on_message(&mut self, from: NodeId, msg: Message) -> Outbox {
        let mut out = Vec::new();
        match msg {
            Message::RequestFlow {
                sink,
                expected_cost,
                hop,
            } => match handle_request_flow(&mut self.ledger, from, sink, expected_cost, hop) {
                FlowReply::Approve { cost, .. } => {
                    self.changes += 1;
                    out.push((from, Message::Approve { hop, sink, cost }));
                    self.announce(&mut out);
                }
                FlowReply::Reject { current_cost } => {
                    out.push((
                        from,
                        Message::Reject {
                            hop,
                            sink,
                            current_cost,
                        },
                    ));
                }
            },
            Message::Approve { hop, sink, cost } => {
                if !matches!(self.pending, Some(Pending::Flow { hop: h, .. }) if h == hop) {
                    return out;
                }
                self.pending = None;
                let edge = self.cost_to.get(&from).copied().unwrap_or(f64::INFINITY);
                let (record, _) = on_flow_approved(&mut self.ledger, from, hop, sink, cost, edge)
                    .expect("capacity was reserved before requesting");
                self.changes += 1;
                self.push_cost_upstream(record, &mut out);
                self.announce(&mut out);
            }
            Message::Reject {
                hop,
                sink,
                current_cost,
            } => {
                if !matches!(self.pending, Some(Pending::Flow { hop: h, .. }) if h == hop) {
                    return out;
                }
                self.pending = None;
                self.ledger.reserved = self.ledger.reserved.saturating_sub(1);
                self.table.set(from, sink, current_cost);
                if !self.retried {
                    self.retried = true;
                    self.request_flow(&mut out);
                }
            }
            Message::CostBroadcast { sink, cost } => self.table.set(from, sink, cost),
            Message::StageGossip { edges, next_costs } => {
                self.gossip.insert(
                    from,
                    PeerView {
                        edges,
                        next_costs: next_costs.into_iter().collect(),
                    },
                );
            }
            Message::CostUpdate { hop, cost } => {
                if let Some(id) = self.ledger.by_downstream(hop) {
                    let r = self.ledger.records[&id];
                    if r.downstream.map(|h| h.peer) == Some(from) {
                        self.set_cost(id, self.cost_to[&from] + cost, &mut out);
                    }
                }
            }
            Message::NewUpstream { hop, upstream } => {
                if let Some(id) = self.ledger.by_upstream(hop) {
                    let r = self.ledger.records.get_mut(&id).expect("record exists");
                    r.upstream = Some(Hop { peer: upstream, id: hop });
                    let cost = r.cost_to_sink;
                    out.push((upstream, Message::CostUpdate { hop, cost }));
                }
            }
            Message::NewDownstream { hop, downstream, cost } => {
                if let Some(id) = self.ledger.by_downstream(hop) {
                    let edge = self.cost_to.get(&downstream).copied().unwrap_or(f64::INFINITY);
                    let r = self.ledger.records.get_mut(&id).expect("record exists");
                    r.downstream = Some(Hop {
                        peer: downstream,
                        id: hop,
                    });
                    self.set_cost(id, edge + cost, &mut out);
                }
            }
            Message::RequestChange { my_edge, your_edge, .. } => {
                if self.yield_to(from) && self.respond_change(from, my_edge, your_edge, &mut out) {
                    out.push((from, Message::ChangeAccept { my_edge, your_edge }));
                } else {
                    out.push((from, Message::ChangeDecline));
                }
            }
            Message::ChangeAccept { my_edge, your_edge } => {
                if !matches!(self.pending, Some(Pending::Change { .. })) {
                    return out;
                }
                self.pending = None;
                if let Some(id) = self.ledger.by_downstream(my_edge.hop) {
                    let edge = self.cost_to[&your_edge.peer];
                    let r = self.ledger.records.get_mut(&id).expect("record exists");
                    r.downstream = Some(Hop {
                        peer: your_edge.peer,
                        id: your_edge.hop,
                    });
                    out.push((
                        your_edge.peer,
                        Message::NewUpstream {
                            hop: your_edge.hop,
                            upstream: self.id,
                        },
                    ));
                    self.set_cost(id, edge + your_edge.downstream_cost, &mut out);
                }
            }
            Message::ChangeDecline => {
                if matches!(self.pending, Some(Pending::Change { .. })) {
                    self.pending = None;
                }
            }
            Message::RequestRedirect { segment, claimed_gain } => {
                if self.yield_to(from) && self.respond_redirect(segment, claimed_gain) {
                    out.push((from, Message::RedirectAccept { segment }));
                } else {
                    out.push((from, Message::RedirectDecline));
                }
            }
            Message::RedirectAccept { segment } => {
                if !matches!(self.pending, Some(Pending::Redirect { .. })) {
                    return out;
                }
                self.pending = None;
                self.ledger.reserved = self.ledger.reserved.saturating_sub(1);
                let cost = self.cost_to[&segment.downstream] + segment.downstream_cost;
                self.ledger.insert(
                    segment.sink,
                    cost,
                    Some(Hop {
                        peer: segment.upstream,
                        id: segment.in_hop,
                    }),
                    Some(Hop {
                        peer: segment.downstream,
                        id: segment.out_hop,
                    }),
                );
                out.push((
                    segment.upstream,
                    Message::NewDownstream {
                        hop: segment.in_hop,
                        downstream: self.id,
                        cost,
                    },
                ));
                out.push((
                    segment.downstream,
                    Message::NewUpstream {
                        hop: segment.out_hop,
                        upstream: self.id,
                    },
                ));
            }
            Message::RedirectDecline => {
                if matches!(self.pending, Some(Pending::Redirect { .. })) {
                    self.pending = None;
                    self.ledger.reserved = self.ledger.reserved.saturating_sub(1);
                }
            }
            _ => {}
        }
        out
    }

    fn request_flow(&mut self, out: &mut Outbox) -> bool {
        let Some(target) = select_flow_target(&self.ledger, &self.table, &self.next) else {
            return false;
        };
        let hop = self.alloc_hop();
        self.ledger.reserved += 1;
        self.pending = Some(Pending::Flow { target, hop });
        out.push((
            target.peer,
            Message::RequestFlow {
                sink: target.sink,
                expected_cost: target.expected_cost,
                hop,
            },
        ));
        true
    }

    fn set_cost(&mut self, record: u32, cost: f64, out: &mut Outbox) {
        let r = self.ledger.records.get_mut(&record).expect("record exists");
        let changed = (r.cost_to_sink - cost).abs() > COST_EPSILON;
        r.cost_to_sink = cost;
        if changed {
            self.push_cost_upstream(record, out);
            self.announce(out);
        }
    }

    fn push_cost_upstream(&self, record: u32, out: &mut Outbox) {
        let r = &self.ledger.records[&record];
        if let Some(up) = r.upstream {
            if self.ledger.role == LedgerRole::Relay {
                out.push((
                    up.peer,
                    Message::CostUpdate {
                        hop: up.id,
                        cost: r.cost_to_sink,
                    },
                ));
            }
        }
    }

    /// Broadcasts advertised costs that changed since the last announcement.
    fn announce(&mut self, out: &mut Outbox) {
        let current = self.ledger.advertised_sinks();
        let mut sinks: Vec<NodeId> = current.keys().chain(self.announced.keys()).copied().collect();
        sinks.sort();
        sinks.dedup();
        for sink in sinks {
            let now = current.get(&sink).copied().unwrap_or(f64::INFINITY);
            let before = self.announced.get(&sink).copied().unwrap_or(f64::INFINITY);
            let same = (now.is_infinite() && before.is_infinite()) || (now - before).abs() <= COST_EPSILON;
            if same {
                continue;
            }
            for &p in &self.prev {
                out.push((p, Message::CostBroadcast { sink, cost: now }));
            }
            if now.is_finite() {
                self.announced.insert(sink, now);
            } else {
                self.announced.remove(&sink);
            }
        }
    }

    fn gossip_out(&self, out: &mut Outbox) {
        let edges: Vec<GossipEdge> = self
            .ledger
            .outgoing()
            .map(|r| {
                let down = r.downstream.expect("outgoing record");
                let cost_out = self.cost_to.get(&down.peer).copied().unwrap_or(f64::INFINITY);
                GossipEdge {
                    upstream: r.upstream,
                    downstream: down,
                    sink: r.sink,
                    cost_in: r.upstream.and_then(|u| self.cost_to.get(&u.peer).copied()),
                    cost_out,
                    downstream_cost: (r.cost_to_sink - cost_out).max(0.0),
                }
            })
            .collect();
        for &p in &self.stage_peers {
            out.push((
                p,
                Message::StageGossip {
                    edges: edges.clone(),
                    next_costs: self.next.clone(),
                },
            ));
        }
    }

    /// Proposes the best Change or Redirect visible through gossip, if any.
    fn local_search(&mut self, out: &mut Outbox) {
        let objective = self.config.objective;
        let mut best: Option<(f64, f64, u8, NodeId, FlowId, Move)> = None;
        let mut consider = |cur: f64, new: f64, kind: u8, peer: NodeId, hop: FlowId, mv: Move| {
            let delta = new - cur;
            let better = match &best {
                None => true,
                Some((d, _, k, p, h, _)) => {
                    delta < *d - COST_EPSILON || ((delta - *d).abs() <= COST_EPSILON && (kind, peer, hop) < (*k, *p, *h))
                }
            };
            if better {
                best = Some((delta, cur, kind, peer, hop, mv));
            }
        };
        for r in self.ledger.outgoing() {
            let down = r.downstream.expect("outgoing record");
            let Some(&mine) = self.cost_to.get(&down.peer) else {
                continue;
            };
            for (&m, view) in &self.gossip {
                let Some(&other_swapped) = view.next_costs.get(&down.peer) else {
                    continue;
                };
                for e in &view.edges {
                    if e.sink != r.sink || e.downstream.peer == down.peer {
                        continue;
                    }
                    let Some(&mine_swapped) = self.cost_to.get(&e.downstream.peer) else {
                        continue;
                    };
                    let (cur, new) = change_costs(objective, mine, e.cost_out, mine_swapped, other_swapped);
                    let my_edge = EdgeRef {
                        owner: self.id,
                        hop: down.id,
                        peer: down.peer,
                        sink: r.sink,
                        downstream_cost: (r.cost_to_sink - mine).max(0.0),
                    };
                    let your_edge = EdgeRef {
                        owner: m,
                        hop: e.downstream.id,
                        peer: e.downstream.peer,
                        sink: e.sink,
                        downstream_cost: e.downstream_cost,
                    };
                    consider(cur, new, 0, m, e.downstream.id, Move::Change { my_edge, your_edge });
                }
            }
        }
        if self.ledger.capacity_remaining() > 0 {
            for (&m, view) in &self.gossip {
                for e in &view.edges {
                    let (Some(up), Some(cost_in)) = (e.upstream, e.cost_in) else {
                        continue;
                    };
                    let (Some(&a_me), Some(&me_c)) = (self.cost_to.get(&up.peer), self.cost_to.get(&e.downstream.peer))
                    else {
                        continue;
                    };
                    let (cur, new) = redirect_costs(objective, (cost_in, e.cost_out), (a_me, me_c));
                    let segment = Segment {
                        upstream: up.peer,
                        in_hop: up.id,
                        owner: m,
                        downstream: e.downstream.peer,
                        out_hop: e.downstream.id,
                        sink: e.sink,
                        downstream_cost: e.downstream_cost,
                    };
                    consider(cur, new, 1, m, e.downstream.id, Move::Redirect { segment });
                }
            }
        }
        let Some((delta, cur, _, peer, _, mv)) = best else {
            return;
        };
        let new = cur + delta;
        let u = (delta > COST_EPSILON).then(|| self.rng.gen::<f64>());
        if !should_propose(cur, new, self.annealer.temperature, u) {
            return;
        }
        self.annealer.cool();
        if delta > COST_EPSILON {
            self.uphill += 1;
        }
        match mv {
            Move::Change { my_edge, your_edge } => {
                self.pending = Some(Pending::Change { my_edge, your_edge });
                out.push((
                    peer,
                    Message::RequestChange {
                        my_edge,
                        your_edge,
                        claimed_gain: -delta,
                    },
                ));
            }
            Move::Redirect { segment } => {
                self.ledger.reserved += 1;
                self.pending = Some(Pending::Redirect { segment });
                out.push((
                    peer,
                    Message::RequestRedirect {
                        segment,
                        claimed_gain: -delta,
                    },
                ));
            }
        }
    }

    /// Settles two nodes proposing to each other: the higher id withdraws its own
    /// proposal and answers; the lower id declines, so the withdrawn request can never
    /// be accepted. Returns false when the incoming request must be declined.
    fn yield_to(&mut self, from: NodeId) -> bool {
        let target = match &self.pending {
            Some(Pending::Change { your_edge, .. }) => your_edge.owner,
            Some(Pending::Redirect { segment }) => segment.owner,
            _ => return true,
        };
        if target != from {
            return true;
        }
        if from > self.id {
            return false;
        }
        if matches!(self.pending, Some(Pending::Redirect { .. })) {
            self.ledger.reserved = self.ledger.reserved.saturating_sub(1);
        }
        self.pending = None;
        true
    }

    /// The record behind this node's own pending Change must not move under it.
    fn locked(&self, hop: FlowId) -> bool {
        matches!(&self.pending, Some(Pending::Change { my_edge, .. }) if my_edge.hop == hop)
    }

    fn respond_change(&mut self, from: NodeId, my_edge: EdgeRef, your_edge: EdgeRef, out: &mut Outbox) -> bool {
        if your_edge.owner != self.id || self.locked(your_edge.hop) {
            return false;
        }
        let Some(id) = self.ledger.by_downstream(your_edge.hop) else {
            return false;
        };
        let r = self.ledger.records[&id];
        if r.downstream.map(|h| h.peer) != Some(your_edge.peer) || r.sink != my_edge.sink {
            return false;
        }
        let Some(view) = self.gossip.get(&from) else {
            return false;
        };
        let (Some(&other), Some(&other_swapped)) = (
            view.next_costs.get(&my_edge.peer),
            view.next_costs.get(&your_edge.peer),
        ) else {
            return false;
        };
        let (Some(&mine), Some(&mine_swapped)) = (self.cost_to.get(&your_edge.peer), self.cost_to.get(&my_edge.peer))
        else {
            return false;
        };
        if !accept_change(self.config.objective, mine, other, mine_swapped, other_swapped) {
            return false;
        }
        let rec = self.ledger.records.get_mut(&id).expect("record exists");
        rec.downstream = Some(Hop {
            peer: my_edge.peer,
            id: my_edge.hop,
        });
        self.changes += 1;
        self.annealer.cool();
        out.push((
            my_edge.peer,
            Message::NewUpstream {
                hop: my_edge.hop,
                upstream: self.id,
            },
        ));
        self.set_cost(id, mine_swapped + my_edge.downstream_cost, out);
        true
    }

    /// The owner of a redirected segment checks that it still holds it and runs its own
    /// annealing test on the claimed gain.
    fn respond_redirect(&mut self, segment: Segment, claimed_gain: f64) -> bool {
        if segment.owner != self.id || self.locked(segment.out_hop) {
            return false;
        }
        if claimed_gain < -COST_EPSILON {
            let u = self.rng.gen::<f64>();
            if !should_propose(0.0, -claimed_gain, self.annealer.temperature, Some(u)) {
                return false;
            }
        }
        let want_up = Hop {
            peer: segment.upstream,
            id: segment.in_hop,
        };
        let want_down = Hop {
            peer: segment.downstream,
            id: segment.out_hop,
        };
        let found = self
            .ledger
            .records
            .values()
            .find(|r| r.upstream == Some(want_up) && r.downstream == Some(want_down))
            .map(|r| r.id);
        let Some(id) = found else {
            return false;
        };
        self.ledger.records.remove(&id);
        self.changes += 1;
        self.annealer.cool();
        true
    }
}
