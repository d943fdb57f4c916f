//! Decentralized flow construction.
//!
//! Every node keeps a [`FlowLedger`] of flow records. A record is one node's share of a
//! flow: the hop it receives on (`upstream`) and the hop it sends on (`downstream`).
//! Hop ids are allocated by the sender of a hop and stay fixed when either endpoint is
//! replaced, so notifications about different ends of a record never conflict.

mod formation;
mod node;

pub use formation::{
    check_conservation, check_invariants, extract_paths, run_formation, run_formation_observed, sum_path_cost, FormationConfig, FormationResult,
    InvariantViolation,
};
pub use node::{Outbox, ProtocolConfig, ProtocolNode};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::NodeId;

/// Tolerance for matching advertised costs.
pub const COST_EPSILON: f64 = 1e-9;

/// Globally unique hop id: the allocating node in the high half, a counter below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u64);

impl FlowId {
    pub fn new(owner: NodeId, seq: u32) -> Self {
        FlowId((u64::from(owner.0) << 32) | u64::from(seq))
    }
}

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}:{}", self.0 >> 32, self.0 & 0xffff_ffff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hop {
    pub peer: NodeId,
    pub id: FlowId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    /// Local record id.
    pub id: u32,
    pub sink: NodeId,
    pub cost_to_sink: f64,
    pub upstream: Option<Hop>,
    pub downstream: Option<Hop>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{0} has no capacity left for a new outflow")]
    CapacityExhausted(NodeId),
}

/// How a data node or relay interprets its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LedgerRole {
    Relay,
    /// Sink slots (records without downstream) plus source records (without upstream).
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowLedger {
    pub owner: NodeId,
    pub role: LedgerRole,
    pub capacity: u32,
    pub records: BTreeMap<u32, FlowRecord>,
    /// Outflows requested but not yet approved; they hold capacity.
    pub reserved: u32,
    next_id: u32,
}

impl FlowLedger {
    pub fn relay(owner: NodeId, capacity: u32) -> Self {
        FlowLedger {
            owner,
            role: LedgerRole::Relay,
            capacity,
            records: BTreeMap::new(),
            reserved: 0,
            next_id: 0,
        }
    }

    /// A data node starts with `capacity` free sink slots at cost 0.
    pub fn data(owner: NodeId, capacity: u32) -> Self {
        let mut l = FlowLedger {
            owner,
            role: LedgerRole::Data,
            capacity,
            records: BTreeMap::new(),
            reserved: 0,
            next_id: 0,
        };
        for _ in 0..capacity {
            l.insert(owner, 0.0, None, None);
        }
        l
    }

    pub fn insert(&mut self, sink: NodeId, cost: f64, upstream: Option<Hop>, downstream: Option<Hop>) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        self.records.insert(
            id,
            FlowRecord {
                id,
                sink,
                cost_to_sink: cost,
                upstream,
                downstream,
            },
        );
        id
    }

    /// Records this node sends on (relay outflows or data-node source records).
    pub fn outgoing(&self) -> impl Iterator<Item = &FlowRecord> + '_ {
        self.records.values().filter(|r| r.downstream.is_some())
    }

    pub fn capacity_remaining(&self) -> u32 {
        let used = self.outgoing().count() as u32 + self.reserved;
        self.capacity.saturating_sub(used)
    }

    pub fn paired(&self) -> impl Iterator<Item = &FlowRecord> + '_ {
        self.records
            .values()
            .filter(|r| r.upstream.is_some() && r.downstream.is_some())
    }

    /// Records committed downstream that still want a supplier. For a data node these
    /// are its free sink slots.
    pub fn unpaired_outflow(&self) -> impl Iterator<Item = &FlowRecord> + '_ {
        let role = self.role;
        self.records.values().filter(move |r| match role {
            LedgerRole::Relay => r.upstream.is_none() && r.downstream.is_some(),
            LedgerRole::Data => r.upstream.is_none() && r.downstream.is_none(),
        })
    }

    /// Records receiving without a downstream commitment. Data-node slots are terminal
    /// and never count.
    pub fn unpaired_inflow(&self) -> impl Iterator<Item = &FlowRecord> + '_ {
        let role = self.role;
        self.records
            .values()
            .filter(move |r| role == LedgerRole::Relay && r.upstream.is_some() && r.downstream.is_none())
    }

    pub fn is_stable(&self) -> bool {
        self.unpaired_outflow().next().is_none() && self.unpaired_inflow().next().is_none()
            || self.role == LedgerRole::Data
    }

    /// Minimum cost over unpaired outflows to `sink`, `+inf` if none.
    pub fn advertised(&self, sink: NodeId) -> f64 {
        self.unpaired_outflow()
            .filter(|r| r.sink == sink)
            .map(|r| r.cost_to_sink)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn advertised_sinks(&self) -> BTreeMap<NodeId, f64> {
        let mut out = BTreeMap::new();
        for r in self.unpaired_outflow() {
            let e = out.entry(r.sink).or_insert(f64::INFINITY);
            *e = f64::min(*e, r.cost_to_sink);
        }
        out
    }

    pub fn by_downstream(&self, hop: FlowId) -> Option<u32> {
        self.records
            .values()
            .find(|r| r.downstream.map(|h| h.id) == Some(hop))
            .map(|r| r.id)
    }

    pub fn by_upstream(&self, hop: FlowId) -> Option<u32> {
        self.records
            .values()
            .find(|r| r.upstream.map(|h| h.id) == Some(hop))
            .map(|r| r.id)
    }
}

/// Per (peer, sink) advertised cost to sink; absent means `+inf`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    entries: BTreeMap<(NodeId, NodeId), f64>,
}

impl CostTable {
    pub fn get(&self, peer: NodeId, sink: NodeId) -> f64 {
        self.entries.get(&(peer, sink)).copied().unwrap_or(f64::INFINITY)
    }

    pub fn set(&mut self, peer: NodeId, sink: NodeId, cost: f64) {
        if cost.is_finite() {
            self.entries.insert((peer, sink), cost.max(0.0));
        } else {
            self.entries.remove(&(peer, sink));
        }
    }

    pub fn offers(&self, peer: NodeId) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.entries
            .range((peer, NodeId(0))..=(peer, NodeId(u32::MAX)))
            .map(|(&(_, sink), &c)| (sink, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annealer {
    pub t0: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub accepted: u32,
}

impl Annealer {
    pub fn new(t0: f64, alpha: f64) -> Self {
        Annealer {
            t0,
            temperature: t0,
            alpha,
            accepted: 0,
        }
    }

    pub fn cool(&mut self) {
        self.temperature *= self.alpha;
        self.accepted += 1;
    }

    pub fn reset(&mut self) {
        self.temperature = self.t0;
        self.accepted = 0;
    }
}

pub fn annealing_accept(cost_current: f64, cost_new: f64, temperature: f64, u: f64) -> bool {
    ((cost_current - cost_new) / temperature).exp() > u
}

/// What local moves try to reduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Largest of the edge costs involved.
    #[default]
    Minimax,
    /// Sum of the edge costs involved.
    Sum,
}

impl Objective {
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            Objective::Minimax => a.max(b),
            Objective::Sum => a + b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTarget {
    pub peer: NodeId,
    pub sink: NodeId,
    pub expected_cost: f64,
    pub total: f64,
}

/// Picks the next-stage peer minimizing advertised cost plus edge cost. `peers` pairs
/// each next-stage node with this node's edge cost to it.
pub fn select_flow_target(ledger: &FlowLedger, table: &CostTable, peers: &[(NodeId, f64)]) -> Option<FlowTarget> {
    let wanted: Option<NodeId> = ledger.unpaired_inflow().map(|r| r.sink).min();
    let allowed = |sink: NodeId| match (wanted, ledger.role) {
        (Some(s), _) => sink == s,
        (None, LedgerRole::Data) => sink == ledger.owner,
        (None, LedgerRole::Relay) => true,
    };
    if wanted.is_none() && !(ledger.is_stable() && ledger.capacity_remaining() > 0) {
        return None;
    }
    if ledger.role == LedgerRole::Data && ledger.capacity_remaining() == 0 {
        return None;
    }
    let mut best: Option<FlowTarget> = None;
    for &(peer, edge) in peers {
        for (sink, cost) in table.offers(peer) {
            if !allowed(sink) || !edge.is_finite() {
                continue;
            }
            let total = cost + edge;
            let better = match &best {
                None => true,
                Some(b) => total < b.total || (total == b.total && (peer, sink) < (b.peer, b.sink)),
            };
            if better {
                best = Some(FlowTarget {
                    peer,
                    sink,
                    expected_cost: cost,
                    total,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowReply {
    Approve { record: u32, cost: f64 },
    Reject { current_cost: f64 },
}

/// Pairs the lowest-id unpaired outflow whose sink and cost match the request.
pub fn handle_request_flow(
    ledger: &mut FlowLedger,
    requester: NodeId,
    sink: NodeId,
    expected_cost: f64,
    hop: FlowId,
) -> FlowReply {
    let found = ledger
        .unpaired_outflow()
        .find(|r| r.sink == sink && (r.cost_to_sink - expected_cost).abs() <= COST_EPSILON)
        .map(|r| r.id);
    match found {
        Some(id) => {
            let r = ledger.records.get_mut(&id).expect("record just found");
            r.upstream = Some(Hop {
                peer: requester,
                id: hop,
            });
            FlowReply::Approve {
                record: id,
                cost: r.cost_to_sink,
            }
        }
        None => FlowReply::Reject {
            current_cost: ledger.advertised(sink),
        },
    }
}

/// Records the approved outflow; returns the record id and its cost to sink. The
/// reservation made when requesting is released here.
pub fn on_flow_approved(
    ledger: &mut FlowLedger,
    approver: NodeId,
    hop: FlowId,
    sink: NodeId,
    approver_cost: f64,
    edge: f64,
) -> Result<(u32, f64), ProtocolError> {
    ledger.reserved = ledger.reserved.saturating_sub(1);
    if ledger.capacity_remaining() == 0 {
        return Err(ProtocolError::CapacityExhausted(ledger.owner));
    }
    let cost = edge + approver_cost;
    let downstream = Some(Hop { peer: approver, id: hop });
    let inflow = ledger
        .unpaired_inflow()
        .find(|r| r.sink == sink)
        .map(|r| r.id);
    let id = match inflow {
        Some(id) => {
            let r = ledger.records.get_mut(&id).expect("record just found");
            r.downstream = downstream;
            r.cost_to_sink = cost;
            id
        }
        None => ledger.insert(sink, cost, None, downstream),
    };
    Ok((id, cost))
}

/// Objective before and after swapping next-stage peers of two flows to the same sink.
/// `mine`/`other` are the current edge costs, `mine_swapped`/`other_swapped` the costs
/// after the swap.
pub fn change_costs(objective: Objective, mine: f64, other: f64, mine_swapped: f64, other_swapped: f64) -> (f64, f64) {
    (objective.combine(mine, other), objective.combine(mine_swapped, other_swapped))
}

/// Whether a move from `current` to `new` should be proposed. Strict improvements always
/// are; equal costs never are; increases only when annealing accepts `u`.
pub fn should_propose(current: f64, new: f64, temperature: f64, u: Option<f64>) -> bool {
    if new < current - COST_EPSILON {
        return true;
    }
    if new <= current + COST_EPSILON {
        return false;
    }
    match u {
        Some(u) => annealing_accept(current, new, temperature, u),
        None => false,
    }
}

/// A proposer's evaluation of a swap; `Some(claimed_gain)` when it should be proposed.
pub fn evaluate_change(
    objective: Objective,
    mine: f64,
    other: f64,
    mine_swapped: f64,
    other_swapped: f64,
    temperature: f64,
    u: Option<f64>,
) -> Option<f64> {
    let (cur, new) = change_costs(objective, mine, other, mine_swapped, other_swapped);
    should_propose(cur, new, temperature, u).then_some(cur - new)
}

/// The responder's check: strict improvement from its own view, no annealing.
pub fn accept_change(objective: Objective, mine: f64, other: f64, mine_swapped: f64, other_swapped: f64) -> bool {
    let (cur, new) = change_costs(objective, mine, other, mine_swapped, other_swapped);
    new < cur - COST_EPSILON
}

/// Objective of routing `a -> x -> c` given the two edge costs.
pub fn redirect_costs(objective: Objective, via_b: (f64, f64), via_self: (f64, f64)) -> (f64, f64) {
    (objective.combine(via_b.0, via_b.1), objective.combine(via_self.0, via_self.1))
}

pub fn evaluate_redirect(
    objective: Objective,
    via_b: (f64, f64),
    via_self: (f64, f64),
    temperature: f64,
    u: Option<f64>,
) -> Option<f64> {
    let (cur, new) = redirect_costs(objective, via_b, via_self);
    should_propose(cur, new, temperature, u).then_some(cur - new)
}

/// True iff none of the last `window` rounds saw a structural change. `last_change` is
/// the most recent round with one, `rounds` the number of rounds completed.
pub fn steady_state(last_change: Option<u64>, rounds: u64, window: u64) -> bool {
    match last_change {
        Some(r) => rounds > r + window,
        None => rounds >= window,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const D1: NodeId = NodeId(100);
    const D2: NodeId = NodeId(101);

    fn hop(n: u32) -> FlowId {
        FlowId::new(NodeId(n), 0)
    }

    fn relay_with_outflow(sink: NodeId, cost: f64) -> FlowLedger {
        let mut l = FlowLedger::relay(NodeId(5), 2);
        l.insert(sink, cost, None, Some(Hop { peer: NodeId(9), id: hop(5) }));
        l
    }

    #[test]
    fn select_prefers_lowest_total() {
        let l = FlowLedger::relay(NodeId(1), 1);
        let mut t = CostTable::default();
        t.set(NodeId(2), D1, 4.0);
        t.set(NodeId(3), D1, 2.0);
        let got = select_flow_target(&l, &t, &[(NodeId(2), 3.0), (NodeId(3), 6.0)]).unwrap();
        assert_eq!((got.peer, got.total), (NodeId(2), 7.0));
    }

    #[test]
    fn select_none_without_offers() {
        let l = FlowLedger::relay(NodeId(1), 1);
        let t = CostTable::default();
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(2), 3.0)]), None);
    }

    #[test]
    fn select_respects_unpaired_inflow_sink() {
        let mut l = FlowLedger::relay(NodeId(1), 2);
        l.insert(D2, 0.0, Some(Hop { peer: NodeId(0), id: hop(0) }), None);
        let mut t = CostTable::default();
        t.set(NodeId(2), D1, 1.0);
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(2), 1.0)]), None);
        t.set(NodeId(2), D2, 5.0);
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(2), 1.0)]).unwrap().sink, D2);
    }

    #[test]
    fn select_requires_stability_and_capacity() {
        let l = relay_with_outflow(D1, 3.0);
        let mut t = CostTable::default();
        t.set(NodeId(2), D1, 1.0);
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(2), 1.0)]), None);
        let full = FlowLedger::relay(NodeId(1), 0);
        assert_eq!(select_flow_target(&full, &t, &[(NodeId(2), 1.0)]), None);
    }

    #[test]
    fn data_node_requests_only_its_own_sink() {
        let l = FlowLedger::data(D1, 1);
        let mut t = CostTable::default();
        t.set(NodeId(2), D2, 1.0);
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(2), 1.0)]), None);
        t.set(NodeId(3), D1, 9.0);
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(2), 1.0), (NodeId(3), 1.0)]).unwrap().peer, NodeId(3));
    }

    #[test]
    fn request_flow_exact_match_approves() {
        let mut l = relay_with_outflow(D1, 5.0);
        let r = handle_request_flow(&mut l, NodeId(1), D1, 5.0, hop(1));
        assert!(matches!(r, FlowReply::Approve { cost, .. } if cost == 5.0));
        assert_eq!(l.paired().count(), 1);
        assert_eq!(l.unpaired_outflow().count(), 0);
    }

    #[test]
    fn request_flow_stale_cost_rejects_with_current() {
        let mut l = relay_with_outflow(D1, 6.0);
        assert_eq!(
            handle_request_flow(&mut l, NodeId(1), D1, 5.0, hop(1)),
            FlowReply::Reject { current_cost: 6.0 }
        );
    }

    #[test]
    fn request_flow_without_outflow_rejects_infinite() {
        let mut l = relay_with_outflow(D2, 6.0);
        assert_eq!(
            handle_request_flow(&mut l, NodeId(1), D1, 5.0, hop(1)),
            FlowReply::Reject {
                current_cost: f64::INFINITY
            }
        );
    }

    #[test]
    fn approval_adds_edge_cost() {
        let mut l = FlowLedger::relay(NodeId(1), 1);
        l.reserved = 1;
        let (_, cost) = on_flow_approved(&mut l, NodeId(2), hop(1), D1, 4.0, 3.0).unwrap();
        assert_eq!(cost, 7.0);
        assert_eq!(l.advertised(D1), 7.0);
        assert_eq!(l.capacity_remaining(), 0);
        let t = {
            let mut t = CostTable::default();
            t.set(NodeId(3), D1, 0.0);
            t
        };
        assert_eq!(select_flow_target(&l, &t, &[(NodeId(3), 1.0)]), None);
    }

    #[test]
    fn approval_pairs_unpaired_inflow() {
        let mut l = FlowLedger::relay(NodeId(1), 2);
        l.insert(D1, 0.0, Some(Hop { peer: NodeId(0), id: hop(0) }), None);
        on_flow_approved(&mut l, NodeId(2), hop(1), D1, 4.0, 3.0).unwrap();
        assert_eq!(l.paired().count(), 1);
        assert_eq!(l.unpaired_inflow().count(), 0);
        assert_eq!(l.unpaired_outflow().count(), 0);
    }

    #[test]
    fn approval_without_capacity_is_a_bug() {
        let mut l = FlowLedger::relay(NodeId(1), 0);
        assert_eq!(
            on_flow_approved(&mut l, NodeId(2), hop(1), D1, 4.0, 3.0),
            Err(ProtocolError::CapacityExhausted(NodeId(1)))
        );
    }

    #[test]
    fn change_worked_example() {
        let gain = evaluate_change(Objective::Minimax, 3.0, 8.0, 6.0, 6.0, 1.7, None);
        assert_eq!(gain, Some(2.0));
        assert!(accept_change(Objective::Minimax, 8.0, 3.0, 6.0, 6.0));
        assert!(!accept_change(Objective::Minimax, 6.0, 3.0, 6.0, 5.0));
    }

    #[test]
    fn uphill_change_depends_on_draw() {
        // current 5, new 7: exp(-2/1.7) is about 0.3084
        assert!(evaluate_change(Objective::Sum, 2.0, 3.0, 3.0, 4.0, 1.7, Some(0.30)).is_some());
        assert!(evaluate_change(Objective::Sum, 2.0, 3.0, 3.0, 4.0, 1.7, Some(0.31)).is_none());
    }

    #[test]
    fn redirect_examples() {
        assert_eq!(evaluate_redirect(Objective::Sum, (5.0, 6.0), (4.0, 5.0), 1.7, None), Some(2.0));
        assert_eq!(evaluate_redirect(Objective::Sum, (5.0, 6.0), (5.0, 6.0), 1e-9, Some(0.0)), None);
        // 11 -> 12: exp(-1/1.7) is about 0.555
        assert!(evaluate_redirect(Objective::Sum, (5.0, 6.0), (6.0, 6.0), 1.7, Some(0.5)).is_some());
        assert!(evaluate_redirect(Objective::Sum, (5.0, 6.0), (6.0, 6.0), 1.7, Some(0.56)).is_none());
    }

    #[test]
    fn annealing_boundaries() {
        assert!(annealing_accept(5.0, 4.0, 1.7, 0.999));
        assert!(annealing_accept(5.0, 5.0, 1.7, 0.999));
        assert!(!annealing_accept(5.0, 7.0, 1.7, 0.31));
        assert!(annealing_accept(5.0, 7.0, 1.7, 0.30));
    }

    #[test]
    fn cooling_is_geometric() {
        let mut a = Annealer::new(1.7, 0.95);
        for _ in 0..10 {
            a.cool();
        }
        assert!((a.temperature - 1.7 * 0.95f64.powi(10)).abs() < 1e-12);
        a.reset();
        assert_eq!(a.temperature, 1.7);
    }

    #[test]
    fn steady_state_window() {
        assert!(steady_state(Some(4), 11, 5));
        assert!(!steady_state(Some(8), 10, 5));
        assert!(steady_state(None, 5, 5));
        assert!(!steady_state(None, 4, 5));
    }

    #[test]
    fn flow_ids_are_unique_per_owner() {
        assert_ne!(FlowId::new(NodeId(1), 2), FlowId::new(NodeId(2), 1));
        assert_eq!(FlowId::new(NodeId(3), 7).to_string(), "f3:7");
    }

    proptest! {
        #[test]
        fn downhill_always_accepted(cur in 0.0f64..100.0, drop in 0.001f64..50.0, t in 0.01f64..5.0, u in 0.0f64..1.0) {
            prop_assert!(annealing_accept(cur, cur - drop, t, u));
        }

        #[test]
        fn cooling_matches_power(k in 0u32..200) {
            let mut a = Annealer::new(1.7, 0.95);
            for _ in 0..k {
                a.cool();
            }
            prop_assert!((a.temperature - 1.7 * 0.95f64.powi(k as i32)).abs() < 1e-9);
        }
    }
}
