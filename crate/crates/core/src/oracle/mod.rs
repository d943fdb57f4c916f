//! Centralized ground truth and baselines: exact min-cost max-flow, brute-force node
//! placement, and the nearest-successor greedy router.

mod mcmf;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cost::{sum_cost, FlowAssignment};
use crate::domain::{Direction, LinkSpec, NodeId, NodeSpec, Role, StageId, Topology};

pub use mcmf::MinCostFlow;
use mcmf::INF_CAP;

/// Costs are scaled to integers inside the solver.
pub const COST_SCALE: f64 = 1000.0;

/// Default cap on placements evaluated by [`optimal_addition`].
pub const DEFAULT_PLACEMENT_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("{placements} placements exceed the limit of {limit}")]
    InstanceTooLarge { placements: u64, limit: u64 },
    #[error("no next-stage node with spare capacity after {0}")]
    NoAvailableSuccessor(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
struct GraphEdge {
    from: NodeId,
    to: NodeId,
    cost: f64,
}

/// Layered flow network derived from a topology: one split arc per alive relay
/// (capacity = relay capacity), cost-weighted edges between adjacent stages, and a
/// source/sink pair per data node so every unit returns to its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    data: Vec<(NodeId, u32)>,
    relays: Vec<(NodeId, StageId, u32)>,
    num_stages: u32,
    edges: Vec<GraphEdge>,
}

impl FlowGraph {
    pub fn from_topology(t: &Topology) -> FlowGraph {
        let data: Vec<_> = t
            .nodes
            .values()
            .filter(|n| n.is_data() && n.alive)
            .map(|n| (n.id, n.capacity))
            .collect();
        let relays: Vec<_> = t
            .relays()
            .filter(|n| n.alive)
            .filter_map(|n| n.stage.map(|s| (n.id, s, n.capacity)))
            .collect();
        let mut edges = Vec::new();
        let mut push = |a: NodeId, b: NodeId| {
            let d = t.edge_cost(a, b);
            if d.is_finite() {
                edges.push(GraphEdge {
                    from: a,
                    to: b,
                    cost: d.0,
                });
            }
        };
        let last = t.num_stages.saturating_sub(1);
        for &(d, _) in &data {
            for &(r, s, _) in &relays {
                if s.0 == 0 {
                    push(d, r);
                }
            }
        }
        for &(a, sa, _) in &relays {
            for &(b, sb, _) in &relays {
                if sb.0 == sa.0 + 1 {
                    push(a, b);
                }
            }
            if sa.0 == last {
                for &(d, _) in &data {
                    push(a, d);
                }
            }
        }
        FlowGraph {
            data,
            relays,
            num_stages: t.num_stages,
            edges,
        }
    }

    /// Overrides a relay's slot count; used to model residual capacity.
    pub fn set_capacity(&mut self, relay: NodeId, capacity: u32) {
        for r in &mut self.relays {
            if r.0 == relay {
                r.2 = capacity;
            }
        }
    }

    pub fn data_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.data.iter().map(|d| d.0)
    }

    /// Min-cost flow for commodity `origin` of at most `limit` units, with relay slot
    /// counts reduced by `used`. Returns per-edge unit counts and the flow value.
    fn solve_commodity(
        &self,
        origin: NodeId,
        used: &BTreeMap<NodeId, u32>,
        limit: u32,
    ) -> (u32, BTreeMap<(NodeId, NodeId), u32>) {
        let Some(&(_, data_cap)) = self.data.iter().find(|d| d.0 == origin) else {
            return (0, BTreeMap::new());
        };
        // Vertex layout: 0 = source side of origin, 1 = sink side, in/out per relay,
        // then a super source and super sink capped by the data node's slots.
        let index: BTreeMap<NodeId, usize> = self
            .relays
            .iter()
            .enumerate()
            .map(|(k, r)| (r.0, 2 + 2 * k))
            .collect();
        let super_source = 2 + 2 * self.relays.len();
        let sink = super_source + 1;
        let mut g = MinCostFlow::new(sink + 1);
        g.add_arc(super_source, 0, data_cap as i64, 0);
        g.add_arc(1, sink, data_cap as i64, 0);
        for (k, &(id, _, cap)) in self.relays.iter().enumerate() {
            let free = cap.saturating_sub(used.get(&id).copied().unwrap_or(0));
            g.add_arc(2 + 2 * k, 3 + 2 * k, free as i64, 0);
        }
        let mut arc_ids = Vec::new();
        for e in &self.edges {
            let from = if e.from == origin {
                Some(0)
            } else {
                index.get(&e.from).map(|v| v + 1)
            };
            let to = if e.to == origin {
                Some(1)
            } else {
                index.get(&e.to).copied()
            };
            if let (Some(u), Some(v)) = (from, to) {
                let scaled = (e.cost * COST_SCALE).round() as i64;
                arc_ids.push((g.add_arc(u, v, INF_CAP, scaled), e.from, e.to));
            }
        }
        let (flow, _) = g.run(super_source, sink, limit as i64);
        let mut edges = BTreeMap::new();
        for (arc, a, b) in arc_ids {
            let f = g.flow_on(arc);
            if f > 0 {
                edges.insert((a, b), f as u32);
            }
        }
        (flow as u32, edges)
    }

    pub fn num_stages(&self) -> u32 {
        self.num_stages
    }
}

/// Result of [`min_cost_max_flow`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub assignment: FlowAssignment,
    pub total_cost: f64,
    pub flow: u32,
    pub per_origin: BTreeMap<NodeId, u32>,
    /// One entry per unit of flow: origin, relays in stage order, origin.
    pub paths: Vec<Vec<NodeId>>,
}

impl OracleSolution {
    /// Mean flow cost spread over the parallel flows: `total / flow²`.
    /// Rewards both cheaper paths and higher throughput; infinite with no flow.
    pub fn time_per_microbatch(&self) -> f64 {
        if self.flow == 0 {
            f64::INFINITY
        } else {
            self.total_cost / (self.flow as f64 * self.flow as f64)
        }
    }

    /// Units passing through each relay.
    pub fn relay_load(&self) -> BTreeMap<NodeId, u32> {
        let mut load = BTreeMap::new();
        for p in &self.paths {
            for r in &p[1..p.len() - 1] {
                *load.entry(*r).or_insert(0) += 1;
            }
        }
        load
    }
}

/// Exact min-cost max-flow for a single data node. With several data nodes the
/// commodities are solved one unit at a time in round-robin order over residual
/// relay capacity, which is a heuristic decomposition rather than a joint optimum.
pub fn min_cost_max_flow(g: &FlowGraph) -> OracleSolution {
    let origins: Vec<NodeId> = g.data_nodes().collect();
    let mut per_origin_edges: BTreeMap<NodeId, BTreeMap<(NodeId, NodeId), u32>> =
        BTreeMap::new();
    let mut per_origin: BTreeMap<NodeId, u32> = origins.iter().map(|&o| (o, 0)).collect();

    if origins.len() == 1 {
        let (flow, edges) = g.solve_commodity(origins[0], &BTreeMap::new(), u32::MAX / 2);
        per_origin.insert(origins[0], flow);
        per_origin_edges.insert(origins[0], edges);
    } else {
        loop {
            let mut progress = false;
            for &o in &origins {
                let mut used: BTreeMap<NodeId, u32> = BTreeMap::new();
                for (other, edges) in &per_origin_edges {
                    if *other == o {
                        continue;
                    }
                    for (&(_, b), &f) in edges {
                        if *other != b {
                            *used.entry(b).or_insert(0) += f;
                        }
                    }
                }
                let target = per_origin[&o] + 1;
                let (flow, edges) = g.solve_commodity(o, &used, target);
                if flow == target {
                    per_origin.insert(o, flow);
                    per_origin_edges.insert(o, edges);
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
    }

    let mut assignment = FlowAssignment::new();
    let mut paths = Vec::new();
    for (&o, edges) in &per_origin_edges {
        for (&(a, b), &f) in edges {
            assignment.add(a, b, f);
        }
        paths.extend(decompose_paths(o, edges));
    }
    let costs: BTreeMap<_, _> = g
        .edges
        .iter()
        .map(|e| ((e.from, e.to), crate::cost::EdgeCost(e.cost)))
        .collect();
    let total_cost = sum_cost(&assignment, &costs).unwrap_or(f64::INFINITY);
    OracleSolution {
        flow: per_origin.values().sum(),
        assignment,
        total_cost,
        per_origin,
        paths,
    }
}

/// Splits a single-origin edge flow into unit paths, lowest node id first.
fn decompose_paths(origin: NodeId, edges: &BTreeMap<(NodeId, NodeId), u32>) -> Vec<Vec<NodeId>> {
    let mut remaining = edges.clone();
    let mut paths = Vec::new();
    loop {
        let mut path = vec![origin];
        let mut at = origin;
        loop {
            let next = remaining
                .iter()
                .find(|(&(a, b), &f)| a == at && f > 0 && !(path.len() == 1 && b == origin))
                .map(|(&(_, b), _)| b);
            let Some(b) = next else { break };
            *remaining.get_mut(&(at, b)).unwrap() -= 1;
            path.push(b);
            at = b;
            if b == origin {
                break;
            }
        }
        if path.len() < 2 {
            break;
        }
        paths.push(path);
    }
    paths
}

/// A node that may be placed into any stage; carries its links to every other node.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateNode {
    pub spec: NodeSpec,
    pub links: Vec<LinkSpec>,
}

impl Topology {
    /// Returns a copy with `candidate` added as an alive relay of `stage`.
    pub fn with_candidate(&self, candidate: &CandidateNode, stage: StageId) -> Topology {
        let mut t = self.clone();
        let mut spec = candidate.spec.clone();
        spec.role = Role::Relay;
        spec.stage = Some(stage);
        spec.alive = true;
        t.nodes.insert(spec.id, spec);
        for l in &candidate.links {
            t.links.insert((l.from, l.to), *l);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub assignment: Vec<(NodeId, StageId)>,
    pub objective: f64,
    pub evaluated: u64,
}

fn permutations_count(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i))
}

/// Objective used to rank placements.
pub fn placement_objective(t: &Topology) -> f64 {
    min_cost_max_flow(&FlowGraph::from_topology(t)).time_per_microbatch()
}

/// Places `candidates` into distinct stages, evaluating every injective matching of
/// size `min(|candidates|, stages)` and keeping the lowest objective (ties: the
/// lexicographically smallest assignment).
pub fn optimal_addition(
    t: &Topology,
    candidates: &[CandidateNode],
    limit: u64,
) -> Result<Placement, OracleError> {
    let stages = t.num_stages as u64;
    let c = candidates.len() as u64;
    let placements = if c >= stages {
        permutations_count(c, stages)
    } else {
        permutations_count(stages, c)
    };
    if placements > limit {
        return Err(OracleError::InstanceTooLarge { placements, limit });
    }
    if candidates.is_empty() {
        return Ok(Placement {
            assignment: Vec::new(),
            objective: placement_objective(t),
            evaluated: 0,
        });
    }
    let mut best: Option<Placement> = None;
    let mut evaluated = 0u64;
    for assignment in injective_matchings(candidates.len(), t.num_stages as usize) {
        let mut placed = t.clone();
        let mut named = Vec::with_capacity(assignment.len());
        for &(ci, s) in &assignment {
            placed = placed.with_candidate(&candidates[ci], StageId(s as u32));
            named.push((candidates[ci].spec.id, StageId(s as u32)));
        }
        named.sort();
        let objective = placement_objective(&placed);
        evaluated += 1;
        let better = match &best {
            None => true,
            Some(b) => {
                objective < b.objective || (objective == b.objective && named < b.assignment)
            }
        };
        if better {
            best = Some(Placement {
                assignment: named,
                objective,
                evaluated: 0,
            });
        }
    }
    let mut best = best.expect("at least one placement");
    best.evaluated = evaluated;
    Ok(best)
}

/// All matchings (candidate index, stage) of size `min(c, s)` using each candidate and
/// each stage at most once.
fn injective_matchings(c: usize, s: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        c: usize,
        s: usize,
        stage: usize,
        size: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        if stage == s || s - stage < size - cur.len() {
            return;
        }
        for ci in 0..c {
            if !used[ci] {
                used[ci] = true;
                cur.push((ci, stage));
                rec(c, s, stage + 1, size, used, cur, out);
                cur.pop();
                used[ci] = false;
            }
        }
        // Stage left empty; only possible when candidates are scarcer than stages.
        rec(c, s, stage + 1, size, used, cur, out);
    }
    let size = c.min(s);
    let mut out = Vec::new();
    rec(c, s, 0, size, &mut vec![false; c], &mut Vec::new(), &mut out);
    out
}

/// Nearest-successor routing: the alive next-stage node with the lowest edge cost among
/// those `has_spare` admits; ties go to the lowest id.
pub fn greedy_route(
    t: &Topology,
    from: NodeId,
    has_spare: impl Fn(NodeId) -> bool,
) -> Result<NodeId, OracleError> {
    let next = t
        .stage_neighbors(from, Direction::Next)
        .map_err(|_| OracleError::NoAvailableSuccessor(from))?;
    next.into_iter()
        .filter(|&n| has_spare(n))
        .map(|n| (t.edge_cost(from, n).0, n))
        .filter(|(d, _)| d.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, n)| n)
        .ok_or(OracleError::NoAvailableSuccessor(from))
}

/// Flows built by launching microbatches one by one from each data node (round-robin)
/// and routing each hop with [`greedy_route`]. A microbatch that dead-ends releases its
/// slots and is dropped; each data node launches at most its capacity.
pub fn greedy_flows(t: &Topology) -> Vec<Vec<NodeId>> {
    let origins: Vec<(NodeId, u32)> = t
        .nodes
        .values()
        .filter(|n| n.is_data() && n.alive)
        .map(|n| (n.id, n.capacity))
        .collect();
    let mut load: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut launched: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut paths = Vec::new();
    loop {
        let mut any = false;
        for &(origin, cap) in &origins {
            let l = launched.entry(origin).or_insert(0);
            if *l >= cap {
                continue;
            }
            *l += 1;
            any = true;
            let mut path = vec![origin];
            let mut at = origin;
            let complete = loop {
                let spare = |n: NodeId| match t.node(n) {
                    Some(spec) if spec.is_data() => n == origin,
                    Some(spec) => load.get(&n).copied().unwrap_or(0) < spec.capacity,
                    None => false,
                };
                match greedy_route(t, at, spare) {
                    Ok(n) => {
                        path.push(n);
                        if n == origin {
                            break true;
                        }
                        *load.entry(n).or_insert(0) += 1;
                        at = n;
                    }
                    Err(_) => break false,
                }
            };
            if complete {
                paths.push(path);
            } else {
                for r in &path[1..] {
                    *load.get_mut(r).unwrap() -= 1;
                }
            }
        }
        if !any {
            break;
        }
    }
    paths
}

pub fn assignment_from_paths(paths: &[Vec<NodeId>]) -> FlowAssignment {
    let mut a = FlowAssignment::new();
    for p in paths {
        a.add_path(p);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::full_links;

    /// Data node 0 (cap `data_cap`) and one stage of relays with symmetric edge costs.
    fn one_stage(data_cap: u32, relays: &[(u32, u32, f64)]) -> Topology {
        let mut nodes = vec![NodeSpec::data(0, data_cap)];
        for &(id, cap, _) in relays {
            let mut n = NodeSpec::relay(id, 0, cap.max(1), 0.0);
            n.capacity = cap;
            nodes.push(n);
        }
        let mut links = Vec::new();
        for &(id, _, cost) in relays {
            links.push(LinkSpec::new(NodeId(0), NodeId(id), cost, 1.0));
            links.push(LinkSpec::new(NodeId(id), NodeId(0), cost, 1.0));
        }
        Topology {
            nodes: nodes.into_iter().map(|n| (n.id, n)).collect(),
            links: links.into_iter().map(|l| ((l.from, l.to), l)).collect(),
            num_stages: 1,
            activation_size: 0.0,
        }
    }

    #[test]
    fn two_relays_cost_ten() {
        let t = one_stage(2, &[(1, 1, 2.0), (2, 1, 3.0)]);
        let sol = min_cost_max_flow(&FlowGraph::from_topology(&t));
        assert_eq!(sol.flow, 2);
        assert!((sol.total_cost - 10.0).abs() < 1e-9);
        assert_eq!(sol.paths.len(), 2);
    }

    #[test]
    fn zero_capacity_gives_zero_flow() {
        let t = one_stage(2, &[(1, 0, 2.0), (2, 0, 3.0)]);
        let sol = min_cost_max_flow(&FlowGraph::from_topology(&t));
        assert_eq!(sol.flow, 0);
        assert_eq!(sol.total_cost, 0.0);
    }

    #[test]
    fn single_relay_is_the_bottleneck() {
        let t = one_stage(3, &[(1, 1, 2.0)]);
        let sol = min_cost_max_flow(&FlowGraph::from_topology(&t));
        assert_eq!(sol.flow, 1);
    }

    #[test]
    fn commodities_return_to_their_origin() {
        let mut nodes = vec![NodeSpec::data(0, 2), NodeSpec::data(1, 2)];
        nodes.push(NodeSpec::relay(2, 0, 2, 0.0));
        nodes.push(NodeSpec::relay(3, 0, 1, 0.0));
        let links = full_links(&nodes, 1.0, 1.0);
        let t = Topology::new(nodes, links, 1, 0.0).unwrap();
        let sol = min_cost_max_flow(&FlowGraph::from_topology(&t));
        assert_eq!(sol.flow, 3);
        for p in &sol.paths {
            assert_eq!(p.first(), p.last());
        }
        assert_eq!(sol.per_origin[&NodeId(0)] + sol.per_origin[&NodeId(1)], 3);
    }

    #[test]
    fn greedy_route_examples() {
        let t = one_stage(3, &[(1, 1, 7.0), (2, 1, 3.0), (3, 1, 5.0)]);
        assert_eq!(greedy_route(&t, NodeId(0), |_| true), Ok(NodeId(2)));
        assert_eq!(
            greedy_route(&t, NodeId(0), |_| false),
            Err(OracleError::NoAvailableSuccessor(NodeId(0)))
        );
        let tie = one_stage(3, &[(9, 1, 3.0), (4, 1, 3.0)]);
        assert_eq!(greedy_route(&tie, NodeId(0), |_| true), Ok(NodeId(4)));
    }

    fn candidate(id: u32, cap: u32, t: &Topology, cost: impl Fn(NodeId) -> f64) -> CandidateNode {
        let mut links = Vec::new();
        for &other in t.nodes.keys() {
            let c = cost(other);
            links.push(LinkSpec::new(NodeId(id), other, c, 1.0));
            links.push(LinkSpec::new(other, NodeId(id), c, 1.0));
        }
        CandidateNode {
            spec: NodeSpec {
                id: NodeId(id),
                role: Role::Relay,
                stage: None,
                capacity: cap,
                compute_cost: 0.0,
                alive: false,
            },
            links,
        }
    }

    #[test]
    fn no_candidates_leaves_objective_unchanged() {
        let t = crate::domain::fixtures::layered(2, 1, 1);
        let p = optimal_addition(&t, &[], DEFAULT_PLACEMENT_LIMIT).unwrap();
        assert!(p.assignment.is_empty());
        assert_eq!(p.objective, placement_objective(&t));
        assert_eq!(p.evaluated, 0);
    }

    #[test]
    fn one_candidate_two_stages_evaluates_two_placements() {
        let t = crate::domain::fixtures::layered(2, 1, 1);
        let c = candidate(50, 3, &t, |_| 1.0);
        let p = optimal_addition(&t, &[c], DEFAULT_PLACEMENT_LIMIT).unwrap();
        assert_eq!(p.evaluated, 2);
        assert_eq!(p.assignment.len(), 1);
    }

    #[test]
    fn placement_limit_is_enforced() {
        let t = crate::domain::fixtures::layered(3, 1, 1);
        let cands: Vec<_> = (0..3).map(|k| candidate(50 + k, 1, &t, |_| 1.0)).collect();
        assert_eq!(
            optimal_addition(&t, &cands, 5),
            Err(OracleError::InstanceTooLarge {
                placements: 6,
                limit: 5
            })
        );
    }

    #[test]
    fn matchings_cover_both_regimes() {
        assert_eq!(injective_matchings(3, 3).len(), 6);
        assert_eq!(injective_matchings(6, 4).len(), 360);
        assert_eq!(injective_matchings(1, 2).len(), 2);
        assert_eq!(injective_matchings(2, 3).len(), 6);
    }

    #[test]
    fn greedy_flows_drop_dead_ends() {
        let t = crate::domain::fixtures::layered(2, 1, 1);
        let paths = greedy_flows(&t);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0], vec![NodeId(0), NodeId(1), NodeId(2), NodeId(0)]);
    }
}
