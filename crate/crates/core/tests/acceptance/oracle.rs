//! Exact oracle against exhaustive enumeration of path multisets.

use gwtf::domain::{LinkSpec, NodeId, NodeSpec, StageId, Topology};
use gwtf::oracle::{min_cost_max_flow, FlowGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::verdict;

struct Instance {
    topology: Topology,
    /// Relays of each stage with their capacities.
    stages: Vec<Vec<(NodeId, u32)>>,
    data_capacity: u32,
}

fn random_instance(rng: &mut impl Rng) -> Instance {
    let num_stages = rng.gen_range(1..=3u32);
    let relays = rng.gen_range(num_stages..=8);
    let mut per_stage = vec![1u32; num_stages as usize];
    for _ in num_stages..relays {
        per_stage[rng.gen_range(0..num_stages as usize)] += 1;
    }
    let data_capacity = rng.gen_range(1..=5);
    let mut nodes = vec![NodeSpec::data(0, data_capacity)];
    let mut stages = Vec::new();
    let mut next = 1;
    for (s, &count) in per_stage.iter().enumerate() {
        let mut members = Vec::new();
        for _ in 0..count {
            let cap = rng.gen_range(1..=3);
            nodes.push(NodeSpec::relay(next, s as u32, cap, 0.0));
            members.push((NodeId(next), cap));
            next += 1;
        }
        stages.push(members);
    }
    let mut links = Vec::new();
    for a in &nodes {
        for b in &nodes {
            if a.id != b.id {
                links.push(LinkSpec::new(a.id, b.id, f64::from(rng.gen_range(1..=20u32)), 1.0));
            }
        }
    }
    let topology = Topology::new(nodes, links, num_stages, 0.0).expect("valid instance");
    Instance {
        topology,
        stages,
        data_capacity,
    }
}

/// Half the round-trip latency: the edge cost with zero compute and zero size.
fn hop(t: &Topology, a: NodeId, b: NodeId) -> f64 {
    (t.link(a, b).unwrap().latency + t.link(b, a).unwrap().latency) / 2.0
}

fn all_paths(inst: &Instance) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut choice = vec![0usize; inst.stages.len()];
    loop {
        let mut cost = 0.0;
        let mut prev = NodeId(0);
        for (s, &i) in choice.iter().enumerate() {
            let n = inst.stages[s][i].0;
            cost += hop(&inst.topology, prev, n);
            prev = n;
        }
        cost += hop(&inst.topology, prev, NodeId(0));
        out.push((choice.clone(), cost));
        let mut s = 0;
        loop {
            if s == choice.len() {
                return out;
            }
            choice[s] += 1;
            if choice[s] < inst.stages[s].len() {
                break;
            }
            choice[s] = 0;
            s += 1;
        }
    }
}

/// Largest flow, then cheapest, over every multiset of paths within capacity.
fn brute_force(inst: &Instance) -> (u32, f64) {
    fn go(
        paths: &[(Vec<usize>, f64)],
        from: usize,
        left: &mut Vec<Vec<u32>>,
        budget: u32,
        count: u32,
        cost: f64,
        best: &mut (u32, f64),
    ) {
        if count > best.0 || (count == best.0 && cost < best.1) {
            *best = (count, cost);
        }
        if budget == 0 {
            return;
        }
        for (k, (choice, c)) in paths.iter().enumerate().skip(from) {
            if choice.iter().enumerate().all(|(s, &i)| left[s][i] > 0) {
                for (s, &i) in choice.iter().enumerate() {
                    left[s][i] -= 1;
                }
                go(paths, k, left, budget - 1, count + 1, cost + c, best);
                for (s, &i) in choice.iter().enumerate() {
                    left[s][i] += 1;
                }
            }
        }
    }
    let paths = all_paths(inst);
    let mut left: Vec<Vec<u32>> = inst.stages.iter().map(|m| m.iter().map(|&(_, c)| c).collect()).collect();
    let mut best = (0, 0.0);
    go(&paths, 0, &mut left, inst.data_capacity, 0, 0.0, &mut best);
    best
}

#[test]
fn criterion_8_oracle_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let cases = 250;
    let mut mismatches = Vec::new();
    for case in 0..cases {
        let inst = random_instance(&mut rng);
        let sol = min_cost_max_flow(&FlowGraph::from_topology(&inst.topology));
        let (flow, cost) = brute_force(&inst);
        if sol.flow != flow || (sol.total_cost - cost).abs() > 1e-9 {
            mismatches.push(format!("case {case}: oracle ({}, {}) brute ({flow}, {cost})", sol.flow, sol.total_cost));
        }
        assert!(inst.topology.relays().count() <= 8);
        assert!(inst.topology.stage_members(StageId(0)).count() >= 1);
    }
    verdict(
        8,
        mismatches.is_empty(),
        &format!("{cases} random graphs with <= 8 relays; mismatches {mismatches:?}"),
    );
}

#[test]
fn enumeration_agrees_with_worked_example() {
    // One stage, relays of capacity 1 at round-trip cost 4 and 6.
    let nodes = vec![NodeSpec::data(0, 2), NodeSpec::relay(1, 0, 1, 0.0), NodeSpec::relay(2, 0, 1, 0.0)];
    let mut links = Vec::new();
    for (a, b, l) in [(0, 1, 2.0), (0, 2, 3.0), (1, 2, 1.0)] {
        links.push(LinkSpec::new(NodeId(a), NodeId(b), l, 1.0));
        links.push(LinkSpec::new(NodeId(b), NodeId(a), l, 1.0));
    }
    let topology = Topology::new(nodes, links, 1, 0.0).unwrap();
    let inst = Instance {
        topology,
        stages: vec![vec![(NodeId(1), 1), (NodeId(2), 1)]],
        data_capacity: 2,
    };
    assert_eq!(brute_force(&inst), (2, 10.0));
}
