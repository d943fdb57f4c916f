//! Seeded topology generators for the canned scenario kinds.
//!
//! Flow and addition instances price a link purely by its latency: compute costs and
//! activation size are zero, so the edge cost between two nodes is the drawn link cost.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{AdditionSection, Dist, FlowSection, TrainingSection};
use crate::domain::{LinkSpec, NodeId, NodeSpec, StageId, Topology};
use crate::oracle::CandidateNode;

fn draw_u32(d: &Dist, rng: &mut impl Rng) -> u32 {
    d.sample(rng).max(1.0) as u32
}

/// Splits `total` over `parts` as evenly as possible, extra units to the front.
pub fn even_split(total: u32, parts: u32) -> Vec<u32> {
    (0..parts)
        .map(|i| total / parts + u32::from(i < total % parts))
        .collect()
}

fn symmetric(links: &mut Vec<LinkSpec>, a: NodeId, b: NodeId, latency: f64, bandwidth: f64) {
    links.push(LinkSpec::new(a, b, latency, bandwidth));
    links.push(LinkSpec::new(b, a, latency, bandwidth));
}

/// Flow-test instance: sources, relays spread evenly over the stages, and a full mesh
/// of symmetric links. The sources together admit as many flows as the narrowest
/// stage, so every flow they start can reach the end.
pub fn flow_topology(f: &FlowSection, rng: &mut impl Rng) -> Topology {
    let mut nodes = Vec::new();
    let mut next = f.sources;
    for (stage, count) in even_split(f.relays, f.stages).into_iter().enumerate() {
        for _ in 0..count {
            nodes.push(NodeSpec::relay(next, stage as u32, draw_u32(&f.capacity, rng), 0.0));
            next += 1;
        }
    }
    let bottleneck = (0..f.stages)
        .map(|s| {
            nodes
                .iter()
                .filter(|n| n.stage == Some(StageId(s)))
                .map(|n| n.capacity)
                .sum::<u32>()
        })
        .min()
        .unwrap_or(0);
    for (i, cap) in even_split(bottleneck, f.sources).into_iter().enumerate() {
        nodes.push(NodeSpec::data(i as u32, cap));
    }
    let ids: Vec<NodeId> = nodes.iter().map(|n| n.id).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut links = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            symmetric(&mut links, a, b, f.link_cost.sample(rng), 1.0);
        }
    }
    Topology::new(nodes, links, f.stages, 0.0).expect("generated flow topology is valid")
}

/// One node-addition instance: the running system and the nodes waiting to join.
#[derive(Debug, Clone)]
pub struct AdditionInstance {
    pub topology: Topology,
    pub candidates: Vec<CandidateNode>,
}

/// Interlayer costs connect adjacent stages (the data node sits before the first and
/// after the last). Same-stage links cost the node's largest interlayer cost plus an
/// intralayer draw. Candidates draw one interlayer cost towards every node, usable
/// from whichever stage they end up in.
pub fn addition_instance(a: &AdditionSection, rng: &mut impl Rng) -> AdditionInstance {
    let mut nodes = Vec::new();
    let mut next = 1;
    for stage in 0..a.stages {
        for _ in 0..draw_u32(&a.per_stage, rng) {
            nodes.push(NodeSpec::relay(next, stage, draw_u32(&a.capacity, rng), 0.0));
            next += 1;
        }
    }
    let candidate_specs: Vec<NodeSpec> = (0..a.candidates)
        .map(|i| {
            let mut spec = NodeSpec::relay(next + i, 0, draw_u32(&a.capacity, rng), 0.0);
            spec.stage = None;
            spec
        })
        .collect();
    // The data node never limits throughput here; only relay placement does.
    let total: u32 = nodes.iter().chain(&candidate_specs).map(|n| n.capacity).sum();
    nodes.push(NodeSpec::data(0, total));

    // Stage position on the ring data -> 0 -> .. -> S-1 -> data.
    let position = |n: &NodeSpec| n.stage.map(|s| s.0 as i64);
    let adjacent = |x: &NodeSpec, y: &NodeSpec| match (position(x), position(y)) {
        (Some(p), Some(q)) => (p - q).abs() == 1,
        (None, Some(q)) | (Some(q), None) => q == 0 || q == i64::from(a.stages) - 1,
        (None, None) => false,
    };
    let mut inter: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    for (i, x) in nodes.iter().enumerate() {
        for y in &nodes[i + 1..] {
            if adjacent(x, y) {
                inter.insert((x.id.min(y.id), x.id.max(y.id)), a.interlayer.sample(rng));
            }
        }
    }
    let mut phi: BTreeMap<NodeId, f64> = BTreeMap::new();
    for (&(x, y), &c) in &inter {
        for n in [x, y] {
            let e = phi.entry(n).or_insert(0.0);
            *e = e.max(c);
        }
    }
    let mut links = Vec::new();
    for (i, x) in nodes.iter().enumerate() {
        for y in &nodes[i + 1..] {
            let key = (x.id.min(y.id), x.id.max(y.id));
            let cost = match inter.get(&key) {
                Some(&c) => c,
                None => {
                    let p = phi[&x.id].max(phi[&y.id]);
                    p + a.intralayer.sample(rng)
                }
            };
            symmetric(&mut links, x.id, y.id, cost, 1.0);
        }
    }
    let topology = Topology::new(nodes, links, a.stages, 0.0).expect("generated addition topology is valid");

    let mut candidates = Vec::new();
    for spec in candidate_specs {
        let mut cl = Vec::new();
        for &other in topology.nodes.keys() {
            symmetric(&mut cl, spec.id, other, a.interlayer.sample(rng), 1.0);
        }
        for prev in &candidates {
            let prev: &CandidateNode = prev;
            symmetric(&mut cl, spec.id, prev.spec.id, a.interlayer.sample(rng), 1.0);
        }
        candidates.push(CandidateNode { spec, links: cl });
    }
    AdditionInstance {
        topology,
        candidates,
    }
}

/// Training world: data nodes first, relays spread evenly over the stages, full mesh
/// with symmetric latency and bandwidth draws.
pub fn training_topology(t: &TrainingSection, rng: &mut impl Rng) -> Topology {
    let mut nodes = Vec::new();
    for i in 0..t.data_nodes {
        let mut d = NodeSpec::data(i, t.microbatches);
        d.compute_cost = t.compute.sample(rng);
        nodes.push(d);
    }
    let mut next = t.data_nodes;
    for (stage, count) in even_split(t.relays, t.stages).into_iter().enumerate() {
        for _ in 0..count {
            let cap = draw_u32(&t.capacity, rng);
            nodes.push(NodeSpec::relay(next, stage as u32, cap, t.compute.sample(rng)));
            next += 1;
        }
    }
    let mut links = Vec::new();
    for (i, x) in nodes.iter().enumerate() {
        for y in &nodes[i + 1..] {
            let lat = t.latency.sample(rng);
            let bw = t.bandwidth.sample(rng);
            symmetric(&mut links, x.id, y.id, lat, bw);
        }
    }
    Topology::new(nodes, links, t.stages, t.activation_size).expect("generated training topology is valid")
}
