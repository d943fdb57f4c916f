//! Randomized invariant suites over formation, training and the edge cost.

use std::collections::{BTreeMap, BTreeSet};

use gwtf::cost::edge_cost;
use gwtf::domain::{LinkSpec, NodeId, NodeSpec, Topology};
use gwtf::harness::experiments::formation_config;
use gwtf::harness::generate::flow_topology;
use gwtf::harness::metrics::{Pass, Record};
use gwtf::harness::world::run_training;
use gwtf::protocol::{check_invariants, run_formation_observed, ProtocolNode};
use gwtf::recovery::RecoveryMode;
use gwtf::simnet::{NetConfig, RngStreams};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use super::{scenario, verdict};

const SEEDS: u64 = 100;

/// Every directed hop named by a sender's record is named by exactly one receiver
/// record, and the other way round.
fn pairing_violations(nodes: &BTreeMap<NodeId, ProtocolNode>) -> usize {
    let mut sent = BTreeSet::new();
    let mut received = BTreeSet::new();
    let mut dups = 0;
    for (&id, n) in nodes {
        for r in n.ledger.records.values() {
            if let Some(h) = r.downstream {
                dups += usize::from(!sent.insert((id, h.peer, h.id)));
            }
            if let Some(h) = r.upstream {
                dups += usize::from(!received.insert((h.peer, id, h.id)));
            }
        }
    }
    dups + sent.symmetric_difference(&received).count()
}

/// Walks each record down to its sink and compares the summed edge costs with the
/// record's cost to sink.
fn cost_violations(nodes: &BTreeMap<NodeId, ProtocolNode>, t: &Topology) -> usize {
    let mut bad = 0;
    for (&id, n) in nodes {
        for r in n.ledger.records.values() {
            let mut at = id;
            let mut hop = r.downstream;
            let mut total = 0.0;
            let mut steps = 0;
            while let Some(h) = hop {
                total += t.edge_cost(at, h.peer).value();
                let next = &nodes[&h.peer];
                let rid = next.ledger.by_upstream(h.id).expect("paired hop");
                hop = next.ledger.records[&rid].downstream;
                at = h.peer;
                steps += 1;
                assert!(steps <= nodes.len() + 1, "cycle at {id}");
            }
            if (total - r.cost_to_sink).abs() > 1e-6 {
                bad += 1;
            }
        }
    }
    bad
}

fn conservation_violations(nodes: &BTreeMap<NodeId, ProtocolNode>) -> usize {
    nodes
        .values()
        .filter(|n| !n.is_data())
        .filter(|n| {
            let inflow = n.ledger.records.values().filter(|r| r.upstream.is_some()).count();
            let outflow = n.ledger.records.values().filter(|r| r.downstream.is_some()).count();
            inflow != outflow
        })
        .count()
}

fn formation_suite() -> Result<String, String> {
    let settings: Vec<_> = (1..=6).map(|i| scenario(&format!("flow-{i}"))).collect();
    let mut capacity = 0;
    let mut cooling = 0;
    let mut handlers = 0u64;
    let (mut pairing, mut costs, mut conservation, mut unsteady) = (0, 0, 0, 0);
    for seed in 0..SEEDS {
        let cfg = &settings[(seed % 6) as usize];
        let streams = RngStreams::new(1000 + seed);
        let t = flow_topology(cfg.flow.as_ref().unwrap(), &mut streams.stream("topology"));
        let (t0, alpha) = (cfg.protocol.t0, cfg.protocol.alpha);
        let mut last_temp: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut observe = |n: &ProtocolNode| {
            handlers += 1;
            let l = &n.ledger;
            if l.outgoing().count() as u32 + l.reserved > l.capacity {
                capacity += 1;
            }
            let a = &n.annealer;
            let expected = t0 * alpha.powi(a.accepted as i32);
            let prev = last_temp.insert(n.id, a.temperature).unwrap_or(t0);
            if (a.temperature - expected).abs() > 1e-12 * t0 || a.temperature > prev {
                cooling += 1;
            }
        };
        let formed = run_formation_observed(&t, &formation_config(&cfg.protocol), NetConfig::default(), &streams, &mut observe)
            .map_err(|e| e.to_string())?;
        pairing += pairing_violations(&formed.nodes);
        costs += cost_violations(&formed.nodes, &t);
        if formed.steady_round.is_some() {
            conservation += conservation_violations(&formed.nodes);
        } else {
            unsteady += 1;
        }
        // The crate's own checker must agree with the independent walks.
        if !check_invariants(&formed.nodes).is_empty() {
            pairing += 1;
        }
    }
    let detail = format!(
        "formation {SEEDS} seeds, {handlers} handler steps: capacity {capacity}, cooling {cooling}, pairing {pairing}, cost-to-sink {costs}, conservation {conservation}, unsteady {unsteady}"
    );
    if capacity + cooling + pairing + costs + conservation + unsteady == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn training_suite() -> Result<String, String> {
    let grid = ["homogeneous-10", "homogeneous-20", "heterogeneous-10", "heterogeneous-20"].map(scenario);
    let (mut mismatches, mut lost, mut duplicated, mut forward_entries, mut failures) = (0, 0, 0, 0, 0);
    for seed in 0..SEEDS {
        let cfg = &grid[(seed % 4) as usize];
        let mut t = cfg.training.clone().unwrap();
        t.iterations = 3;
        t.recovery = if seed % 2 == 0 { RecoveryMode::Gwtf } else { RecoveryMode::PipelineRestart };
        let run = run_training(&t, &cfg.protocol, 500 + seed, NetConfig::default());
        failures += usize::from(run.report.failure.is_some());
        let mut emitted = BTreeSet::new();
        let mut finished: BTreeMap<u64, u32> = BTreeMap::new();
        for r in &run.records {
            match r {
                Record::Emitted { batch, .. } => {
                    emitted.insert(*batch);
                }
                Record::Finished { batch, .. } => *finished.entry(*batch).or_insert(0) += 1,
                Record::ParamMismatch { .. } => mismatches += 1,
                Record::Compute { pass: Pass::Forward, .. } => forward_entries += 1,
                _ => {}
            }
        }
        lost += emitted.iter().filter(|b| !finished.contains_key(b)).count();
        lost += finished.keys().filter(|b| !emitted.contains(b)).count();
        duplicated += finished.values().filter(|&&c| c > 1).count();
        for m in &run.report.iterations {
            if m.emitted != m.completed + m.deferred + m.abandoned {
                lost += 1;
            }
        }
    }
    let detail = format!(
        "training {SEEDS} seeds, {forward_entries} forward entries: parameter mismatches {mismatches}, lost {lost}, finished twice {duplicated}, failed runs {failures}"
    );
    if mismatches + lost + duplicated + failures == 0 && forward_entries > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn node(id: u32, compute: f64) -> NodeSpec {
    NodeSpec::relay(id, 0, 1, compute)
}

fn edge_cost_suite() -> Result<String, String> {
    let mut runner = TestRunner::new(Config {
        cases: 512,
        ..Config::default()
    });
    let strategy = (
        (0.0..100.0f64, 0.0..100.0f64),
        (0.0..200.0f64, 0.0..200.0f64),
        (0.1..1000.0f64, 0.1..1000.0f64),
        (0.0..1000.0f64, 0.0..1000.0f64),
    );
    runner
        .run(&strategy, |((ci, cj), (lij, lji), (bij, bji), (s1, s2))| {
            let (i, j) = (node(1, ci), node(2, cj));
            let ij = LinkSpec::new(NodeId(1), NodeId(2), lij, bij);
            let ji = LinkSpec::new(NodeId(2), NodeId(1), lji, bji);
            let d = |size: f64| edge_cost(&i, &j, &ij, &ji, size).value();
            // Swapping the endpoints and their links leaves the cost unchanged.
            prop_assert_eq!(d(s1), edge_cost(&j, &i, &ji, &ij, s1).value());
            // Affine in the activation size.
            let slope = 2.0 / (bij + bji);
            prop_assert!((d(s1 + s2) - d(0.0) - (d(s1) - d(0.0)) - (d(s2) - d(0.0))).abs() <= 1e-9 * (1.0 + d(s1 + s2)));
            prop_assert!((d(s1) - d(0.0) - slope * s1).abs() <= 1e-9 * (1.0 + d(s1)));
            prop_assert!((d(0.0) - ((ci + cj) / 2.0 + (lij + lji) / 2.0)).abs() <= 1e-9 * (1.0 + d(0.0)));
            Ok(())
        })
        .map_err(|e| format!("edge cost property: {e}"))?;
    Ok("edge cost symmetry and size linearity on 512 cases".to_string())
}

#[test]
fn criterion_7_invariant_suites() {
    let results = [formation_suite(), training_suite(), edge_cost_suite()];
    let ok = results.iter().all(Result::is_ok);
    let detail: Vec<String> = results.into_iter().map(|r| r.unwrap_or_else(|e| format!("FAILED {e}"))).collect();
    verdict(7, ok, &detail.join("; "));
}
