//! Flow-quality and node-addition experiments.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdditionPolicy, AdditionSection, FlowSection, ProtocolParams};
use super::generate::{addition_instance, flow_topology, AdditionInstance};
use crate::domain::{NodeId, StageId, Topology};
use crate::membership::{assign_candidates, rank_stages, utilization_flood, Candidate, MembershipError};
use crate::oracle::{
    greedy_flows, min_cost_max_flow, optimal_addition, placement_objective, FlowGraph, OracleError,
};
use crate::protocol::{check_conservation, check_invariants, run_formation, sum_path_cost, FormationConfig, FormationResult, ProtocolConfig};
use crate::simnet::{NetConfig, RngStreams, SimError};

pub fn formation_config(p: &ProtocolParams) -> FormationConfig {
    FormationConfig {
        protocol: ProtocolConfig {
            t0: p.t0,
            alpha: p.alpha,
            objective: p.objective,
            window: p.window,
        },
        max_rounds: p.max_rounds,
        phase_period: None,
    }
}

/// Per-seed results of one flow test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCase {
    pub seed: u64,
    pub gwtf_cost: f64,
    pub gwtf_flows: usize,
    pub greedy_cost: f64,
    pub greedy_flows: usize,
    pub oracle_cost: f64,
    pub oracle_flows: u32,
    pub steady_round: Option<u64>,
    pub rounds: u64,
    pub messages: u64,
    /// Ledger invariant and conservation violations after the run quiesced.
    pub violations: usize,
    pub cost_history: Vec<f64>,
    pub trace_hash: String,
}

pub fn run_flow_case(
    f: &FlowSection,
    protocol: &ProtocolParams,
    seed: u64,
) -> Result<FlowCase, SimError> {
    let streams = RngStreams::new(seed);
    let topology = flow_topology(f, &mut streams.stream("topology"));
    let formed = run_formation(&topology, &formation_config(protocol), NetConfig::default(), &streams)?;
    Ok(flow_case(seed, &topology, &formed))
}

fn flow_case(seed: u64, topology: &Topology, formed: &FormationResult) -> FlowCase {
    let greedy = greedy_flows(topology);
    let oracle = min_cost_max_flow(&FlowGraph::from_topology(topology));
    FlowCase {
        seed,
        gwtf_cost: formed.sum_cost(topology),
        gwtf_flows: formed.paths.len(),
        greedy_cost: sum_path_cost(&greedy, topology),
        greedy_flows: greedy.len(),
        oracle_cost: oracle.total_cost,
        oracle_flows: oracle.flow,
        steady_round: formed.steady_round,
        rounds: formed.rounds,
        messages: formed.messages,
        violations: check_invariants(&formed.nodes).len() + check_conservation(&formed.nodes).len(),
        cost_history: formed.cost_history.clone(),
        trace_hash: formed.trace_hash.clone(),
    }
}

/// Seeds `seed, seed+1, ..` for `runs` runs.
pub fn run_flow_test(
    f: &FlowSection,
    protocol: &ProtocolParams,
    seed: u64,
    runs: u32,
) -> Result<Vec<FlowCase>, SimError> {
    (0..runs)
        .map(|r| run_flow_case(f, protocol, seed.wrapping_add(u64::from(r))))
        .collect()
}

/// Per-seed results of one node-addition test. Objectives are oracle cost per
/// microbatch on the system after the addition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditionCase {
    pub seed: u64,
    pub before: f64,
    pub after: BTreeMap<String, f64>,
    pub optimal: f64,
    pub placements: BTreeMap<String, Vec<(NodeId, StageId)>>,
}

pub fn policy_name(p: AdditionPolicy) -> &'static str {
    match p {
        AdditionPolicy::Gwtf => "gwtf",
        AdditionPolicy::CapacityFirst => "capacity-first",
        AdditionPolicy::Random => "random",
    }
}

pub fn node_addition_improvement(before: f64, after: f64) -> f64 {
    (before - after) / before
}

fn candidates_of(inst: &AdditionInstance) -> Vec<Candidate> {
    inst.candidates
        .iter()
        .map(|c| Candidate::new(c.spec.id, c.spec.capacity, 0.0).expect("generated capacity is positive"))
        .collect()
}

/// Stage placement chosen by `policy`. GWTF ranks stages by the utilization of the flows
/// the protocol formed; capacity-first fills stages in index order with the largest
/// candidates; random draws a uniform stage for each admitted candidate.
pub fn place(
    inst: &AdditionInstance,
    policy: AdditionPolicy,
    protocol: &ProtocolParams,
    streams: &RngStreams,
) -> Result<Vec<(NodeId, StageId)>, AdditionError> {
    let t = &inst.topology;
    let stages: Vec<StageId> = (0..t.num_stages).map(StageId).collect();
    let cands = candidates_of(inst);
    let assigned = match policy {
        AdditionPolicy::Gwtf => {
            let formed = run_formation(t, &formation_config(protocol), NetConfig::default(), streams)?;
            let mut flows: BTreeMap<NodeId, u32> = BTreeMap::new();
            for p in &formed.paths {
                for r in &p[1..p.len() - 1] {
                    *flows.entry(*r).or_insert(0) += 1;
                }
            }
            let flood = utilization_flood(t, &flows, NetConfig::default(), &[])?;
            let report = flood.report;
            assign_candidates(&cands, &rank_stages(&report)).assigned
        }
        AdditionPolicy::CapacityFirst => assign_candidates(&cands, &stages).assigned,
        AdditionPolicy::Random => {
            let mut rng = streams.stream("addition/random");
            let mut order: Vec<&Candidate> = cands.iter().collect();
            order.shuffle(&mut rng);
            order
                .into_iter()
                .take(stages.len().min(cands.len()))
                .map(|c| (c.id, stages[rng.gen_range(0..stages.len())]))
                .collect()
        }
    };
    let mut out: Vec<(NodeId, StageId)> = assigned.into_iter().collect();
    out.sort();
    Ok(out)
}

pub fn apply_placement(inst: &AdditionInstance, placement: &[(NodeId, StageId)]) -> Topology {
    let mut t = inst.topology.clone();
    for &(id, stage) in placement {
        let c = inst
            .candidates
            .iter()
            .find(|c| c.spec.id == id)
            .expect("placement names a candidate");
        t = t.with_candidate(c, stage);
    }
    t
}

#[derive(Debug, thiserror::Error)]
pub enum AdditionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Membership(#[from] MembershipError),
}

pub const PLACEMENT_LIMIT: u64 = 100_000;

pub fn run_addition_case(
    a: &AdditionSection,
    protocol: &ProtocolParams,
    seed: u64,
) -> Result<AdditionCase, AdditionError> {
    let streams = RngStreams::new(seed);
    let inst = addition_instance(a, &mut streams.stream("topology"));
    let before = placement_objective(&inst.topology);
    let mut after = BTreeMap::new();
    let mut placements = BTreeMap::new();
    for policy in [AdditionPolicy::Gwtf, AdditionPolicy::CapacityFirst, AdditionPolicy::Random] {
        let p = place(&inst, policy, protocol, &streams)?;
        after.insert(policy_name(policy).to_string(), placement_objective(&apply_placement(&inst, &p)));
        placements.insert(policy_name(policy).to_string(), p);
    }
    let best = optimal_addition(&inst.topology, &inst.candidates, PLACEMENT_LIMIT)?;
    placements.insert("optimal".to_string(), best.assignment);
    Ok(AdditionCase {
        seed,
        before,
        after,
        optimal: best.objective,
        placements,
    })
}

pub fn run_addition_test(
    a: &AdditionSection,
    protocol: &ProtocolParams,
    seed: u64,
    runs: u32,
) -> Result<Vec<AdditionCase>, AdditionError> {
    (0..runs)
        .map(|r| run_addition_case(a, protocol, seed.wrapping_add(u64::from(r))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Dist;

    #[test]
    fn improvement_formula() {
        assert_eq!(node_addition_improvement(10.0, 8.0), 0.2);
        assert_eq!(node_addition_improvement(10.0, 10.0), 0.0);
        assert_eq!(node_addition_improvement(8.0, 10.0), -0.25);
    }

    #[test]
    fn addition_case_runs() {
        let a = AdditionSection {
            stages: 4,
            per_stage: Dist::Const { value: 6.0 },
            candidates: 6,
            capacity: Dist::FloorUniform { lo: 1.0, hi: 20.0 },
            interlayer: Dist::FloorUniform { lo: 1.0, hi: 100.0 },
            intralayer: Dist::FloorUniform { lo: 50.0, hi: 100.0 },
        };
        let c = run_addition_case(&a, &ProtocolParams::default(), 1).unwrap();
        assert_eq!(c.placements["gwtf"].len(), 4);
        assert_eq!(c.placements["random"].len(), 4);
        for v in c.after.values() {
            assert!(c.optimal <= *v + 1e-9);
        }
    }
}
