//! Leader selection, stage utilization flooding and admission of joining nodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Direction, NodeId, StageId, Topology};
use crate::message::{Message, UtilizationEntry};
use crate::simnet::{Engine, EventKind, NetConfig, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MembershipError {
    #[error("no data node is alive")]
    NoDataNodeAlive,
    #[error("unknown stage {0}")]
    UnknownStage(StageId),
    #[error("candidate {0} has zero capacity")]
    ZeroCapacity(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub fn elect_leader(topology: &Topology) -> Result<NodeId, MembershipError> {
    topology.alive_data_nodes().min().ok_or(MembershipError::NoDataNodeAlive)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageUtilization {
    pub capacity: u32,
    pub flows: u32,
}

impl StageUtilization {
    /// Flows over capacity; an empty stage is infinitely utilized.
    pub fn utilization(&self) -> f64 {
        if self.capacity == 0 {
            f64::INFINITY
        } else {
            f64::from(self.flows) / f64::from(self.capacity)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub stages: BTreeMap<StageId, StageUtilization>,
    /// False when the flood timed out before every expected node answered.
    pub complete: bool,
}

impl UtilizationReport {
    pub fn from_entries<'a>(
        num_stages: u32,
        entries: impl IntoIterator<Item = &'a UtilizationEntry>,
        complete: bool,
    ) -> Self {
        let mut stages: BTreeMap<StageId, StageUtilization> = (0..num_stages)
            .map(|s| (StageId(s), StageUtilization { capacity: 0, flows: 0 }))
            .collect();
        for e in entries {
            if let Some(s) = stages.get_mut(&e.stage) {
                s.capacity += e.capacity;
                s.flows += e.flows;
            }
        }
        UtilizationReport { stages, complete }
    }

    pub fn utilizations(&self) -> Vec<f64> {
        self.stages.values().map(StageUtilization::utilization).collect()
    }
}

/// Stages by utilization, highest first; ties go to the lower stage id.
pub fn rank_stages(report: &UtilizationReport) -> Vec<StageId> {
    let mut v: Vec<(StageId, f64)> = report.stages.iter().map(|(s, u)| (*s, u.utilization())).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(s, _)| s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: NodeId,
    pub capacity: u32,
    pub announced_at: f64,
}

impl Candidate {
    pub fn new(id: NodeId, capacity: u32, announced_at: f64) -> Result<Self, MembershipError> {
        if capacity == 0 {
            return Err(MembershipError::ZeroCapacity(id));
        }
        Ok(Candidate {
            id,
            capacity,
            announced_at,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Admission {
    pub assigned: BTreeMap<NodeId, StageId>,
    pub deferred: Vec<Candidate>,
}

/// Highest-capacity candidate to the most utilized stage, second to the second, and so on.
pub fn assign_candidates(candidates: &[Candidate], ranked: &[StageId]) -> Admission {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.capacity.cmp(&a.capacity).then(a.id.cmp(&b.id)));
    let mut out = Admission::default();
    for (i, c) in sorted.into_iter().enumerate() {
        match ranked.get(i) {
            Some(&s) => {
                out.assigned.insert(c.id, s);
            }
            None => out.deferred.push(c),
        }
    }
    out
}

/// Marks an existing (crashed or detached) node alive in `stage` with the candidate's
/// capacity. Its peers find it through the topology, which acts as the registry.
pub fn join_node(topology: &mut Topology, candidate: &Candidate, stage: StageId) -> Result<(), MembershipError> {
    if stage.0 >= topology.num_stages {
        return Err(MembershipError::UnknownStage(stage));
    }
    let node = topology
        .node_mut(candidate.id)
        .ok_or(MembershipError::UnknownNode(candidate.id))?;
    node.stage = Some(stage);
    node.capacity = candidate.capacity;
    node.alive = true;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodOutcome {
    pub report: UtilizationReport,
    pub messages: u64,
    pub duration: f64,
}

/// Upper bound on flood duration before the leader gives up.
pub fn flood_timeout(topology: &Topology) -> f64 {
    f64::from(topology.num_stages + 1) * topology.max_latency() * 2.0 + 1.0
}

/// Simulates the leader's utilization query travelling stage by stage. Each relay adds
/// its entry once and forwards whenever it learns new entries; last-stage relays reply
/// to the leader. `crashes` are injected at the given times.
pub fn utilization_flood(
    topology: &Topology,
    flows: &BTreeMap<NodeId, u32>,
    net: NetConfig,
    crashes: &[(NodeId, f64)],
) -> Result<FloodOutcome, MembershipError> {
    let leader = elect_leader(topology)?;
    let query_id = 1;
    let timeout = flood_timeout(topology);
    let expected: BTreeSet<NodeId> = topology.relays().filter(|r| r.alive).map(|r| r.id).collect();
    let mut engine = Engine::new(net);
    for &(n, t) in crashes {
        engine.schedule(t, EventKind::Crash(n));
    }
    let entry = |id: NodeId| {
        let spec = topology.node(id).expect("relay");
        UtilizationEntry {
            node: id,
            stage: spec.stage.expect("relay has a stage"),
            capacity: spec.capacity,
            flows: flows.get(&id).copied().unwrap_or(0),
        }
    };
    let stage0: Vec<NodeId> = topology.alive_stage_members(StageId(0)).collect();
    for n in stage0 {
        engine.send(
            topology,
            leader,
            n,
            Message::UtilizationQuery {
                query_id,
                entries: Vec::new(),
            },
            0.0,
        )?;
    }
    let mut known: BTreeMap<NodeId, BTreeMap<NodeId, UtilizationEntry>> = BTreeMap::new();
    let mut collected: BTreeMap<NodeId, UtilizationEntry> = BTreeMap::new();
    let mut failure: Option<SimError> = None;
    let last = StageId(topology.num_stages - 1);
    while !expected.iter().all(|n| collected.contains_key(n)) {
        match engine.peek_time() {
            Some(t) if t <= timeout => {}
            _ => break,
        }
        let Some(ev) = engine.pop()? else {
            break;
        };
        let eng = &mut engine;
        {
            let EventKind::Deliver { to, msg, .. } = ev.kind else {
                continue;
            };
            match msg {
                Message::UtilizationQuery { entries, .. } if to != leader => {
                    let mine = known.entry(to).or_default();
                    let before = mine.len();
                    for e in entries {
                        mine.insert(e.node, e);
                    }
                    mine.entry(to).or_insert_with(|| entry(to));
                    if mine.len() == before {
                        continue;
                    }
                    let entries: Vec<UtilizationEntry> = mine.values().copied().collect();
                    let stage = topology.stage_of(to);
                    let targets: Vec<NodeId> = if stage == Some(last) {
                        vec![leader]
                    } else {
                        topology
                            .stage_neighbors(to, Direction::Next)
                            .unwrap_or_default()
                            .into_iter()
                            .filter(|&n| !topology.node(n).map(|s| s.is_data()).unwrap_or(true))
                            .filter(|&n| topology.is_alive(n))
                            .collect()
                    };
                    for t in targets {
                        let msg = if t == leader {
                            Message::UtilizationReply {
                                query_id,
                                entries: entries.clone(),
                            }
                        } else {
                            Message::UtilizationQuery {
                                query_id,
                                entries: entries.clone(),
                            }
                        };
                        if let Err(e) = eng.send(topology, to, t, msg, 0.0) {
                            failure.get_or_insert(e);
                        }
                    }
                }
                Message::UtilizationReply { entries, .. } if to == leader => {
                    for e in entries {
                        collected.insert(e.node, e);
                    }
                }
                _ => {}
            }
        }
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    let complete = expected.iter().all(|n| collected.contains_key(n));
    Ok(FloodOutcome {
        report: UtilizationReport::from_entries(topology.num_stages, collected.values(), complete),
        messages: engine.total_sent(),
        duration: engine.now(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{full_links, layered};
    use crate::domain::NodeSpec;

    #[test]
    fn leader_is_lowest_alive_data_node() {
        let nodes = vec![NodeSpec::data(3, 1), NodeSpec::data(7, 1), NodeSpec::relay(1, 0, 1, 1.0)];
        let links = full_links(&nodes, 1.0, 1.0);
        let mut t = Topology::new(nodes, links, 1, 1.0).unwrap();
        assert_eq!(elect_leader(&t), Ok(NodeId(3)));
        t.node_mut(NodeId(3)).unwrap().alive = false;
        assert_eq!(elect_leader(&t), Ok(NodeId(7)));
        t.node_mut(NodeId(7)).unwrap().alive = false;
        assert_eq!(elect_leader(&t), Err(MembershipError::NoDataNodeAlive));
    }

    fn report(caps: &[u32], flows: &[u32]) -> UtilizationReport {
        let entries: Vec<UtilizationEntry> = caps
            .iter()
            .zip(flows)
            .enumerate()
            .map(|(i, (&c, &f))| UtilizationEntry {
                node: NodeId(i as u32 + 1),
                stage: StageId(i as u32),
                capacity: c,
                flows: f,
            })
            .collect();
        UtilizationReport::from_entries(caps.len() as u32, &entries, true)
    }

    #[test]
    fn utilization_ratios() {
        let r = report(&[2, 3, 4], &[2, 2, 2]);
        let u = r.utilizations();
        assert_eq!(u[0], 1.0);
        assert!((u[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(u[2], 0.5);
        assert_eq!(rank_stages(&r), vec![StageId(0), StageId(1), StageId(2)]);
        assert!(report(&[2, 3], &[0, 0]).utilizations().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ranking_ties_and_single() {
        assert_eq!(rank_stages(&report(&[2, 4], &[1, 2])), vec![StageId(0), StageId(1)]);
        assert_eq!(rank_stages(&report(&[2], &[1])), vec![StageId(0)]);
        assert_eq!(rank_stages(&report(&[4, 2, 0], &[1, 2, 0]))[0], StageId(2));
    }

    #[test]
    fn candidates_matched_positionally() {
        let a = Candidate::new(NodeId(10), 5, 0.0).unwrap();
        let b = Candidate::new(NodeId(11), 2, 0.0).unwrap();
        let c = Candidate::new(NodeId(12), 1, 0.0).unwrap();
        let got = assign_candidates(&[b, a], &[StageId(1), StageId(3)]);
        assert_eq!(got.assigned[&NodeId(10)], StageId(1));
        assert_eq!(got.assigned[&NodeId(11)], StageId(3));
        let got = assign_candidates(&[a, b, c], &[StageId(1), StageId(3)]);
        assert_eq!((got.assigned.len(), got.deferred), (2, vec![c]));
        assert!(assign_candidates(&[], &[StageId(0)]).assigned.is_empty());
        assert_eq!(
            Candidate::new(NodeId(1), 0, 0.0),
            Err(MembershipError::ZeroCapacity(NodeId(1)))
        );
    }

    #[test]
    fn join_makes_node_visible_to_neighbors() {
        let mut t = layered(3, 2, 1);
        let id = NodeId(3);
        t.node_mut(id).unwrap().alive = false;
        let prev = NodeId(1);
        assert!(!t.stage_neighbors(prev, Direction::Next).unwrap().contains(&id));
        join_node(&mut t, &Candidate::new(id, 4, 0.0).unwrap(), StageId(1)).unwrap();
        assert!(t.stage_neighbors(prev, Direction::Next).unwrap().contains(&id));
        assert!(t.is_alive(id));
        assert_eq!(
            join_node(&mut t, &Candidate::new(id, 4, 0.0).unwrap(), StageId(9)),
            Err(MembershipError::UnknownStage(StageId(9)))
        );
    }

    #[test]
    fn flood_collects_every_relay() {
        let t = layered(3, 2, 2);
        let flows: BTreeMap<NodeId, u32> = t.relays().map(|r| (r.id, 1)).collect();
        let out = utilization_flood(&t, &flows, NetConfig::default(), &[]).unwrap();
        assert!(out.report.complete);
        assert!(out.report.utilizations().iter().all(|&u| u == 0.5));
        assert!(out.duration <= flood_timeout(&t));
    }

    #[test]
    fn flood_with_crash_is_partial() {
        let t = layered(3, 2, 2);
        let crashed = t.alive_stage_members(StageId(1)).next().unwrap();
        let out = utilization_flood(&t, &BTreeMap::new(), NetConfig::default(), &[(crashed, 0.0)]).unwrap();
        assert!(!out.report.complete);
        assert_eq!(out.report.stages[&StageId(1)].capacity, 2);
        assert!(out.duration <= flood_timeout(&t) + 1e-9);
    }
}
