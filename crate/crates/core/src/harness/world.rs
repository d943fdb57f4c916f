//! Training iterations on the simulated network: flow formation, forward and backward
//! passes with failure handling, aggregation and the CAN TAKE handshake, under churn.
//!
//! Flows are formed between iterations on the relays alive at the boundary. Every
//! node reacts only to its own messages, timers and compute completions; the world
//! object just routes events and keeps the run log.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{ProtocolParams, Routing, TrainingSection};
use super::experiments::formation_config;
use super::generate::training_topology;
use super::metrics::{MetricsReport, Outcome, Pass, Record, RecoveryKind};
use crate::cost::path_cost;
use crate::domain::{NodeId, StageId, Topology};
use crate::lifecycle::{process_backward, process_forward, CanTake, Phase, StageParams, DEFAULT_DIM};
use crate::membership::elect_leader;
use crate::message::Message;
use crate::oracle::greedy_flows;
use crate::protocol::run_formation;
use crate::recovery::{pick_alternative, ExclusionList, ExclusionReason, ForwardDecision, PeerTable, RecoveryMode, RecoveryParams};
use crate::simnet::{inject_churn, Engine, Event, EventKind, NetConfig, RngStreams, SimError};

/// Microbatch ids encode `(iteration, data node, index)`.
pub fn batch_id(iteration: u32, data: NodeId, index: u32) -> u64 {
    (u64::from(iteration) << 32) | (u64::from(data.0) << 16) | u64::from(index)
}

pub fn batch_iteration(batch: u64) -> u32 {
    (batch >> 32) as u32
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub report: MetricsReport,
    pub records: Vec<Record>,
    pub trace_hash: String,
    /// Event trace lines, when the network config keeps them.
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BatchStage {
    Forward,
    Backward,
    Done,
}

#[derive(Debug, Clone)]
struct SourceBatch {
    path: Vec<NodeId>,
    stage: BatchStage,
    chasing: bool,
    restarting: bool,
    watch: Option<u64>,
}

/// What a relay keeps for a microbatch it has worked on.
#[derive(Debug, Clone)]
struct Held {
    path: Vec<NodeId>,
    upstream: NodeId,
    repair: bool,
    /// The gradient this node sent upstream, kept for path repair.
    gradient_sent: bool,
}

#[derive(Debug, Clone, Default)]
struct Aggregation {
    began: bool,
    applied: bool,
    shares: BTreeMap<NodeId, Vec<f64>>,
}

#[derive(Debug, Clone)]
struct NodeState {
    stage: Option<StageId>,
    params: StageParams,
    stored: BTreeSet<u64>,
    held: BTreeMap<u64, Held>,
    batches: BTreeMap<u64, SourceBatch>,
    peers: PeerTable,
    exclusion: ExclusionList,
    denied_to: BTreeSet<NodeId>,
    awaiting: BTreeMap<(u64, NodeId), u64>,
    agg: BTreeMap<u32, Aggregation>,
    can_take: BTreeMap<u32, CanTake>,
    aggregated_through: Option<u32>,
    member_since: u32,
    synced: bool,
    inbox: Vec<(NodeId, Message)>,
    done_sent: bool,
}

impl NodeState {
    fn new(stage: Option<StageId>, member_since: u32) -> Self {
        NodeState {
            stage,
            params: StageParams::new(DEFAULT_DIM),
            stored: BTreeSet::new(),
            held: BTreeMap::new(),
            batches: BTreeMap::new(),
            peers: PeerTable::default(),
            exclusion: ExclusionList::default(),
            denied_to: BTreeSet::new(),
            awaiting: BTreeMap::new(),
            agg: BTreeMap::new(),
            can_take: BTreeMap::new(),
            aggregated_through: None,
            member_since,
            synced: true,
            inbox: Vec::new(),
            done_sent: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Wait {
    Complete { batch: u64, peer: NodeId, sent_at: f64, backward: bool },
    Pong { batch: u64, peer: NodeId },
    Shares { iteration: u32 },
    ChaseEnd { batch: u64 },
    /// The data node's own check that a backward pass is still making progress.
    BackwardWatch { batch: u64 },
    Deadline,
    Crash,
}

#[derive(Debug, Clone)]
enum Job {
    Forward { from: NodeId, path: Vec<NodeId>, repair: bool },
    Emit { repair: bool },
    Turnaround { from: NodeId },
    Backward { from: NodeId },
    Finish { from: NodeId },
}

struct World {
    cfg: TrainingSection,
    protocol: ProtocolParams,
    recovery: RecoveryParams,
    streams: RngStreams,
    /// Membership as known at the last iteration boundary.
    topology: Topology,
    engine: Engine,
    nodes: BTreeMap<NodeId, NodeState>,
    leader: NodeId,
    iteration: u32,
    records: Vec<Record>,
    waits: BTreeMap<u64, (u32, NodeId, Wait)>,
    jobs: BTreeMap<u64, Job>,
    next_id: u64,
    routes: BTreeMap<u64, Vec<NodeId>>,
    done_reports: BTreeMap<NodeId, Vec<u64>>,
    ready: BTreeSet<NodeId>,
    reference: BTreeMap<(Option<StageId>, u32), Vec<f64>>,
    pending_sync: BTreeMap<NodeId, Vec<NodeId>>,
    flows: Option<Vec<Vec<NodeId>>>,
    formation_hashes: Sha256,
    scripted: Vec<ScriptedCrash>,
}

impl World {
    fn new(cfg: &TrainingSection, protocol: &ProtocolParams, seed: u64, net: NetConfig) -> Self {
        let streams = RngStreams::new(seed);
        let topology = training_topology(cfg, &mut streams.stream("topology"));
        let leader = elect_leader(&topology).expect("training topology has data nodes");
        let nodes = topology
            .nodes
            .values()
            .map(|n| (n.id, NodeState::new(n.stage, 0)))
            .collect();
        World {
            cfg: cfg.clone(),
            protocol: *protocol,
            recovery: RecoveryParams { k: cfg.k, gamma: cfg.gamma },
            streams,
            topology,
            engine: Engine::new(net),
            nodes,
            leader,
            iteration: 0,
            records: Vec::new(),
            waits: BTreeMap::new(),
            jobs: BTreeMap::new(),
            next_id: 0,
            routes: BTreeMap::new(),
            done_reports: BTreeMap::new(),
            ready: BTreeSet::new(),
            reference: BTreeMap::new(),
            pending_sync: BTreeMap::new(),
            flows: None,
            formation_hashes: Sha256::new(),
            scripted: Vec::new(),
        }
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn node(&mut self, id: NodeId) -> &mut NodeState {
        self.nodes.get_mut(&id).expect("known node")
    }

    fn is_data(&self, id: NodeId) -> bool {
        self.topology.node(id).is_some_and(|n| n.is_data())
    }

    fn compute_cost(&self, id: NodeId) -> f64 {
        self.topology.node(id).map(|n| n.compute_cost).unwrap_or(0.0)
    }

    fn record(&mut self, r: Record) {
        self.records.push(r);
    }

    fn recovery_event(&mut self, kind: RecoveryKind) {
        self.record(Record::Recovery { iteration: self.iteration, kind });
    }

    /// Same-stage group of `id` in the current membership, `id` included.
    fn group(&self, id: NodeId) -> Vec<NodeId> {
        match self.topology.stage_of(id) {
            Some(s) => self.topology.alive_stage_members(s).collect(),
            None => self.topology.alive_data_nodes().collect(),
        }
    }

    fn upstream_group(&self, id: NodeId) -> Vec<NodeId> {
        match self.topology.stage_of(id) {
            Some(StageId(0)) => self.topology.alive_data_nodes().collect(),
            Some(StageId(s)) => self.topology.alive_stage_members(StageId(s - 1)).collect(),
            None => Vec::new(),
        }
    }

    fn downstream_group(&self, id: NodeId) -> Vec<NodeId> {
        match self.topology.stage_of(id) {
            Some(StageId(s)) if s + 1 < self.topology.num_stages => {
                self.topology.alive_stage_members(StageId(s + 1)).collect()
            }
            Some(_) => Vec::new(),
            None => self.topology.alive_stage_members(StageId(0)).collect(),
        }
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Message) -> Result<(), SimError> {
        if from == to {
            return self.on_message(to, from, msg);
        }
        let size = if msg.is_payload() { self.topology.activation_size } else { 0.0 };
        let batch = match &msg {
            Message::Activation { batch, .. } | Message::Gradient { batch } => Some(*batch),
            _ => None,
        };
        let at = self.engine.send(&self.topology, from, to, msg, size)?;
        if let Some(batch) = batch {
            let transit = at - self.engine.now();
            self.record(Record::Payload { iteration: self.iteration, batch, from, to, transit });
        }
        Ok(())
    }

    fn arm(&mut self, node: NodeId, delay: f64, wait: Wait) -> u64 {
        let id = self.fresh_id();
        self.engine.set_timer(node, delay, id);
        self.waits.insert(id, (self.iteration, node, wait));
        id
    }

    fn start_compute(&mut self, node: NodeId, batch: u64, pass: Pass, recompute: bool, job: Job) {
        let duration = self.compute_cost(node);
        let tag = self.fresh_id();
        self.jobs.insert(tag, job);
        self.engine.compute(node, duration, batch, tag);
        self.record(Record::Compute { iteration: self.iteration, batch, node, pass, duration, recompute });
    }

    /// Expected round trip from `from` to `peer` and back: payload out, compute, ack.
    fn initial_rtt(&self, from: NodeId, peer: NodeId) -> f64 {
        let out = self.engine.delay(&self.topology, from, peer, self.topology.activation_size).unwrap_or(0.0);
        let back = self.engine.delay(&self.topology, peer, from, 0.0).unwrap_or(0.0);
        out + self.compute_cost(peer) + back
    }

    /// Sends a payload and waits for the peer's COMPLETE.
    fn send_payload(&mut self, from: NodeId, to: NodeId, msg: Message, batch: u64, backward: bool) -> Result<(), SimError> {
        let initial = self.initial_rtt(from, to);
        let timeout = self.nodes[&from].peers.timeout(to, self.recovery, initial);
        let sent_at = self.engine.now();
        let id = self.arm(from, timeout, Wait::Complete { batch, peer: to, sent_at, backward });
        if let Some(old) = self.node(from).awaiting.insert((batch, to), id) {
            self.waits.remove(&old);
        }
        self.send(from, to, msg)
    }

    fn alternatives(&self, from: NodeId, stale: NodeId) -> Vec<(NodeId, f64)> {
        let members: Vec<NodeId> = match self.topology.stage_of(stale) {
            Some(s) => self.topology.alive_stage_members(s).collect(),
            None => return Vec::new(),
        };
        members
            .into_iter()
            .filter(|&n| n != stale)
            .map(|n| (n, self.topology.edge_cost(from, n).value()))
            .collect()
    }

    // ---- iteration driver ----

    fn run(mut self) -> TrainingRun {
        let mut horizon = None;
        let mut churn_rng = self.streams.stream("churn");
        let mut failure = None;
        for it in 0..self.cfg.iterations {
            match self.iteration_run(it, &mut churn_rng, horizon) {
                Ok(Some(d)) => horizon = Some(d),
                Ok(None) => {
                    failure = Some(format!("iteration {it} did not finish"));
                    break;
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let label = match (self.cfg.routing, self.cfg.recovery) {
            (Routing::Gwtf, RecoveryMode::Gwtf) => "gwtf",
            (Routing::Gwtf, RecoveryMode::PipelineRestart) => "gwtf-restart",
            (Routing::Greedy, RecoveryMode::Gwtf) => "greedy",
            (Routing::Greedy, RecoveryMode::PipelineRestart) => "greedy-restart",
        };
        let mut report = MetricsReport::from_records(label, &self.records);
        report.failure = failure;
        let mut h = self.formation_hashes.clone();
        h.update(self.engine.trace_hash().as_bytes());
        let trace_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let trace = self.engine.config().keep_trace.then(|| self.engine.trace_lines());
        TrainingRun {
            report,
            records: self.records,
            trace_hash,
            trace,
        }
    }

    /// Runs one iteration; returns its length, or `None` when it stalled.
    fn iteration_run(&mut self, it: u32, churn_rng: &mut ChaCha8Rng, horizon: Option<f64>) -> Result<Option<f64>, SimError> {
        self.iteration = it;
        let start = self.engine.now();
        self.record(Record::Start { iteration: it, time: start });
        let sent_before = self.engine.total_sent();

        // Membership at the boundary: crashed relays leave, drawn rejoins come back.
        let mut changed = self.flows.is_none();
        let relays: Vec<NodeId> = self.topology.relays().map(|n| n.id).collect();
        for &r in &relays {
            let alive = !self.engine.is_crashed(r);
            if self.topology.is_alive(r) != alive {
                self.topology.node_mut(r).expect("relay").alive = alive;
                changed = true;
            }
        }
        let states: Vec<(NodeId, bool)> = relays.iter().map(|&r| (r, self.topology.is_alive(r))).collect();
        let estimate = horizon.unwrap_or_else(|| self.estimate(None));
        let plan = inject_churn(self.cfg.churn, &states, churn_rng, start, estimate);
        for &r in &plan.rejoins {
            self.rejoin(r);
            changed = true;
        }
        if changed {
            self.form_flows(it)?;
        }
        for &(r, at) in &plan.crashes {
            self.arm(r, at - start, Wait::Crash);
        }

        // Fresh per-iteration state.
        self.done_reports.clear();
        self.ready.clear();
        self.routes.clear();
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let last = self.topology.stage_of(id).is_some_and(|s| s.0 + 1 == self.topology.num_stages);
            let n = self.node(id);
            n.exclusion.clear();
            n.denied_to.clear();
            n.awaiting.clear();
            n.held.clear();
            n.stored.clear();
            n.batches.clear();
            n.done_sent = false;
            n.can_take.insert(it, CanTake::new(last));
        }

        let flows = self.flows.clone().unwrap_or_default();
        let iteration_estimate = self.estimate(Some(&flows));
        let deadline = self.cfg.deadline_factor * iteration_estimate;
        let data: Vec<NodeId> = self.topology.data_nodes().collect();
        for &d in &data {
            let mine: Vec<&Vec<NodeId>> = flows.iter().filter(|p| p.first() == Some(&d)).collect();
            for j in 0..self.cfg.microbatches {
                let b = batch_id(it, d, j);
                self.record(Record::Emitted { iteration: it, batch: b });
                match mine.get(j as usize) {
                    Some(path) => {
                        let path = (*path).clone();
                        self.routes.insert(b, path.clone());
                        self.node(d).batches.insert(
                            b,
                            SourceBatch { path, stage: BatchStage::Forward, chasing: false, restarting: false, watch: None },
                        );
                        self.start_compute(d, b, Pass::Forward, false, Job::Emit { repair: false });
                    }
                    None => self.record(Record::Finished { iteration: it, batch: b, outcome: Outcome::Deferred, path: Vec::new() }),
                }
            }
            self.arm(d, deadline, Wait::Deadline);
            self.check_source_done(d)?;
        }

        let limit = start + 20.0 * deadline.max(1.0);
        while self.ready.len() < data.len() {
            match self.engine.peek_time() {
                Some(t) if t <= limit => {}
                _ => return Ok(None),
            }
            if let Some(ev) = self.engine.pop()? {
                self.on_event(ev)?;
            }
        }
        let count = self.engine.total_sent() - sent_before;
        self.record(Record::Messages { iteration: it, count });
        Ok(Some(self.engine.now() - start))
    }

    /// Crash-free iteration length from path costs: a forward and a backward pass over
    /// the most expensive flow plus a few link delays for the handshakes.
    fn estimate(&self, flows: Option<&[Vec<NodeId>]>) -> f64 {
        let hop = self.topology.max_latency() + self.topology.activation_size / self.topology.min_bandwidth();
        let worst = flows
            .and_then(|f| {
                f.iter()
                    .filter_map(|p| path_cost(p, &self.topology).ok())
                    .max_by(f64::total_cmp)
            })
            .unwrap_or_else(|| f64::from(self.topology.num_stages + 1) * (hop + self.topology.max_compute()));
        2.0 * worst + 4.0 * hop
    }

    fn form_flows(&mut self, it: u32) -> Result<(), SimError> {
        let paths = match self.cfg.routing {
            Routing::Gwtf => {
                let seed = self.streams.seed() ^ (u64::from(it) << 40) ^ 0x5eed;
                let formed = run_formation(&self.topology, &formation_config(&self.protocol), NetConfig::default(), &RngStreams::new(seed))?;
                self.formation_hashes.update(formed.trace_hash.as_bytes());
                self.record(Record::Messages { iteration: it, count: formed.messages });
                formed.paths
            }
            Routing::Greedy => greedy_flows(&self.topology),
        };
        self.flows = Some(paths);
        Ok(())
    }

    fn rejoin(&mut self, r: NodeId) {
        self.engine.revive_now(r);
        self.topology.node_mut(r).expect("relay").alive = true;
        self.recovery_event(RecoveryKind::Rejoin);
        let stage = self.topology.stage_of(r);
        let mut state = NodeState::new(stage, self.iteration);
        state.aggregated_through = self.iteration.checked_sub(1);
        let source = self.group(r).into_iter().find(|&n| n != r && !self.engine.is_crashed(n));
        if let Some(src) = source {
            let s = &self.nodes[&src];
            state.params = s.params.snapshot();
            if self.iteration > 0 && s.aggregated_through != Some(self.iteration - 1) {
                state.synced = false;
                self.pending_sync.entry(src).or_default().push(r);
            }
        }
        self.nodes.insert(r, state);
    }

    // ---- event handling ----

    fn on_event(&mut self, ev: Event) -> Result<(), SimError> {
        match ev.kind {
            EventKind::Deliver { from, to, msg, .. } => self.on_message(to, from, msg),
            EventKind::ComputeDone { node, batch, tag } => match self.jobs.remove(&tag) {
                Some(job) => self.on_job(node, batch, job),
                None => Ok(()),
            },
            EventKind::TimerFire { node, timer } => match self.waits.remove(&timer) {
                Some((it, owner, wait)) if owner == node => self.on_timer(node, timer, it, wait),
                _ => Ok(()),
            },
            EventKind::Crash(_) | EventKind::Join(_) => Ok(()),
        }
    }

    fn on_timer(&mut self, node: NodeId, timer: u64, it: u32, wait: Wait) -> Result<(), SimError> {
        match wait {
            Wait::Crash => {
                self.crash(node);
                Ok(())
            }
            Wait::Shares { iteration } => self.apply_aggregation(node, iteration),
            _ if it != self.iteration => Ok(()),
            Wait::Complete { batch, peer, backward, .. } => {
                if self.nodes[&node].awaiting.get(&(batch, peer)) != Some(&timer) {
                    return Ok(());
                }
                self.node(node).awaiting.remove(&(batch, peer));
                self.recovery_event(RecoveryKind::Timeout);
                self.node(node).exclusion.exclude(peer, ExclusionReason::Timeout);
                if backward {
                    let source = self.source_of(node, batch);
                    self.send(node, source, Message::BackwardFailure { batch })
                } else {
                    self.reroute(node, batch, peer)
                }
            }
            Wait::Pong { batch, peer } => {
                self.recovery_event(RecoveryKind::Timeout);
                self.node(node).exclusion.exclude(peer, ExclusionReason::Timeout);
                self.repair(node, batch, peer)
            }
            Wait::BackwardWatch { batch } => {
                let open = self.nodes[&node]
                    .batches
                    .get(&batch)
                    .is_some_and(|b| b.stage == BatchStage::Backward && b.watch == Some(timer));
                if open {
                    self.watch(node, batch);
                    self.on_backward_failure(node, batch)?;
                }
                Ok(())
            }
            Wait::ChaseEnd { batch } => {
                if let Some(b) = self.node(node).batches.get_mut(&batch) {
                    b.chasing = false;
                }
                Ok(())
            }
            Wait::Deadline => {
                let open: Vec<u64> = self.nodes[&node]
                    .batches
                    .iter()
                    .filter(|(_, b)| b.stage != BatchStage::Done)
                    .map(|(k, _)| *k)
                    .collect();
                for b in open {
                    self.finish(node, b, Outcome::Abandoned);
                }
                self.check_source_done(node)
            }
        }
    }

    fn source_of(&self, node: NodeId, batch: u64) -> NodeId {
        if self.is_data(node) {
            return node;
        }
        self.nodes[&node].held.get(&batch).map(|h| h.path[0]).unwrap_or(NodeId((batch >> 16 & 0xffff) as u32))
    }

    /// Churn crash. The last running relay of a stage is kept alive.
    fn crash(&mut self, node: NodeId) {
        let running = self.group(node).into_iter().filter(|&n| !self.engine.is_crashed(n)).count();
        if running <= 1 || self.engine.is_crashed(node) {
            return;
        }
        self.engine.crash_now(node);
        self.recovery_event(RecoveryKind::Crash);
    }

    fn on_message(&mut self, at: NodeId, from: NodeId, msg: Message) -> Result<(), SimError> {
        match msg {
            Message::Activation { batch, path, repair } => self.on_activation(at, from, batch, path, repair),
            Message::Gradient { batch } => self.on_gradient(at, from, batch),
            Message::Complete { batch } => {
                if let Some(timer) = self.node(at).awaiting.remove(&(batch, from)) {
                    if let Some((_, _, Wait::Complete { sent_at, .. })) = self.waits.remove(&timer) {
                        let rtt = self.engine.now() - sent_at;
                        if rtt > 0.0 {
                            let gamma = self.recovery.gamma;
                            let _ = self.node(at).peers.observe(from, rtt, gamma);
                        }
                    }
                }
                Ok(())
            }
            Message::Deny { batch } => {
                if let Some(timer) = self.node(at).awaiting.remove(&(batch, from)) {
                    self.waits.remove(&timer);
                }
                self.recovery_event(RecoveryKind::Deny);
                self.node(at).exclusion.exclude(from, ExclusionReason::Deny);
                self.reroute(at, batch, from)
            }
            Message::CapacityFreed => {
                self.node(at).exclusion.on_capacity_freed(from);
                Ok(())
            }
            Message::BackwardFailure { batch } => self.on_backward_failure(at, batch),
            Message::Ping { nonce, batch } => self.on_ping(at, from, nonce, batch),
            Message::Pong { nonce } => {
                if let Some((_, owner, Wait::Pong { .. })) = self.waits.get(&nonce) {
                    if *owner == at {
                        self.waits.remove(&nonce);
                        self.node(at).exclusion.on_pong(from);
                    }
                }
                Ok(())
            }
            Message::IterationDone { iteration, completed } => {
                if iteration == self.iteration && at == self.leader {
                    self.done_reports.insert(from, completed);
                    self.maybe_begin_aggregation()?;
                }
                Ok(())
            }
            Message::BeginAggregation { iteration, completed } => self.on_begin(at, iteration, &completed),
            Message::GradientShare { iteration, vector } => {
                let agg = self.node(at).agg.entry(iteration).or_default();
                if !agg.applied {
                    agg.shares.insert(from, vector);
                }
                self.try_apply(at, iteration)
            }
            Message::CanTake { iteration } => {
                if let Some(c) = self.node(at).can_take.get_mut(&iteration) {
                    c.downstream_ready = true;
                }
                self.check_can_take(at, iteration)
            }
            _ => Ok(()),
        }
    }

    // ---- forward pass ----

    /// Activations of a new iteration wait until this node has applied the previous
    /// update (or, for a joiner, received the stage parameters).
    fn must_wait(&self, at: NodeId, iteration: u32) -> bool {
        let n = &self.nodes[&at];
        if !n.synced {
            return true;
        }
        iteration > 0 && n.member_since < iteration && n.aggregated_through.is_none_or(|a| a + 1 < iteration)
    }

    fn on_activation(&mut self, at: NodeId, from: NodeId, batch: u64, path: Vec<NodeId>, repair: bool) -> Result<(), SimError> {
        let it = batch_iteration(batch);
        if it != self.iteration {
            return Ok(());
        }
        if self.must_wait(at, it) {
            self.node(at).inbox.push((from, Message::Activation { batch, path, repair }));
            return Ok(());
        }
        if self.phase(at, it) != Phase::Forward {
            return Ok(());
        }
        if self.is_data(at) {
            return self.on_return(at, from, batch, repair);
        }
        let gwtf = self.cfg.recovery == RecoveryMode::Gwtf;
        if let Some(h) = self.nodes[&at].held.get(&batch) {
            if repair && gwtf && h.gradient_sent {
                // Repaired upstream: hand it the stored gradient.
                self.node(at).held.get_mut(&batch).expect("held").upstream = from;
                self.send(at, from, Message::Complete { batch })?;
                return self.send_payload(at, from, Message::Gradient { batch }, batch, true);
            }
        } else {
            let capacity = self.topology.node(at).map(|n| n.capacity).unwrap_or(0);
            if self.nodes[&at].held.len() as u32 >= capacity {
                self.node(at).denied_to.insert(from);
                return self.send(at, from, Message::Deny { batch });
            }
        }
        self.check_params(at, it);
        let node = self.node(at);
        if process_forward(at, Phase::Forward, &mut node.stored, batch, 0.0).is_err() {
            return Ok(());
        }
        node.held.insert(batch, Held { path: path.clone(), upstream: from, repair, gradient_sent: false });
        self.start_compute(at, batch, Pass::Forward, repair, Job::Forward { from, path, repair });
        Ok(())
    }

    /// Once a node has begun aggregating an iteration, that iteration's payloads are stale.
    fn phase(&self, at: NodeId, iteration: u32) -> Phase {
        match self.nodes[&at].agg.get(&iteration) {
            Some(a) if a.began => Phase::Aggregation,
            _ => Phase::Forward,
        }
    }

    /// Records a Forward-phase entry and flags parameters that differ from the first
    /// stage member seen this iteration.
    fn check_params(&mut self, at: NodeId, it: u32) {
        let key = (self.nodes[&at].stage, it);
        let values = self.nodes[&at].params.values.clone();
        match self.reference.get(&key) {
            Some(v) if *v != values => self.record(Record::ParamMismatch { iteration: it }),
            Some(_) => {}
            None => {
                self.reference.insert(key, values);
            }
        }
    }

    fn position(&self, at: NodeId) -> usize {
        self.topology.stage_of(at).map(|s| s.index() + 1).unwrap_or(0)
    }

    fn forward_done(&mut self, at: NodeId, batch: u64, from: NodeId, path: Vec<NodeId>, repair: bool) -> Result<(), SimError> {
        let pos = self.position(at);
        if let Some(r) = self.routes.get_mut(&batch) {
            r[pos] = at;
        }
        let next = path[pos + 1];
        self.send(at, from, Message::Complete { batch })?;
        self.send_payload(at, next, Message::Activation { batch, path, repair }, batch, false)
    }

    /// A forward send failed (timeout or DENY): try another node of the same stage or
    /// push the DENY further upstream.
    fn reroute(&mut self, at: NodeId, batch: u64, stale: NodeId) -> Result<(), SimError> {
        if batch_iteration(batch) != self.iteration {
            return Ok(());
        }
        let options = self.alternatives(at, stale);
        let decision = pick_alternative(&self.nodes[&at].exclusion, &options);
        let pos = self.position(at);
        if self.is_data(at) {
            let Some(b) = self.nodes[&at].batches.get(&batch).cloned() else {
                return Ok(());
            };
            if b.stage == BatchStage::Done {
                return Ok(());
            }
            return match decision {
                ForwardDecision::Reroute(n) => {
                    self.recovery_event(RecoveryKind::Reroute);
                    let repair = b.stage == BatchStage::Backward || b.restarting;
                    let sb = self.node(at).batches.get_mut(&batch).expect("batch");
                    sb.path[1] = n;
                    let path = sb.path.clone();
                    self.send_payload(at, n, Message::Activation { batch, path, repair }, batch, false)
                }
                ForwardDecision::Deny => {
                    let outcome = if b.stage == BatchStage::Backward { Outcome::Abandoned } else { Outcome::Deferred };
                    self.finish(at, batch, outcome);
                    self.check_source_done(at)
                }
            };
        }
        let Some(h) = self.nodes[&at].held.get(&batch).cloned() else {
            return Ok(());
        };
        match decision {
            ForwardDecision::Reroute(n) => {
                self.recovery_event(RecoveryKind::Reroute);
                let held = self.node(at).held.get_mut(&batch).expect("held");
                held.path[pos + 1] = n;
                let path = held.path.clone();
                self.send_payload(at, n, Message::Activation { batch, path, repair: h.repair }, batch, false)
            }
            ForwardDecision::Deny => {
                let node = self.node(at);
                node.held.remove(&batch);
                node.stored.remove(&batch);
                let notify: Vec<NodeId> = std::mem::take(&mut node.denied_to).into_iter().collect();
                for n in notify {
                    self.send(at, n, Message::CapacityFreed)?;
                }
                self.send(at, h.upstream, Message::Deny { batch })
            }
        }
    }

    // ---- data node ----

    fn on_job(&mut self, node: NodeId, batch: u64, job: Job) -> Result<(), SimError> {
        if batch_iteration(batch) != self.iteration {
            return Ok(());
        }
        match job {
            Job::Forward { from, path, repair } => self.forward_done(node, batch, from, path, repair),
            Job::Emit { repair } => {
                let Some(b) = self.nodes[&node].batches.get(&batch) else {
                    return Ok(());
                };
                if b.stage == BatchStage::Done {
                    return Ok(());
                }
                let path = b.path.clone();
                self.send_payload(node, path[1], Message::Activation { batch, path, repair }, batch, false)
            }
            Job::Turnaround { from } => {
                if let Some(b) = self.node(node).batches.get_mut(&batch) {
                    b.stage = BatchStage::Backward;
                    b.restarting = false;
                }
                self.send(node, from, Message::Complete { batch })?;
                self.watch(node, batch);
                self.send_payload(node, from, Message::Gradient { batch }, batch, true)
            }
            Job::Backward { from } => {
                let pos = self.position(node);
                if let Some(r) = self.routes.get_mut(&batch) {
                    r[pos] = node;
                }
                let stage = self.topology.stage_of(node).expect("relay");
                let n = self.node(node);
                let upstream = match n.held.get_mut(&batch) {
                    Some(h) => {
                        h.gradient_sent = true;
                        h.upstream
                    }
                    None => return Ok(()),
                };
                let _ = process_backward(node, stage, &n.stored, &mut n.params, batch, 0.0);
                self.send(node, from, Message::Complete { batch })?;
                self.send_payload(node, upstream, Message::Gradient { batch }, batch, true)
            }
            Job::Finish { from } => {
                self.send(node, from, Message::Complete { batch })?;
                let stage = StageId(self.topology.num_stages);
                self.node(node).params.accumulate(stage, batch);
                self.finish(node, batch, Outcome::Completed);
                self.check_source_done(node)
            }
        }
    }

    /// Activation back at its data node after the last stage.
    fn on_return(&mut self, at: NodeId, from: NodeId, batch: u64, repair: bool) -> Result<(), SimError> {
        let Some(b) = self.nodes[&at].batches.get(&batch).cloned() else {
            return Ok(());
        };
        match b.stage {
            BatchStage::Done => Ok(()),
            BatchStage::Backward if repair && self.cfg.recovery == RecoveryMode::Gwtf => {
                self.send(at, from, Message::Complete { batch })?;
                self.send_payload(at, from, Message::Gradient { batch }, batch, true)
            }
            BatchStage::Backward => Ok(()),
            BatchStage::Forward => {
                self.check_params(at, self.iteration);
                self.start_compute(at, batch, Pass::Turnaround, false, Job::Turnaround { from });
                Ok(())
            }
        }
    }

    fn on_gradient(&mut self, at: NodeId, from: NodeId, batch: u64) -> Result<(), SimError> {
        let it = batch_iteration(batch);
        let stage = self.topology.stage_of(at);
        if let Some(i) = self.scripted.iter().position(|c| c.batch == batch && Some(c.stage) == stage) {
            self.scripted.remove(i);
            self.engine.crash_now(at);
            self.recovery_event(RecoveryKind::Crash);
            return Ok(());
        }
        if it != self.iteration || self.phase(at, it) != Phase::Forward {
            return Ok(());
        }
        if self.is_data(at) {
            let ok = self.nodes[&at].batches.get(&batch).is_some_and(|b| b.stage == BatchStage::Backward);
            if ok {
                self.start_compute(at, batch, Pass::Backward, false, Job::Finish { from });
            }
            return Ok(());
        }
        if !self.nodes[&at].stored.contains(&batch) {
            return Ok(());
        }
        self.start_compute(at, batch, Pass::Backward, false, Job::Backward { from });
        Ok(())
    }

    fn finish(&mut self, at: NodeId, batch: u64, outcome: Outcome) {
        let Some(b) = self.node(at).batches.get_mut(&batch) else {
            return;
        };
        if b.stage == BatchStage::Done {
            return;
        }
        b.stage = BatchStage::Done;
        let path = self.routes.get(&batch).cloned().unwrap_or_default();
        self.record(Record::Finished { iteration: self.iteration, batch, outcome, path });
    }

    fn check_source_done(&mut self, d: NodeId) -> Result<(), SimError> {
        let n = &self.nodes[&d];
        if n.done_sent || n.batches.values().any(|b| b.stage != BatchStage::Done) {
            return Ok(());
        }
        let completed: Vec<u64> = self
            .records
            .iter()
            .filter_map(|r| match r {
                Record::Finished { iteration, batch, outcome: Outcome::Completed, .. }
                    if *iteration == self.iteration && n.batches.contains_key(batch) =>
                {
                    Some(*batch)
                }
                _ => None,
            })
            .collect();
        self.node(d).done_sent = true;
        let iteration = self.iteration;
        self.send(d, self.leader, Message::IterationDone { iteration, completed })
    }

    // ---- backward-pass failures ----

    fn on_backward_failure(&mut self, at: NodeId, batch: u64) -> Result<(), SimError> {
        let Some(b) = self.nodes[&at].batches.get(&batch).cloned() else {
            return Ok(());
        };
        if b.stage != BatchStage::Backward {
            return Ok(());
        }
        match self.cfg.recovery {
            RecoveryMode::Gwtf => {
                if b.chasing {
                    return Ok(());
                }
                self.node(at).batches.get_mut(&batch).expect("batch").chasing = true;
                let window = self.chase_window();
                self.arm(at, window, Wait::ChaseEnd { batch });
                self.ping(at, b.path[1], batch)
            }
            RecoveryMode::PipelineRestart => {
                self.recovery_event(RecoveryKind::Restart);
                let sb = self.node(at).batches.get_mut(&batch).expect("batch");
                sb.stage = BatchStage::Forward;
                sb.restarting = true;
                self.start_compute(at, batch, Pass::Forward, false, Job::Emit { repair: true });
                Ok(())
            }
        }
    }

    /// Arms the backward watch: `k` times the cost of the path as last known here.
    fn watch(&mut self, d: NodeId, batch: u64) {
        let Some(b) = self.nodes[&d].batches.get(&batch) else {
            return;
        };
        let expected = path_cost(&b.path, &self.topology).unwrap_or_else(|_| self.chase_window());
        let id = self.arm(d, self.recovery.k * expected, Wait::BackwardWatch { batch });
        if let Some(b) = self.node(d).batches.get_mut(&batch) {
            b.watch = Some(id);
        }
    }

    fn chase_window(&self) -> f64 {
        let hop = self.topology.max_latency() + self.topology.activation_size / self.topology.min_bandwidth();
        self.recovery.k * 2.0 * f64::from(self.topology.num_stages + 1) * (hop + self.topology.max_compute())
    }

    fn ping(&mut self, from: NodeId, to: NodeId, batch: u64) -> Result<(), SimError> {
        let rtt = self.engine.delay(&self.topology, from, to, 0.0)? + self.engine.delay(&self.topology, to, from, 0.0)?;
        let nonce = self.arm(from, self.recovery.k * rtt, Wait::Pong { batch, peer: to });
        self.send(from, to, Message::Ping { nonce, batch })
    }

    fn on_ping(&mut self, at: NodeId, from: NodeId, nonce: u64, batch: u64) -> Result<(), SimError> {
        self.send(at, from, Message::Pong { nonce })?;
        let pos = self.position(at);
        let next = self.nodes[&at].held.get(&batch).map(|h| h.path[pos + 1]);
        match next {
            Some(n) if !self.is_data(n) => self.ping(at, n, batch),
            _ => Ok(()),
        }
    }

    /// First failed ping of a chase: resend the stored activation to a stand-in for the
    /// unreachable peer, which recomputes and carries on towards the old path.
    fn repair(&mut self, at: NodeId, batch: u64, stale: NodeId) -> Result<(), SimError> {
        let options = self.alternatives(at, stale);
        let decision = pick_alternative(&self.nodes[&at].exclusion, &options);
        let pos = self.position(at);
        let path = if self.is_data(at) {
            self.nodes[&at].batches.get(&batch).map(|b| b.path.clone())
        } else {
            self.nodes[&at].held.get(&batch).map(|h| h.path.clone())
        };
        let Some(mut path) = path else {
            return Ok(());
        };
        match decision {
            ForwardDecision::Reroute(n) => {
                self.recovery_event(RecoveryKind::Repair);
                path[pos + 1] = n;
                if self.is_data(at) {
                    self.node(at).batches.get_mut(&batch).expect("batch").path = path.clone();
                } else {
                    let h = self.node(at).held.get_mut(&batch).expect("held");
                    h.path = path.clone();
                    h.repair = true;
                }
                self.send_payload(at, n, Message::Activation { batch, path, repair: true }, batch, false)
            }
            ForwardDecision::Deny => {
                if self.is_data(at) {
                    self.finish(at, batch, Outcome::Abandoned);
                    self.check_source_done(at)
                } else {
                    let up = self.nodes[&at].held[&batch].upstream;
                    self.send(at, up, Message::Deny { batch })
                }
            }
        }
    }

    // ---- aggregation and CAN TAKE ----

    fn maybe_begin_aggregation(&mut self) -> Result<(), SimError> {
        let data: Vec<NodeId> = self.topology.alive_data_nodes().collect();
        if !data.iter().all(|d| self.done_reports.contains_key(d)) {
            return Ok(());
        }
        let completed: Vec<u64> = self.done_reports.values().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let iteration = self.iteration;
        let mut targets = data;
        targets.extend(self.topology.alive_stage_members(StageId(0)));
        for t in targets {
            self.send(self.leader, t, Message::BeginAggregation { iteration, completed: completed.clone() })?;
        }
        Ok(())
    }

    fn on_begin(&mut self, at: NodeId, iteration: u32, completed: &[u64]) -> Result<(), SimError> {
        if self.nodes[&at].agg.get(&iteration).is_some_and(|a| a.began) {
            return Ok(());
        }
        if !self.is_data(at) {
            for n in self.downstream_group(at) {
                self.send(at, n, Message::BeginAggregation { iteration, completed: completed.to_vec() })?;
            }
        }
        let done: BTreeSet<u64> = completed.iter().copied().collect();
        let share = self.nodes[&at].params.share(&done);
        let agg = self.node(at).agg.entry(iteration).or_default();
        agg.began = true;
        agg.shares.insert(at, share.clone());
        for peer in self.group(at) {
            if peer != at {
                self.send(at, peer, Message::GradientShare { iteration, vector: share.clone() })?;
            }
        }
        let hop = self.topology.max_latency() + self.topology.activation_size / self.topology.min_bandwidth();
        self.arm(at, self.recovery.k * 2.0 * hop, Wait::Shares { iteration });
        self.try_apply(at, iteration)
    }

    fn try_apply(&mut self, at: NodeId, iteration: u32) -> Result<(), SimError> {
        let group = self.group(at);
        let ready = self.nodes[&at]
            .agg
            .get(&iteration)
            .is_some_and(|a| a.began && !a.applied && group.iter().all(|g| a.shares.contains_key(g)));
        if ready {
            self.apply_aggregation(at, iteration)?;
        }
        Ok(())
    }

    /// Averages the shares received so far (all members, or the ones that answered
    /// before the wait ran out) and moves on to CAN TAKE.
    fn apply_aggregation(&mut self, at: NodeId, iteration: u32) -> Result<(), SimError> {
        let eta = self.cfg.eta;
        let node = self.node(at);
        let Some(agg) = node.agg.get_mut(&iteration) else {
            return Ok(());
        };
        if agg.applied || !agg.began {
            return Ok(());
        }
        agg.applied = true;
        let shares = std::mem::take(&mut agg.shares);
        node.params.apply(&shares, eta);
        node.aggregated_through = Some(iteration);
        if let Some(c) = node.can_take.get_mut(&iteration) {
            c.aggregated = true;
        }
        if self.is_data(at) {
            let time = self.engine.now();
            self.record(Record::Update { iteration, node: at, time });
        }
        if let Some(joiners) = self.pending_sync.remove(&at) {
            for j in joiners {
                let snapshot = self.nodes[&at].params.snapshot();
                if let Some(n) = self.nodes.get_mut(&j) {
                    n.params = snapshot;
                    n.synced = true;
                }
                self.replay(j)?;
            }
        }
        self.check_can_take(at, iteration)?;
        self.replay(at)
    }

    fn replay(&mut self, at: NodeId) -> Result<(), SimError> {
        let inbox = std::mem::take(&mut self.node(at).inbox);
        for (from, msg) in inbox {
            self.on_message(at, from, msg)?;
        }
        Ok(())
    }

    fn check_can_take(&mut self, at: NodeId, iteration: u32) -> Result<(), SimError> {
        let fire = self.node(at).can_take.get_mut(&iteration).is_some_and(|c| c.ready());
        if !fire {
            return Ok(());
        }
        if self.is_data(at) {
            if iteration == self.iteration {
                self.ready.insert(at);
            }
            return Ok(());
        }
        for n in self.upstream_group(at) {
            self.send(at, n, Message::CanTake { iteration })?;
        }
        Ok(())
    }
}

/// Builds the training world for `seed` and runs all configured iterations.
pub fn run_training(cfg: &TrainingSection, protocol: &ProtocolParams, seed: u64, net: NetConfig) -> TrainingRun {
    World::new(cfg, protocol, seed, net).run()
}

/// A crash placed by hand: the relay of `stage` carrying `batch` fails as the batch's
/// gradient reaches it, before it can compute its backward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedCrash {
    pub batch: u64,
    pub stage: StageId,
}

/// As [`run_training`], with scripted crashes on top of the configured churn.
pub fn run_training_scripted(
    cfg: &TrainingSection,
    protocol: &ProtocolParams,
    seed: u64,
    net: NetConfig,
    crashes: &[ScriptedCrash],
) -> TrainingRun {
    let mut w = World::new(cfg, protocol, seed, net);
    w.scripted = crashes.to_vec();
    w.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Dist;

    pub(crate) fn churn_section(caps: Dist, churn: f64, recovery: RecoveryMode) -> TrainingSection {
        TrainingSection {
            stages: 5,
            relays: 16,
            data_nodes: 2,
            microbatches: 4,
            capacity: caps,
            latency: Dist::Uniform { lo: 5.0, hi: 50.0 },
            bandwidth: Dist::Uniform { lo: 50.0, hi: 500.0 },
            compute: Dist::Const { value: 10.0 },
            activation_size: 100.0,
            churn,
            iterations: 6,
            routing: Routing::Gwtf,
            recovery,
            k: 3.0,
            gamma: 0.5,
            eta: 0.1,
            deadline_factor: 10.0,
        }
    }

    #[test]
    fn batch_ids_round_trip() {
        let b = batch_id(7, NodeId(1), 3);
        assert_eq!(batch_iteration(b), 7);
        assert_ne!(b, batch_id(7, NodeId(0), 3));
    }

    #[test]
    fn crash_free_run_completes_everything() {
        let t = churn_section(Dist::Const { value: 4.0 }, 0.0, RecoveryMode::Gwtf);
        let run = run_training(&t, &ProtocolParams::default(), 3, NetConfig::default());
        assert_eq!(run.report.failure, None);
        assert_eq!(run.report.iterations.len(), 6);
        for m in &run.report.iterations {
            assert_eq!(m.completed, 8, "{m:?}");
            assert_eq!(m.wasted_compute, 0.0);
            assert_eq!(m.param_mismatches, 0);
            assert!(m.time_per_microbatch.unwrap() > 0.0);
        }
    }

    #[test]
    fn churn_run_accounts_for_every_microbatch() {
        for mode in [RecoveryMode::Gwtf, RecoveryMode::PipelineRestart] {
            let t = churn_section(Dist::FloorUniform { lo: 1.0, hi: 4.0 }, 0.2, mode);
            let run = run_training(&t, &ProtocolParams::default(), 5, NetConfig::default());
            assert_eq!(run.report.failure, None);
            for m in &run.report.iterations {
                assert_eq!(m.emitted, m.completed + m.deferred + m.abandoned, "{m:?}");
                assert_eq!(m.param_mismatches, 0, "{m:?}");
            }
        }
    }
}
