//! Deterministic discrete-event engine.
//!
//! A single clock and a priority queue ordered by `(time, sequence)`. Node logic lives
//! elsewhere; it is driven by the events popped here and schedules new ones through
//! [`Engine::send`], [`Engine::set_timer`] and [`Engine::schedule`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{NodeId, Topology};
use crate::message::Message;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no link {0} -> {1}")]
    MissingLink(NodeId, NodeId),
    #[error("event queue exceeded {limit} entries at t={time}")]
    EventStorm { limit: usize, time: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
        size: f64,
        sent_at: f64,
    },
    ComputeDone {
        node: NodeId,
        batch: u64,
        tag: u64,
    },
    Crash(NodeId),
    Join(NodeId),
    TimerFire {
        node: NodeId,
        timer: u64,
    },
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Deliver { .. } => "deliver",
            EventKind::ComputeDone { .. } => "compute",
            EventKind::Crash(_) => "crash",
            EventKind::Join(_) => "join",
            EventKind::TimerFire { .. } => "timer",
        }
    }

    /// The node whose volatile state the event targets, if any.
    fn target(&self) -> Option<NodeId> {
        match self {
            EventKind::Deliver { to, .. } => Some(*to),
            EventKind::ComputeDone { node, .. } | EventKind::TimerFire { node, .. } => Some(*node),
            EventKind::Crash(_) | EventKind::Join(_) => None,
        }
    }

    fn summary(&self) -> String {
        match self {
            EventKind::Deliver { from, to, msg, .. } => format!("{from}->{to} {msg:?}"),
            EventKind::ComputeDone { node, batch, tag } => format!("{node} batch={batch} tag={tag}"),
            EventKind::Crash(n) | EventKind::Join(n) => n.to_string(),
            EventKind::TimerFire { node, timer } => format!("{node} timer={timer}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

struct Queued {
    event: Event,
    /// Incarnation of the target node when the event was scheduled.
    incarnation: u32,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .event
            .time
            .total_cmp(&self.event.time)
            .then_with(|| other.event.seq.cmp(&self.event.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Caps every link latency at this value.
    pub latency_bound: Option<f64>,
    /// Serialize transfers on each directed link.
    pub congestion: bool,
    pub max_queue: usize,
    /// Keep every trace line in memory (the hash is always maintained).
    pub keep_trace: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latency_bound: None,
            congestion: false,
            max_queue: 1_000_000,
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub summary: String,
    /// `(sent_at, size)` for deliveries.
    pub transit: Option<(f64, f64)>,
    pub dropped: bool,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        let kind = if self.dropped { "drop" } else { self.kind };
        format!("{:.6}\t{}\t{}\t{}", self.time, self.seq, kind, self.summary)
    }
}

pub struct Engine {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Queued>,
    config: NetConfig,
    crashed: BTreeSet<NodeId>,
    incarnation: BTreeMap<NodeId, u32>,
    link_free: BTreeMap<(NodeId, NodeId), f64>,
    trace: Vec<TraceRecord>,
    hasher: Sha256,
    executed: u64,
    sent: BTreeMap<&'static str, u64>,
    storm: Option<SimError>,
}

impl Engine {
    pub fn new(config: NetConfig) -> Self {
        Engine {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            config,
            crashed: BTreeSet::new(),
            incarnation: BTreeMap::new(),
            link_free: BTreeMap::new(),
            trace: Vec::new(),
            hasher: Sha256::new(),
            executed: 0,
            sent: BTreeMap::new(),
            storm: None,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn is_crashed(&self, node: NodeId) -> bool {
        self.crashed.contains(&node)
    }

    /// Messages sent so far, by message kind.
    pub fn sent_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.sent
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.values().sum()
    }

    pub fn schedule(&mut self, at: f64, kind: EventKind) -> u64 {
        debug_assert!(at >= self.now, "event scheduled in the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        let incarnation = kind
            .target()
            .map(|n| self.incarnation.get(&n).copied().unwrap_or(0))
            .unwrap_or(0);
        self.queue.push(Queued {
            event: Event {
                time: at.max(self.now),
                seq,
                kind,
            },
            incarnation,
        });
        if self.queue.len() > self.config.max_queue && self.storm.is_none() {
            self.storm = Some(SimError::EventStorm {
                limit: self.config.max_queue,
                time: self.now,
            });
        }
        seq
    }

    pub fn set_timer(&mut self, node: NodeId, delay: f64, timer: u64) -> u64 {
        self.schedule(self.now + delay, EventKind::TimerFire { node, timer })
    }

    pub fn compute(&mut self, node: NodeId, duration: f64, batch: u64, tag: u64) -> u64 {
        self.schedule(self.now + duration, EventKind::ComputeDone { node, batch, tag })
    }

    /// Transit delay of `size` units over `from -> to` under this configuration,
    /// ignoring congestion.
    pub fn delay(&self, topology: &Topology, from: NodeId, to: NodeId, size: f64) -> Result<f64, SimError> {
        let link = topology.link(from, to).ok_or(SimError::MissingLink(from, to))?;
        let latency = match self.config.latency_bound {
            Some(bound) => link.latency.min(bound),
            None => link.latency,
        };
        Ok(latency + size / link.bandwidth)
    }

    /// Schedules delivery of `msg`; returns the delivery time.
    pub fn send(
        &mut self,
        topology: &Topology,
        from: NodeId,
        to: NodeId,
        msg: Message,
        size: f64,
    ) -> Result<f64, SimError> {
        let delay = self.delay(topology, from, to, size)?;
        let at = if self.config.congestion {
            let link = topology.link(from, to).ok_or(SimError::MissingLink(from, to))?;
            let transfer = size / link.bandwidth;
            let free = self.link_free.entry((from, to)).or_insert(0.0);
            let start = free.max(self.now);
            *free = start + transfer;
            start + delay
        } else {
            self.now + delay
        };
        *self.sent.entry(msg.kind()).or_insert(0) += 1;
        self.schedule(
            at,
            EventKind::Deliver {
                from,
                to,
                msg,
                size,
                sent_at: self.now,
            },
        );
        Ok(at)
    }

    /// Marks a node crashed immediately (outside the event queue).
    pub fn crash_now(&mut self, node: NodeId) {
        if self.crashed.insert(node) {
            *self.incarnation.entry(node).or_insert(0) += 1;
        }
    }

    pub fn revive_now(&mut self, node: NodeId) {
        self.crashed.remove(&node);
    }

    /// Pops the next live event, advancing the clock. Events aimed at crashed nodes,
    /// or at an earlier incarnation of a node, are traced as drops and skipped.
    pub fn pop(&mut self) -> Result<Option<Event>, SimError> {
        if let Some(err) = self.storm.take() {
            return Err(err);
        }
        while let Some(Queued { event, incarnation }) = self.queue.pop() {
            self.now = event.time;
            self.executed += 1;
            let dropped = match event.kind.target() {
                Some(n) => {
                    self.crashed.contains(&n)
                        || self.incarnation.get(&n).copied().unwrap_or(0) != incarnation
                }
                None => false,
            };
            match event.kind {
                EventKind::Crash(n) => self.crash_now(n),
                EventKind::Join(n) => self.revive_now(n),
                _ => {}
            }
            self.record(&event, dropped);
            if !dropped {
                return Ok(Some(event));
            }
        }
        Ok(None)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|q| q.event.time)
    }

    /// Executes events through `handler` until `stop` holds, the queue drains, or the
    /// next event lies beyond `time_limit`.
    pub fn run_until<H, S>(&mut self, time_limit: f64, mut stop: S, mut handler: H) -> Result<(), SimError>
    where
        H: FnMut(&mut Engine, Event),
        S: FnMut(&Engine) -> bool,
    {
        loop {
            if stop(self) {
                return Ok(());
            }
            match self.peek_time() {
                Some(t) if t <= time_limit => {}
                _ => return Ok(()),
            }
            match self.pop()? {
                Some(ev) => handler(self, ev),
                None => return Ok(()),
            }
        }
    }

    fn record(&mut self, event: &Event, dropped: bool) {
        let transit = match &event.kind {
            EventKind::Deliver { sent_at, size, .. } => Some((*sent_at, *size)),
            _ => None,
        };
        let rec = TraceRecord {
            time: event.time,
            seq: event.seq,
            kind: event.kind.label(),
            summary: event.kind.summary(),
            transit,
            dropped,
        };
        let line = rec.line();
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        if self.config.keep_trace {
            self.trace.push(rec);
        }
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&r.line());
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 over every executed event line.
    pub fn trace_hash(&self) -> String {
        hex(&self.hasher.clone().finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named, independent random substreams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        self.derive(name, None)
    }

    pub fn node_stream(&self, name: &str, node: NodeId) -> ChaCha8Rng {
        self.derive(name, Some(node.0))
    }

    fn derive(&self, name: &str, index: Option<u32>) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        if let Some(i) = index {
            h.update(b"#");
            h.update(i.to_le_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChurnPlan {
    pub crashes: Vec<(NodeId, f64)>,
    pub rejoins: Vec<NodeId>,
}

impl ChurnPlan {
    pub fn is_empty(&self) -> bool {
        self.crashes.is_empty() && self.rejoins.is_empty()
    }
}

/// Draws this iteration's churn. `relays` pairs each relay with its liveness.
/// Alive relays crash with probability `p` at a uniform time in
/// `[start, start + horizon)`; crashed relays rejoin with probability `p` at `start`.
/// Two draws are consumed per relay regardless of `p`.
pub fn inject_churn(p: f64, relays: &[(NodeId, bool)], rng: &mut impl Rng, start: f64, horizon: f64) -> ChurnPlan {
    debug_assert!((0.0..=1.0).contains(&p));
    let mut plan = ChurnPlan::default();
    let mut sorted = relays.to_vec();
    sorted.sort_by_key(|(n, _)| *n);
    for (node, alive) in sorted {
        let u: f64 = rng.gen();
        let t: f64 = rng.gen();
        if u < p {
            if alive {
                plan.crashes.push((node, start + t * horizon));
            } else {
                plan.rejoins.push(node);
            }
        }
    }
    plan
}
