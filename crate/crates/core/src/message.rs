//! The closed catalog of messages exchanged between nodes.

use serde::{Deserialize, Serialize};

use crate::domain::{NodeId, StageId};
use crate::protocol::{FlowId, Hop};

/// An outgoing edge as seen by its owner: the hop id, the downstream peer and the
/// downstream record's cost to the sink.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeRef {
    pub owner: NodeId,
    pub hop: FlowId,
    pub peer: NodeId,
    pub sink: NodeId,
    pub downstream_cost: f64,
}

/// A relayed flow `upstream -> owner -> downstream` advertised through stage gossip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub upstream: NodeId,
    pub in_hop: FlowId,
    pub owner: NodeId,
    pub downstream: NodeId,
    pub out_hop: FlowId,
    pub sink: NodeId,
    /// Cost to sink of the downstream record.
    pub downstream_cost: f64,
}

/// One outgoing record of the gossiping node, with the edge costs on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GossipEdge {
    pub upstream: Option<Hop>,
    pub downstream: Hop,
    pub sink: NodeId,
    pub cost_in: Option<f64>,
    pub cost_out: f64,
    pub downstream_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationEntry {
    pub node: NodeId,
    pub stage: StageId,
    pub capacity: u32,
    pub flows: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    // Flow construction.
    RequestFlow {
        sink: NodeId,
        expected_cost: f64,
        hop: FlowId,
    },
    Approve {
        hop: FlowId,
        sink: NodeId,
        cost: f64,
    },
    Reject {
        hop: FlowId,
        sink: NodeId,
        current_cost: f64,
    },
    RequestChange {
        my_edge: EdgeRef,
        your_edge: EdgeRef,
        claimed_gain: f64,
    },
    ChangeAccept {
        my_edge: EdgeRef,
        your_edge: EdgeRef,
    },
    ChangeDecline,
    RequestRedirect {
        segment: Segment,
        claimed_gain: f64,
    },
    RedirectAccept {
        segment: Segment,
    },
    RedirectDecline,
    CostBroadcast {
        sink: NodeId,
        cost: f64,
    },
    StageGossip {
        edges: Vec<GossipEdge>,
        /// The sender's edge cost to each next-stage node.
        next_costs: Vec<(NodeId, f64)>,
    },
    /// The record reached through `hop` now has `upstream` as its sender.
    NewUpstream {
        hop: FlowId,
        upstream: NodeId,
    },
    /// The edge `hop` of the recipient now ends at `downstream`, whose record costs `cost`.
    NewDownstream {
        hop: FlowId,
        downstream: NodeId,
        cost: f64,
    },
    /// The record reached through `hop` now costs `cost` to its sink.
    CostUpdate {
        hop: FlowId,
        cost: f64,
    },

    // Crash handling.
    Complete {
        batch: u64,
    },
    Deny {
        batch: u64,
    },
    Ping {
        nonce: u64,
        batch: u64,
    },
    Pong {
        nonce: u64,
    },
    CapacityFreed,
    BackwardFailure {
        batch: u64,
    },

    // Membership.
    Join {
        capacity: u32,
    },
    Admit {
        stage: StageId,
        digest: u64,
    },
    UtilizationQuery {
        query_id: u64,
        entries: Vec<UtilizationEntry>,
    },
    UtilizationReply {
        query_id: u64,
        entries: Vec<UtilizationEntry>,
    },

    // Iteration lifecycle.
    /// Carries the microbatches whose gradients enter this iteration's average.
    BeginAggregation {
        iteration: u32,
        completed: Vec<u64>,
    },
    CanTake {
        iteration: u32,
    },
    GradientShare {
        iteration: u32,
        vector: Vec<f64>,
    },
    IterationDone {
        iteration: u32,
        completed: Vec<u64>,
    },
    /// `path` is the planned route `[data, relay.., data]`; the receiver sits at the
    /// index of its stage plus one.
    Activation {
        batch: u64,
        path: Vec<NodeId>,
        repair: bool,
    },
    Gradient {
        batch: u64,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::RequestFlow { .. } => "REQUEST_FLOW",
            Message::Approve { .. } => "APPROVE",
            Message::Reject { .. } => "REJECT",
            Message::RequestChange { .. } => "REQUEST_CHANGE",
            Message::ChangeAccept { .. } => "CHANGE_ACCEPT",
            Message::ChangeDecline => "CHANGE_DECLINE",
            Message::RequestRedirect { .. } => "REQUEST_REDIRECT",
            Message::RedirectAccept { .. } => "REDIRECT_ACCEPT",
            Message::RedirectDecline => "REDIRECT_DECLINE",
            Message::CostBroadcast { .. } => "COST_BROADCAST",
            Message::StageGossip { .. } => "STAGE_GOSSIP",
            Message::NewUpstream { .. } => "NEW_UPSTREAM",
            Message::NewDownstream { .. } => "NEW_DOWNSTREAM",
            Message::CostUpdate { .. } => "COST_UPDATE",
            Message::Complete { .. } => "COMPLETE",
            Message::Deny { .. } => "DENY",
            Message::Ping { .. } => "PING",
            Message::Pong { .. } => "PONG",
            Message::CapacityFreed => "CAPACITY_FREED",
            Message::BackwardFailure { .. } => "BACKWARD_FAILURE",
            Message::Join { .. } => "JOIN",
            Message::Admit { .. } => "ADMIT",
            Message::UtilizationQuery { .. } => "UTILIZATION_QUERY",
            Message::UtilizationReply { .. } => "UTILIZATION_REPLY",
            Message::BeginAggregation { .. } => "BEGIN_AGGREGATION",
            Message::CanTake { .. } => "CAN_TAKE",
            Message::GradientShare { .. } => "GRADIENT_SHARE",
            Message::IterationDone { .. } => "ITERATION_DONE",
            Message::Activation { .. } => "ACTIVATION",
            Message::Gradient { .. } => "GRADIENT",
        }
    }

    /// Whether the message carries an activation or gradient payload.
    pub fn is_payload(&self) -> bool {
        matches!(self, Message::Activation { .. } | Message::Gradient { .. })
    }
}
