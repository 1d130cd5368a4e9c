//! Data-plane payloads carried inside envelopes.

use serde::{Deserialize, Serialize};

use super::object::{ObjectSnapshot, Value};
use super::toolkit::Payload;
use super::view::{Condition, ViewTransform};
use crate::identity::{FedId, TokenValue};

/// Body of a `data-request` envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataRequest {
    /// A community reads a member object (token required), or a member reads a community object.
    ObjectRead {
        request_id: u64,
        object_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        since_version: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<TokenValue>,
    },
    /// The community asks a member for its view partials.
    ViewPartial {
        request_id: u64,
        view_id: String,
        source_refs: Vec<String>,
        filter: Vec<Condition>,
        transform: ViewTransform,
        token: TokenValue,
    },
}

/// Body of a `sync` envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyncMessage {
    Snapshot { request_id: u64, snapshot: ObjectSnapshot },
    Unchanged { request_id: u64, object_id: String, version: u64 },
    Partial { request_id: u64, view_id: String, partials: Vec<Vec<f64>> },
    Denied {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<u64>,
        target: String,
        reason: String,
    },
}

/// Contribution must carry `entry == value` to be pushed into the round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundGuard {
    pub entry: String,
    pub value: Value,
}

/// Body of a `notify` envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NotifyMessage {
    RoundOpen(RoundOpen),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOpen {
    pub aggregate: String,
    pub round: u64,
    pub attempt: u32,
    pub participants: Vec<FedId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<RoundGuard>,
}

/// Body of an `aggregate-contribution` envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub aggregate: String,
    pub round: u64,
    pub attempt: u32,
    pub payload: Payload,
}
