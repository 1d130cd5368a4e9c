//! Operator API: the commands behind the HTTP endpoints and `comctl`.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::Fedlet;
use crate::fedcore::{FedcoreError, Principal};
use crate::fedctl::{AclRule, FedctlError, MemberStatus, Permission, ShareStatus};
use crate::identity::{FedId, TokenValue};
use crate::transport::{Envelope, MsgType, TransportError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ApiRequest {
    /// Communities this fedlet belongs to or has asked to join.
    List,
    Members,
    Requests,
    Status,
    Incidents,
    Join {
        community: FedId,
    },
    Leave {
        community: FedId,
    },
    /// Grant `data` patterns; no patterns pauses, `revoke` revokes.
    Share {
        community: FedId,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        data: Vec<String>,
        #[serde(default)]
        revoke: bool,
        #[serde(default)]
        aggregate_only: bool,
    },
    Approve {
        member: FedId,
    },
    Deny {
        member: FedId,
    },
    /// Read an object as community `requester` presenting `token`.
    ReadObject {
        object_id: String,
        requester: FedId,
        token: TokenValue,
    },
}

impl ApiRequest {
    pub fn is_mutation(&self) -> bool {
        matches!(
            self,
            ApiRequest::Join { .. }
                | ApiRequest::Leave { .. }
                | ApiRequest::Share { .. }
                | ApiRequest::Approve { .. }
                | ApiRequest::Deny { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorClass {
    Usage,
    Connection,
    InvalidArgument,
    Validation,
    NotFound,
    Denied,
    Auth,
    AlreadyMember,
    DeliveryFailure,
    Internal,
}

impl ErrorClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Connection => "connection",
            ErrorClass::InvalidArgument => "invalid-argument",
            ErrorClass::Validation => "validation",
            ErrorClass::NotFound => "not-found",
            ErrorClass::Denied => "denied",
            ErrorClass::Auth => "auth",
            ErrorClass::AlreadyMember => "already-member",
            ErrorClass::DeliveryFailure => "delivery-failure",
            ErrorClass::Internal => "internal",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ErrorClass::Usage | ErrorClass::InvalidArgument => 400,
            ErrorClass::Auth => 401,
            ErrorClass::Denied => 403,
            ErrorClass::NotFound => 404,
            ErrorClass::AlreadyMember => 409,
            ErrorClass::Validation => 422,
            ErrorClass::DeliveryFailure | ErrorClass::Connection => 502,
            ErrorClass::Internal => 500,
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serialized as `{"error": {"class", "message"}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub class: ErrorClass,
    pub message: String,
}

impl ApiError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        ApiError {
            class,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> Json {
        json!({ "error": self })
    }

    pub fn from_json(v: &Json) -> Option<ApiError> {
        serde_json::from_value(v.get("error")?.clone()).ok()
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.class, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<FedctlError> for ApiError {
    fn from(e: FedctlError) -> Self {
        let class = match &e {
            FedctlError::InvalidArgument(_) | FedctlError::Identity(_) => ErrorClass::InvalidArgument,
            FedctlError::NotFound(_) | FedctlError::NotHosting => ErrorClass::NotFound,
            FedctlError::AlreadyMember(_) => ErrorClass::AlreadyMember,
            FedctlError::DeliveryFailure(_) => ErrorClass::DeliveryFailure,
            FedctlError::Auth(_) => ErrorClass::Auth,
            FedctlError::InvalidTransition { .. } => ErrorClass::Validation,
            FedctlError::Transport(TransportError::NotFound(_)) => ErrorClass::NotFound,
            FedctlError::Transport(TransportError::DeliveryFailure(_)) => ErrorClass::DeliveryFailure,
            FedctlError::Transport(_) => ErrorClass::InvalidArgument,
            FedctlError::Io(_) => ErrorClass::Internal,
        };
        ApiError::new(class, e.to_string())
    }
}

impl From<FedcoreError> for ApiError {
    fn from(e: FedcoreError) -> Self {
        let class = match &e {
            FedcoreError::InvalidArgument(_) => ErrorClass::InvalidArgument,
            FedcoreError::NotFound(_) => ErrorClass::NotFound,
            FedcoreError::AccessDenied(_) => ErrorClass::Denied,
            FedcoreError::Io(_) => ErrorClass::Internal,
        };
        ApiError::new(class, e.to_string())
    }
}

fn to_json<T: Serialize>(v: &T) -> Json {
    serde_json::to_value(v).expect("api types serialize")
}

impl Fedlet {
    /// Authenticate an operator command signed with the host key, then run it.
    pub fn control(&mut self, env: &Envelope, now_ms: u64) -> Result<Json, ApiError> {
        if env.msg_type != MsgType::Control {
            return Err(ApiError::new(ErrorClass::InvalidArgument, "expected a control envelope"));
        }
        if &env.from != self.host_id() {
            return Err(ApiError::new(
                ErrorClass::Auth,
                format!("control commands must come from {}", self.host_id()),
            ));
        }
        let key = self.fedctl.keyring().host_key().public_key();
        self.guard
            .admit_with_key(env, &key)
            .map_err(|r| ApiError::new(ErrorClass::Auth, r.to_string()))?;
        let req: ApiRequest = env
            .decode()
            .map_err(|e| ApiError::new(ErrorClass::InvalidArgument, e.to_string()))?;
        self.api(req, now_ms)
    }

    /// Run one operator command. Reads need no signature; see [`Fedlet::control`].
    pub fn api(&mut self, req: ApiRequest, now_ms: u64) -> Result<Json, ApiError> {
        let now = now_ms / 1000;
        let out = match req {
            ApiRequest::List => Ok(self.list_json()),
            ApiRequest::Members => Ok(self.members_json()),
            ApiRequest::Requests => Ok(Json::Array(
                self.fedctl
                    .queued_requests()
                    .map(|q| {
                        json!({
                            "member_id": q.request.requester,
                            "name": q.request.requester_name,
                            "address": q.request.requester_address,
                            "received_at": q.received_at,
                        })
                    })
                    .collect(),
            )),
            ApiRequest::Status => Ok(self.status_json(now_ms)),
            ApiRequest::Incidents => Ok(to_json(&self.fedctl.incidents())),
            ApiRequest::Join { community } => {
                let directory = self.directory.clone();
                let mut dir = directory.write().expect("directory lock");
                let address = dir
                    .lookup(&community)
                    .map(|e| e.address.clone())
                    .ok_or_else(|| ApiError::new(ErrorClass::DeliveryFailure, format!("cannot resolve {community}")))?;
                self.fedctl
                    .request_join(&community, &address, &mut dir, now)
                    .map(|p| json!({"community_id": p.community_id, "member_fed_id": p.member_fed_id, "status": "pending"}))
                    .map_err(ApiError::from)
            }
            ApiRequest::Leave { community } => self
                .fedctl
                .leave(&community, now)
                .map(|()| json!({"community_id": community, "status": "left"}))
                .map_err(ApiError::from),
            ApiRequest::Share {
                community,
                data,
                revoke,
                aggregate_only,
            } => self.share(&community, data, revoke, aggregate_only, now),
            ApiRequest::Approve { member } => self
                .fedctl
                .approve_join(&member, now)
                .map(|m| to_json(&m))
                .map_err(ApiError::from),
            ApiRequest::Deny { member } => self
                .fedctl
                .deny_join(&member, now)
                .map(|()| json!({"member_id": member, "status": "denied"}))
                .map_err(ApiError::from),
            ApiRequest::ReadObject {
                object_id,
                requester,
                token,
            } => {
                let principal = Principal::Community {
                    community_id: requester,
                    token,
                };
                self.fedcore
                    .get_object(&object_id, &principal, &mut self.fedctl, now_ms)
                    .map(|s| to_json(&s))
                    .map_err(ApiError::from)
            }
        };
        self.settle(now_ms);
        out
    }

    fn share(
        &mut self,
        community: &FedId,
        data: Vec<String>,
        revoke: bool,
        aggregate_only: bool,
        now: u64,
    ) -> Result<Json, ApiError> {
        let entry = self
            .fedctl
            .community(community)
            .ok_or_else(|| ApiError::new(ErrorClass::NotFound, format!("community {community}")))?;
        let status = entry.share_status;
        if revoke && !data.is_empty() {
            let drop: Vec<AclRule> = data
                .iter()
                .map(|d| AclRule::new(d, Permission::None))
                .collect::<Result<_, _>>()?;
            let rules = entry
                .role
                .acl
                .iter()
                .filter(|r| !drop.iter().any(|d| d.pattern == r.pattern))
                .cloned()
                .collect();
            self.fedctl.set_acl(community, rules)?;
        } else if revoke {
            self.fedctl.set_share_status(community, ShareStatus::Revoked, now)?;
        } else if data.is_empty() {
            self.fedctl.set_share_status(community, ShareStatus::Paused, now)?;
        } else {
            let permission = if aggregate_only {
                Permission::AggregateOnly
            } else {
                Permission::Read
            };
            let added: Vec<AclRule> = data
                .iter()
                .map(|d| AclRule::new(d, permission))
                .collect::<Result<_, _>>()?;
            let mut rules: Vec<AclRule> = entry
                .role
                .acl
                .iter()
                .filter(|r| !added.iter().any(|a| a.pattern == r.pattern))
                .cloned()
                .collect();
            rules.extend(added);
            self.fedctl.set_acl(community, rules)?;
            if status == ShareStatus::Paused {
                self.fedctl.set_share_status(community, ShareStatus::Active, now)?;
            }
        }
        let entry = self.fedctl.community(community).expect("checked above");
        Ok(json!({
            "community_id": community,
            "share_status": entry.share_status,
            "acl": entry.role.acl,
        }))
    }

    fn list_json(&self) -> Json {
        let mut rows: Vec<Json> = self
            .fedctl
            .communities()
            .map(|c| {
                json!({
                    "community_id": c.community_id,
                    "name": c.name,
                    "address": c.address,
                    "status": c.share_status,
                    "member_fed_id": c.member_fed_id,
                    "acl": c.role.acl,
                    "token_expires_at": c.issued_token.expires_at,
                })
            })
            .collect();
        rows.extend(self.fedctl.outstanding().map(|p| {
            json!({
                "community_id": p.community_id,
                "address": p.community_address,
                "status": "pending",
                "member_fed_id": p.member_fed_id,
            })
        }));
        rows.extend(
            self.fedctl
                .denials()
                .filter(|c| self.fedctl.community(c).is_none() && !self.fedctl.outstanding().any(|p| &p.community_id == *c))
                .map(|c| json!({"community_id": c, "status": "denied"})),
        );
        rows.sort_by(|a, b| a["community_id"].as_str().cmp(&b["community_id"].as_str()));
        Json::Array(rows)
    }

    fn members_json(&self) -> Json {
        Json::Array(
            self.fedctl
                .members()
                .map(|m| {
                    json!({
                        "member_id": m.member_id,
                        "name": m.name,
                        "address": m.address,
                        "status": m.status,
                        "joined_at": m.joined_at,
                        "token_expires_at": m.received_token.as_ref().map(|t| t.expires_at),
                    })
                })
                .collect(),
        )
    }

    fn status_json(&self, now_ms: u64) -> Json {
        let count = |s: MemberStatus| self.fedctl.members().filter(|m| m.status == s).count();
        let (replayed, forged) = self.replay_stats();
        json!({
            "host_id": self.host_id(),
            "address": self.address(),
            "now_ms": now_ms,
            "hosting": self.fedctl.hosted().map(|h| json!({"community_id": h.community_id, "name": h.name})),
            "members": {
                "pending": count(MemberStatus::Pending),
                "active": count(MemberStatus::Active),
                "stale": count(MemberStatus::Stale),
                "left": count(MemberStatus::Left),
            },
            "communities": self.fedctl.communities().count(),
            "queued_requests": self.fedctl.queued_requests().count(),
            "apps": self.fedcore.registrations().collect::<Vec<_>>(),
            "rounds": self
                .fedcore
                .registrations()
                .flat_map(|r| r.rounds.iter())
                .filter_map(|a| self.fedcore.round_status(a))
                .collect::<Vec<_>>(),
            "bindings": self.fedcore.bindings().collect::<Vec<_>>(),
            "incidents": self.fedctl.incidents().len(),
            "dropped_envelopes": self.dropped.len(),
            "replayed": replayed,
            "forged": forged,
        })
    }
}
