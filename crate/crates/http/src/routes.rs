//! Route table shared by the fedlet server and the simulation gateway.

use std::collections::BTreeMap;

use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use comverse_core::fedlet::{ApiError, ApiRequest, ErrorClass, Fedlet, FedletError};
use comverse_core::identity::{FedId, TokenValue};
use comverse_core::transport::{Envelope, MsgType};
use serde_json::{json, Value};

/// A parsed HTTP request.
#[derive(Debug)]
pub enum Call {
    /// Unauthenticated read.
    Read(ApiRequest),
    /// Operator command signed with the fedlet's own key.
    Control(Envelope),
    /// Message from another fedlet.
    Peer(Envelope),
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError::new(ErrorClass::InvalidArgument, msg)
}

fn not_found(method: &Method, path: &str) -> ApiError {
    ApiError::new(ErrorClass::NotFound, format!("no route {method} {path}"))
}

fn fed_id(s: &str) -> Result<FedId, ApiError> {
    FedId::new(s).map_err(|e| bad(e.to_string()))
}

pub fn parse(method: &Method, path: &str, query: &BTreeMap<String, String>, body: &[u8]) -> Result<Call, ApiError> {
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    if *method == Method::GET {
        let req = match segs.as_slice() {
            ["communities"] => ApiRequest::List,
            ["members"] => ApiRequest::Members,
            ["requests"] => ApiRequest::Requests,
            ["status"] => ApiRequest::Status,
            ["incidents"] => ApiRequest::Incidents,
            ["object", rest @ ..] if !rest.is_empty() => {
                let requester = query.get("requester").ok_or_else(|| bad("requester query parameter missing"))?;
                let token = query.get("token").ok_or_else(|| bad("token query parameter missing"))?;
                ApiRequest::ReadObject {
                    object_id: rest.join("/"),
                    requester: fed_id(requester)?,
                    token: TokenValue::from_hex(token).map_err(|e| bad(e.to_string()))?,
                }
            }
            _ => return Err(not_found(method, path)),
        };
        return Ok(Call::Read(req));
    }
    if *method != Method::POST {
        return Err(not_found(method, path));
    }
    let known = matches!(
        segs.as_slice(),
        ["control" | "join" | "leave" | "share" | "token" | "data-request" | "sync" | "aggregate-contribution"]
            | ["requests", _, "approve" | "deny"]
    );
    if !known {
        return Err(not_found(method, path));
    }
    let env: Envelope = serde_json::from_slice(body).map_err(|e| bad(format!("envelope: {e}")))?;
    if env.msg_type != MsgType::Control {
        if env.msg_type.route() != path {
            return Err(bad(format!("{} travels on {}, not {path}", env.msg_type, env.msg_type.route())));
        }
        return Ok(Call::Peer(env));
    }
    let req: ApiRequest = env.decode().map_err(|e| bad(e.to_string()))?;
    let fits = match (segs.as_slice(), &req) {
        (["control"], _) => true,
        (["join"], ApiRequest::Join { .. }) => true,
        (["leave"], ApiRequest::Leave { .. }) => true,
        (["share"], ApiRequest::Share { .. }) => true,
        (["requests", id, "approve"], ApiRequest::Approve { member }) => member.as_str() == *id,
        (["requests", id, "deny"], ApiRequest::Deny { member }) => member.as_str() == *id,
        _ => false,
    };
    if !fits {
        return Err(bad(format!("command does not match route {path}")));
    }
    Ok(Call::Control(env))
}

pub fn fedlet_error(e: FedletError) -> ApiError {
    let class = match &e {
        FedletError::Rejected(_) => ErrorClass::Auth,
        FedletError::Misaddressed(_) => ErrorClass::NotFound,
        FedletError::Handler(_) | FedletError::AppSpec(_) => ErrorClass::Validation,
        FedletError::Transport(_) => ErrorClass::InvalidArgument,
        FedletError::Io(_) => ErrorClass::Internal,
    };
    ApiError::new(class, e.to_string())
}

/// Apply a call to a fedlet. Peer messages answer `202` once applied.
pub fn execute(call: Call, fedlet: &mut Fedlet, now_ms: u64) -> Result<(StatusCode, Value), ApiError> {
    match call {
        Call::Read(req) => fedlet.api(req, now_ms).map(|v| (StatusCode::OK, v)),
        Call::Control(env) => fedlet.control(&env, now_ms).map(|v| (StatusCode::OK, v)),
        Call::Peer(env) => {
            let msg_type = env.msg_type;
            fedlet
                .receive(env, now_ms)
                .map(|()| (StatusCode::ACCEPTED, json!({ "accepted": msg_type })))
                .map_err(fedlet_error)
        }
    }
}

pub fn respond(result: Result<(StatusCode, Value), ApiError>) -> Response {
    match result {
        Ok((status, body)) => (status, Json(body)).into_response(),
        Err(e) => {
            let status = StatusCode::from_u16(e.class.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(e.to_json())).into_response()
        }
    }
}
