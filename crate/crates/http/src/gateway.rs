//! HTTP access to the fedlets of a [`Simulation`] under `/n/{node}/...`.
//!
//! Each command runs at the current virtual time and the network is then
//! settled, so a client sees the outcome of its command on the next read.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{Method, Uri};
use axum::response::Response;
use axum::Router;
use comverse_core::fedlet::{ApiError, ErrorClass};
use comverse_core::sim::Simulation;

use crate::routes::{execute, parse, respond, Call};

#[derive(Clone)]
pub struct SimGateway {
    sim: Arc<Mutex<Simulation>>,
    settle_ms: u64,
}

impl SimGateway {
    pub fn new(sim: Simulation, settle_ms: u64) -> Self {
        SimGateway {
            sim: Arc::new(Mutex::new(sim)),
            settle_ms,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Simulation> {
        self.sim.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn router(&self) -> Router {
        Router::new().fallback(handle).with_state(self.clone())
    }
}

async fn handle(
    State(gw): State<SimGateway>,
    method: Method,
    uri: Uri,
    Query(query): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> Response {
    let path = uri.path();
    let Some((node, rest)) = path.strip_prefix("/n/").and_then(|p| p.split_once('/')) else {
        return respond(Err(ApiError::new(ErrorClass::NotFound, format!("no route {method} {path}"))));
    };
    let rest = format!("/{rest}");
    let mut sim = gw.lock();
    if sim.try_fedlet(node).is_none() {
        return respond(Err(ApiError::new(ErrorClass::NotFound, format!("no simulated node {node}"))));
    }
    let result = parse(&method, &rest, &query, &body).and_then(|call| {
        let mutates = !matches!(call, Call::Read(_));
        let out = sim.with_fedlet(node, |f, now| execute(call, f, now));
        if mutates {
            sim.settle(gw.settle_ms);
        }
        out
    });
    respond(result)
}
