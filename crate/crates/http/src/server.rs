//! A live fedlet behind axum, ticking on the wall clock.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{Method, Uri};
use axum::response::Response;
use axum::Router;
use comverse_core::fedlet::Fedlet;
use comverse_core::transport::Envelope;
use tokio::task::JoinHandle;

use crate::routes::{execute, parse, respond};
use crate::transport::{HttpTransport, SendError};

pub fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Clone)]
pub struct FedletServer {
    fedlet: Arc<Mutex<Fedlet>>,
    transport: HttpTransport,
}

impl FedletServer {
    pub fn new(fedlet: Fedlet, transport: HttpTransport) -> Self {
        FedletServer {
            fedlet: Arc::new(Mutex::new(fedlet)),
            transport,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Fedlet> {
        self.fedlet.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn router(&self) -> Router {
        Router::new().fallback(handle).with_state(self.clone())
    }

    pub fn tick(&self) {
        let out = {
            let mut f = self.lock();
            f.tick(wall_ms());
            f.take_outbox()
        };
        self.send_all(out);
    }

    /// Must run inside a tokio runtime.
    pub fn spawn_ticker(&self, period: Duration) -> JoinHandle<()> {
        let server = self.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(period);
            loop {
                every.tick().await;
                server.tick();
            }
        })
    }

    fn send_all(&self, out: Vec<Envelope>) {
        for env in out {
            let server = self.clone();
            tokio::spawn(async move {
                match server.transport.send(&env).await {
                    Ok(()) => {}
                    Err(SendError::Refused { url, status, body }) => {
                        tracing::warn!(%url, status, "peer refused {}: {body}", env.msg_type);
                    }
                    Err(e @ SendError::Unreachable { .. }) => {
                        tracing::warn!("{e}");
                        let out = {
                            let mut f = server.lock();
                            f.delivery_failed(&env, wall_ms());
                            f.take_outbox()
                        };
                        server.send_all(out);
                    }
                }
            });
        }
    }
}

async fn handle(
    State(server): State<FedletServer>,
    method: Method,
    uri: Uri,
    Query(query): Query<BTreeMap<String, String>>,
    body: Bytes,
) -> Response {
    let (result, out) = {
        let mut f = server.lock();
        let result = parse(&method, uri.path(), &query, &body).and_then(|call| execute(call, &mut f, wall_ms()));
        (result, f.take_outbox())
    };
    server.send_all(out);
    respond(result)
}
