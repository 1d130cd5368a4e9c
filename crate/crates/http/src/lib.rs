//! HTTP binding for fedlets.
//!
//! Every POST body is a signed envelope. Peer messages go to the route of
//! their message type; operator commands are `control` envelopes signed by
//! the fedlet's own key. GETs are unauthenticated reads. See `WIRE.md`.

mod gateway;
mod routes;
mod server;
mod transport;

pub use gateway::SimGateway;
pub use routes::{execute, fedlet_error, parse, Call};
pub use server::{wall_ms, FedletServer};
pub use transport::{Backoff, HttpTransport, SendError};
