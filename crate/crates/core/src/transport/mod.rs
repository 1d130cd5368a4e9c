//! Signed envelopes, addressing, the key directory and the simulated network.

mod address;
mod directory;
mod envelope;
pub mod scenario;
pub mod simnet;

use thiserror::Error;

pub use address::Address;
pub use directory::{DirectoryEntry, Endpoint, KeyDirectory, SharedDirectory, SignedDirectory};
pub use envelope::{Envelope, MsgType, Outgoing, Rejection, ReplayGuard, SeqCounter};
pub use scenario::{Scenario, ScenarioEntry, ScenarioEvent};
pub use simnet::{LinkPolicy, NetStats, SendOutcome, SimNetwork};

use crate::identity::FedId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("invalid address {0}")]
    InvalidAddress(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("key conflict for {0}: already registered with a different key")]
    KeyConflict(FedId),
    #[error("delivery failure: {0}")]
    DeliveryFailure(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(String),
}
