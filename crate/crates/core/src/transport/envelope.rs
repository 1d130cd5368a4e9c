use std::collections::BTreeMap;
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Address, KeyDirectory, TransportError};
use crate::identity::{self, FedId, KeyPair, PublicKey, Signature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgType {
    JoinRequest,
    JoinResponse,
    TokenUpdate,
    Leave,
    LeaveAck,
    DataRequest,
    Sync,
    AggregateContribution,
    Notify,
    /// Operator command from the fedlet's own admin key.
    Control,
}

impl MsgType {
    pub fn as_str(&self) -> &'static str {
        match self {
            MsgType::JoinRequest => "join-request",
            MsgType::JoinResponse => "join-response",
            MsgType::TokenUpdate => "token-update",
            MsgType::Leave => "leave",
            MsgType::LeaveAck => "leave-ack",
            MsgType::DataRequest => "data-request",
            MsgType::Sync => "sync",
            MsgType::AggregateContribution => "aggregate-contribution",
            MsgType::Notify => "notify",
            MsgType::Control => "control",
        }
    }

    /// HTTP route carrying this message type between fedlets.
    pub fn route(&self) -> &'static str {
        match self {
            MsgType::JoinRequest | MsgType::JoinResponse => "/join",
            MsgType::Leave | MsgType::LeaveAck => "/leave",
            MsgType::TokenUpdate => "/token",
            MsgType::DataRequest => "/data-request",
            MsgType::Sync | MsgType::Notify => "/sync",
            MsgType::AggregateContribution => "/aggregate-contribution",
            MsgType::Control => "/control",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A message before sealing: the fedlet picks the key and sequence number.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub from: FedId,
    pub to: Address,
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Outgoing {
    pub fn json<T: Serialize>(from: FedId, to: Address, msg_type: MsgType, body: &T) -> Self {
        Outgoing {
            from,
            to,
            msg_type,
            payload: serde_json::to_vec(body).expect("wire types serialize"),
        }
    }
}

/// Signed wire message between fedlets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: FedId,
    pub to: Address,
    pub msg_type: MsgType,
    #[serde(with = "hex_payload")]
    pub payload: Vec<u8>,
    pub seq: u64,
    pub signature: Signature,
}

mod hex_payload {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

impl Envelope {
    pub fn seal(out: Outgoing, seq: u64, key: &KeyPair) -> Envelope {
        let bytes = signing_bytes(&out.from, &out.to, out.msg_type, &out.payload, seq);
        Envelope {
            signature: key.sign(&bytes),
            from: out.from,
            to: out.to,
            msg_type: out.msg_type,
            payload: out.payload,
            seq,
        }
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(&self.from, &self.to, self.msg_type, &self.payload, self.seq)
    }

    pub fn verify_with(&self, key: &PublicKey) -> bool {
        identity::verify(&self.signing_bytes(), &self.signature, key).unwrap_or(false)
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, TransportError> {
        serde_json::from_slice(&self.payload)
            .map_err(|e| TransportError::Malformed(format!("{} payload: {e}", self.msg_type)))
    }
}

fn signing_bytes(from: &FedId, to: &Address, msg_type: MsgType, payload: &[u8], seq: u64) -> Vec<u8> {
    let to = to.to_string();
    let mut out = Vec::with_capacity(64 + payload.len());
    out.extend_from_slice(b"comverse-envelope-v1");
    for field in [from.as_str().as_bytes(), to.as_bytes(), msg_type.as_str().as_bytes(), payload] {
        out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        out.extend_from_slice(field);
    }
    out.extend_from_slice(&seq.to_be_bytes());
    out
}

/// Per-(from, to) outbound sequence numbers.
#[derive(Clone, Debug, Default)]
pub struct SeqCounter {
    next: BTreeMap<(FedId, String), u64>,
}

impl SeqCounter {
    pub fn next(&mut self, from: &FedId, to: &Address) -> u64 {
        let slot = self.next.entry((from.clone(), to.to_string())).or_insert(0);
        *slot += 1;
        *slot
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    UnknownSender(FedId),
    BadSignature(FedId),
    Replay { from: FedId, seq: u64 },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::UnknownSender(id) => write!(f, "sender {id} not in key directory"),
            Rejection::BadSignature(id) => write!(f, "signature from {id} does not verify"),
            Rejection::Replay { from, seq } => write!(f, "replayed seq {seq} from {from}"),
        }
    }
}

/// Inbound authentication and replay suppression.
#[derive(Clone, Debug, Default)]
pub struct ReplayGuard {
    last_seen: BTreeMap<(FedId, String), u64>,
    pub replayed: u64,
    pub forged: u64,
}

impl ReplayGuard {
    /// Verify against the directory key of `from`.
    pub fn admit(&mut self, env: &Envelope, directory: &KeyDirectory) -> Result<(), Rejection> {
        let key = directory.public_key(&env.from).ok_or_else(|| {
            self.forged += 1;
            Rejection::UnknownSender(env.from.clone())
        })?;
        self.admit_with_key(env, &key)
    }

    pub fn admit_with_key(&mut self, env: &Envelope, key: &PublicKey) -> Result<(), Rejection> {
        if !env.verify_with(key) {
            self.forged += 1;
            return Err(Rejection::BadSignature(env.from.clone()));
        }
        let slot = self
            .last_seen
            .entry((env.from.clone(), env.to.to_string()))
            .or_insert(0);
        if env.seq <= *slot {
            self.replayed += 1;
            return Err(Rejection::Replay {
                from: env.from.clone(),
                seq: env.seq,
            });
        }
        *slot = env.seq;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::SecretSeed;

    fn setup() -> (KeyDirectory, KeyPair, Address, FedId) {
        let key = KeyPair::from_seed(SecretSeed([4; 32]));
        let from = FedId::new("alice").unwrap();
        let mut dir = KeyDirectory::default();
        dir.register(
            from.clone(),
            key.public_key(),
            "comverse://home/alice".parse().unwrap(),
        )
        .unwrap();
        (dir, key, "comverse://campus/com-1".parse().unwrap(), from)
    }

    fn env(from: &FedId, to: &Address, seq: u64, key: &KeyPair) -> Envelope {
        Envelope::seal(
            Outgoing {
                from: from.clone(),
                to: to.clone(),
                msg_type: MsgType::TokenUpdate,
                payload: b"{}".to_vec(),
            },
            seq,
            key,
        )
    }

    #[test]
    fn replay_dropped_and_counted() {
        let (dir, key, to, from) = setup();
        let mut guard = ReplayGuard::default();
        let e1 = env(&from, &to, 1, &key);
        assert!(guard.admit(&e1, &dir).is_ok());
        assert!(matches!(guard.admit(&e1, &dir), Err(Rejection::Replay { seq: 1, .. })));
        assert_eq!(guard.replayed, 1);
        assert!(guard.admit(&env(&from, &to, 2, &key), &dir).is_ok());
    }

    #[test]
    fn forged_sender_rejected() {
        let (dir, _, to, from) = setup();
        let mallory = KeyPair::from_seed(SecretSeed([5; 32]));
        let mut guard = ReplayGuard::default();
        let forged = env(&from, &to, 1, &mallory);
        assert!(matches!(guard.admit(&forged, &dir), Err(Rejection::BadSignature(_))));
        let unknown = env(&FedId::new("eve").unwrap(), &to, 1, &mallory);
        assert!(matches!(guard.admit(&unknown, &dir), Err(Rejection::UnknownSender(_))));
        assert_eq!(guard.forged, 2);
    }

    #[test]
    fn tampered_fields_fail_verification() {
        let (_, key, to, from) = setup();
        let e = env(&from, &to, 3, &key);
        assert!(e.verify_with(&key.public_key()));
        let mut t = e.clone();
        t.seq = 4;
        assert!(!t.verify_with(&key.public_key()));
        let mut t = e.clone();
        t.payload[0] ^= 1;
        assert!(!t.verify_with(&key.public_key()));
        let mut t = e;
        t.msg_type = MsgType::Leave;
        assert!(!t.verify_with(&key.public_key()));
    }

    #[test]
    fn wire_json_shape() {
        let (_, key, to, from) = setup();
        let e = env(&from, &to, 1, &key);
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["msg_type"], "token-update");
        assert_eq!(v["payload"], "7b7d");
        assert_eq!(v["signature"].as_str().unwrap().len(), 128);
        let back: Envelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn seq_counter_per_pair() {
        let mut c = SeqCounter::default();
        let a = FedId::new("a").unwrap();
        let x: Address = "comverse://h/x".parse().unwrap();
        let y: Address = "comverse://h/y".parse().unwrap();
        assert_eq!(c.next(&a, &x), 1);
        assert_eq!(c.next(&a, &x), 2);
        assert_eq!(c.next(&a, &y), 1);
    }
}
