//! Federation identities, signing keys and member-issued community access tokens.
//!
//! A fedlet holds one host identity plus one derived identity per community
//! it joins. Derived identities are a pure function of the host secret and
//! the community id, so they survive restarts without extra key storage.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Unix seconds.
pub type Timestamp = u64;

/// Token lifetime used when the caller does not configure one.
pub const DEFAULT_TOKEN_TTL: u64 = 3600;

const MAX_FED_ID_LEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("invalid fed id {0:?}: {1}")]
    InvalidFedId(String, &'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

/// Opaque federation identifier. URL-safe, 1..=128 chars.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FedId(String);

impl FedId {
    pub fn new(value: impl Into<String>) -> Result<Self, IdentityError> {
        let value = value.into();
        if value.is_empty() {
            return Err(IdentityError::InvalidFedId(value, "empty"));
        }
        if value.len() > MAX_FED_ID_LEN {
            return Err(IdentityError::InvalidFedId(value, "longer than 128 chars"));
        }
        if !value
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~'))
        {
            return Err(IdentityError::InvalidFedId(value, "not URL-safe"));
        }
        Ok(FedId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The identity a host uses inside `community`.
    pub fn member_of(&self, community: &FedId) -> FedId {
        let joined = format!("{}.{}", self.0, community.0);
        if joined.len() <= MAX_FED_ID_LEN {
            return FedId(joined);
        }
        let digest = Sha256::digest(community.0.as_bytes());
        let short = format!("{}.{}", self.0, hex::encode(&digest[..6]));
        if short.len() <= MAX_FED_ID_LEN {
            FedId(short)
        } else {
            FedId(hex::encode(Sha256::digest(joined.as_bytes())))
        }
    }
}

impl fmt::Display for FedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for FedId {
    type Err = IdentityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FedId::new(s)
    }
}

impl TryFrom<String> for FedId {
    type Error = IdentityError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        FedId::new(value)
    }
}

impl From<FedId> for String {
    fn from(id: FedId) -> Self {
        id.0
    }
}

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
                let bytes = hex::decode(s).map_err(|e| IdentityError::InvalidKey(e.to_string()))?;
                let arr: [u8; $len] = bytes.try_into().map_err(|v: Vec<u8>| {
                    IdentityError::InvalidKey(format!(
                        "{} expects {} bytes, got {}",
                        stringify!($name),
                        $len,
                        v.len()
                    ))
                })?;
                Ok($name(arr))
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = IdentityError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $name::from_hex(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_bytes!(TokenValue, 32);
hex_bytes!(PublicKey, 32);
hex_bytes!(Signature, 64);
hex_bytes!(SecretSeed, 32);
hex_bytes!(Nonce, 16);

impl TokenValue {
    /// Copy with bit `bit` (0 = lowest bit of byte 0) inverted.
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        self.0[(bit / 8) % 32] ^= 1 << (bit % 8);
        self
    }
}

impl Nonce {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Nonce(bytes)
    }
}

/// Member-issued capability a community presents when requesting the member's data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token: TokenValue,
    pub community_id: FedId,
    pub nonce: Nonce,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

impl AccessToken {
    pub fn ttl(&self) -> u64 {
        self.expires_at - self.issued_at
    }

    pub fn age(&self, now: Timestamp) -> u64 {
        now.saturating_sub(self.issued_at)
    }
}

/// token = SHA-256(community_id ‖ nonce ‖ issued_at as big-endian u64).
///
/// The nonce and timestamp are fixed width, so the concatenation is unambiguous.
pub fn generate_token(
    community_id: &FedId,
    nonce: Nonce,
    issued_at: Timestamp,
    ttl: u64,
) -> Result<AccessToken, IdentityError> {
    if ttl == 0 {
        return Err(IdentityError::InvalidArgument("ttl must be positive".into()));
    }
    let expires_at = issued_at
        .checked_add(ttl)
        .ok_or_else(|| IdentityError::InvalidArgument("ttl overflows timestamp".into()))?;
    let mut hasher = Sha256::new();
    hasher.update(community_id.as_str().as_bytes());
    hasher.update(nonce.0);
    hasher.update(issued_at.to_be_bytes());
    Ok(AccessToken {
        token: TokenValue(hasher.finalize().into()),
        community_id: community_id.clone(),
        nonce,
        issued_at,
        expires_at,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenStatus {
    Valid,
    Expired,
    Mismatch,
}

impl fmt::Display for TokenStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenStatus::Valid => "valid",
            TokenStatus::Expired => "expired",
            TokenStatus::Mismatch => "mismatch",
        })
    }
}

pub fn validate_token(presented: &TokenValue, stored: &AccessToken, now: Timestamp) -> TokenStatus {
    if presented != &stored.token {
        TokenStatus::Mismatch
    } else if now < stored.expires_at {
        TokenStatus::Valid
    } else {
        TokenStatus::Expired
    }
}

/// Ed25519 signing key pair.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: SecretSeed) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&seed.0),
        }
    }

    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(SecretSeed(seed))
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn secret_seed(&self) -> SecretSeed {
        SecretSeed(self.signing.to_bytes())
    }

    /// Deterministic child key bound to `context`.
    pub fn derive(&self, context: &[u8]) -> KeyPair {
        let mut hasher = Sha256::new();
        hasher.update(b"comverse-derive-v1");
        hasher.update(self.signing.to_bytes());
        hasher.update(context);
        KeyPair::from_seed(SecretSeed(hasher.finalize().into()))
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }

    /// X25519-style shared secret with a peer, hashed with `context`.
    ///
    /// Both sides compute the same value: a·B = b·A on the Montgomery curve.
    pub fn shared_secret(&self, peer: &PublicKey, context: &[u8]) -> Result<[u8; 32], IdentityError> {
        let peer = VerifyingKey::from_bytes(&peer.0)
            .map_err(|e| IdentityError::InvalidKey(e.to_string()))?;
        let point = peer.to_montgomery() * self.signing.to_scalar();
        let mut hasher = Sha256::new();
        hasher.update(b"comverse-pairwise-v1");
        hasher.update(point.to_bytes());
        hasher.update(context);
        Ok(hasher.finalize().into())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public_key", &self.public_key()).finish_non_exhaustive()
    }
}

pub fn sign(message: &[u8], key: &KeyPair) -> Signature {
    key.sign(message)
}

/// `Ok(false)` for a well-formed key that does not verify; `Err` when the key bytes are not a curve point.
pub fn verify(message: &[u8], signature: &Signature, public_key: &PublicKey) -> Result<bool, IdentityError> {
    let key = VerifyingKey::from_bytes(&public_key.0)
        .map_err(|e| IdentityError::InvalidKey(e.to_string()))?;
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    Ok(key.verify(message, &sig).is_ok())
}

/// A fedlet's host key plus its per-community member keys.
#[derive(Clone, Debug)]
pub struct Keyring {
    host_id: FedId,
    host: KeyPair,
    members: BTreeMap<FedId, (FedId, KeyPair)>,
}

impl Keyring {
    pub fn new(host_id: FedId, host: KeyPair) -> Self {
        Keyring {
            host_id,
            host,
            members: BTreeMap::new(),
        }
    }

    pub fn host_id(&self) -> &FedId {
        &self.host_id
    }

    pub fn host_key(&self) -> &KeyPair {
        &self.host
    }

    /// Identity used inside `community`, created on first use.
    pub fn member_identity(&mut self, community: &FedId) -> (FedId, KeyPair) {
        let host_id = &self.host_id;
        let host = &self.host;
        self.members
            .entry(community.clone())
            .or_insert_with(|| {
                let id = host_id.member_of(community);
                let key = host.derive(format!("member:{community}").as_bytes());
                (id, key)
            })
            .clone()
    }

    /// Key for any identity this fedlet owns.
    pub fn key_for(&self, id: &FedId) -> Option<&KeyPair> {
        if id == &self.host_id {
            return Some(&self.host);
        }
        self.members.values().find(|(m, _)| m == id).map(|(_, k)| k)
    }

    pub fn owns(&self, id: &FedId) -> bool {
        self.key_for(id).is_some()
    }

    /// Community a member identity belongs to.
    pub fn community_of(&self, member_id: &FedId) -> Option<&FedId> {
        self.members.iter().find(|(_, (m, _))| m == member_id).map(|(c, _)| c)
    }
}

/// Injected time source.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    fn now(&self) -> Timestamp {
        self.now_ms() / 1000
    }
}

#[derive(Clone, Debug, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new(start_ms: u64) -> Self {
        SimClock(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn set_ms(&self, ms: u64) {
        let prev = self.0.swap(ms, Ordering::SeqCst);
        debug_assert!(ms >= prev, "virtual time moved backwards");
    }

    pub fn advance_ms(&self, delta: u64) {
        self.0.fetch_add(delta, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn cid() -> FedId {
        FedId::new("com-42").unwrap()
    }

    #[test]
    fn fed_id_validation() {
        assert!(FedId::new("").is_err());
        assert!(FedId::new("a/b").is_err());
        assert!(FedId::new("x".repeat(129)).is_err());
        assert!(FedId::new("x".repeat(128)).is_ok());
        assert!(FedId::new("student-0042_a.b~c").is_ok());
    }

    #[test]
    fn member_ids_stay_valid() {
        let host = FedId::new("h".repeat(100)).unwrap();
        let community = FedId::new("c".repeat(100)).unwrap();
        let m = host.member_of(&community);
        assert!(FedId::new(m.as_str()).is_ok());
        assert_eq!(m, host.member_of(&community));
        assert_eq!(
            FedId::new("alice").unwrap().member_of(&cid()).as_str(),
            "alice.com-42"
        );
    }

    #[test]
    fn token_is_deterministic() {
        let nonce = Nonce([7; 16]);
        let a = generate_token(&cid(), nonce, 1000, 60).unwrap();
        let b = generate_token(&cid(), nonce, 1000, 60).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.expires_at, 1060);
    }

    #[test]
    fn zero_ttl_rejected() {
        assert!(matches!(
            generate_token(&cid(), Nonce([0; 16]), 5, 0),
            Err(IdentityError::InvalidArgument(_))
        ));
    }

    #[test]
    fn ten_thousand_nonces_no_collision() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let t = generate_token(&cid(), Nonce::random(&mut rng), 1_700_000_000, DEFAULT_TOKEN_TTL)
                .unwrap();
            assert!(seen.insert(t.token));
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn validate_boundaries() {
        let t = generate_token(&cid(), Nonce([1; 16]), 100, 50).unwrap();
        assert_eq!(validate_token(&t.token, &t, 149), TokenStatus::Valid);
        assert_eq!(validate_token(&t.token, &t, 150), TokenStatus::Expired);
        assert_eq!(validate_token(&t.token, &t, 10), TokenStatus::Valid);
        assert_eq!(
            validate_token(&t.token.with_bit_flipped(77), &t, 120),
            TokenStatus::Mismatch
        );
    }

    #[test]
    fn token_hex_roundtrip() {
        let t = generate_token(&cid(), Nonce([3; 16]), 1, 2).unwrap();
        let hex = t.token.to_string();
        assert_eq!(hex, hex.to_lowercase());
        assert_eq!(hex.len(), 64);
        assert_eq!(TokenValue::from_hex(&hex).unwrap(), t.token);
    }

    #[test]
    fn sign_verify_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = KeyPair::generate(&mut rng);
        let other = KeyPair::generate(&mut rng);
        let sig = sign(b"", &k);
        assert!(verify(b"", &sig, &k.public_key()).unwrap());
        let sig = sign(b"payload", &k);
        assert!(!verify(b"paylaad", &sig, &k.public_key()).unwrap());
        assert!(!verify(b"payload", &sig, &other.public_key()).unwrap());
    }

    #[test]
    fn malformed_key_is_invalid_key() {
        assert!(matches!(PublicKey::from_hex("abcd"), Err(IdentityError::InvalidKey(_))));
        // y = 2 is not the encoding of any curve point
        let mut bad = [0u8; 32];
        bad[0] = 2;
        let k = KeyPair::from_seed(SecretSeed([5; 32]));
        let sig = k.sign(b"m");
        assert!(matches!(verify(b"m", &sig, &PublicKey(bad)), Err(IdentityError::InvalidKey(_))));
    }

    #[test]
    fn shared_secret_symmetric() {
        let a = KeyPair::from_seed(SecretSeed([1; 32]));
        let b = KeyPair::from_seed(SecretSeed([2; 32]));
        let c = KeyPair::from_seed(SecretSeed([3; 32]));
        let ab = a.shared_secret(&b.public_key(), b"ctx").unwrap();
        assert_eq!(ab, b.shared_secret(&a.public_key(), b"ctx").unwrap());
        assert_ne!(ab, a.shared_secret(&c.public_key(), b"ctx").unwrap());
        assert_ne!(ab, a.shared_secret(&b.public_key(), b"other").unwrap());
    }

    #[test]
    fn keyring_member_identities_are_stable() {
        let host = KeyPair::from_seed(SecretSeed([9; 32]));
        let mut ring = Keyring::new(FedId::new("mid-a").unwrap(), host.clone());
        let (id1, k1) = ring.member_identity(&cid());
        let mut fresh = Keyring::new(FedId::new("mid-a").unwrap(), host);
        let (id2, k2) = fresh.member_identity(&cid());
        assert_eq!(id1, id2);
        assert_eq!(k1.public_key(), k2.public_key());
        assert_ne!(k1.public_key(), ring.host_key().public_key());
        assert!(ring.owns(&id1));
        assert_eq!(ring.community_of(&id1), Some(&cid()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn verify_accepts_only_untampered(
                seed_a in any::<[u8; 32]>(),
                seed_b in any::<[u8; 32]>(),
                msg in proptest::collection::vec(any::<u8>(), 0..64),
                flip in any::<usize>(),
            ) {
                prop_assume!(seed_a != seed_b);
                let a = KeyPair::from_seed(SecretSeed(seed_a));
                let b = KeyPair::from_seed(SecretSeed(seed_b));
                let sig = a.sign(&msg);
                prop_assert!(verify(&msg, &sig, &a.public_key()).unwrap());
                prop_assert!(!verify(&msg, &sig, &b.public_key()).unwrap());
                if !msg.is_empty() {
                    let mut tampered = msg.clone();
                    let i = flip % tampered.len();
                    tampered[i] ^= 0x01;
                    prop_assert!(!verify(&tampered, &sig, &a.public_key()).unwrap());
                }
            }

            #[test]
            fn token_is_pure(nonce in any::<[u8; 16]>(), at in 0u64..1u64 << 40, ttl in 1u64..100_000) {
                let a = generate_token(&cid(), Nonce(nonce), at, ttl).unwrap();
                let b = generate_token(&cid(), Nonce(nonce), at, ttl).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert!(a.expires_at > a.issued_at);
            }
        }
    }
}
