use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{Address, TransportError};
use crate::identity::{self, FedId, KeyPair, PublicKey, Signature};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub fed_id: FedId,
    pub public_key: PublicKey,
    pub address: Address,
}

/// Where a resolved address is served from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endpoint {
    /// `host[:port]`; a simnet node name or an HTTP authority.
    pub node: String,
    pub fed_id: FedId,
}

/// Public key storage: FedId → (public key, address).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyDirectory {
    entries: BTreeMap<FedId, DirectoryEntry>,
}

pub type SharedDirectory = Arc<RwLock<KeyDirectory>>;

impl KeyDirectory {
    pub fn shared(self) -> SharedDirectory {
        Arc::new(RwLock::new(self))
    }

    /// Idempotent for identical key material; a different key is refused.
    pub fn register(&mut self, fed_id: FedId, public_key: PublicKey, address: Address) -> Result<(), TransportError> {
        if address.fed_id() != &fed_id {
            return Err(TransportError::InvalidAddress(format!(
                "{address} does not name {fed_id}"
            )));
        }
        if let Some(existing) = self.entries.get(&fed_id) {
            if existing.public_key != public_key {
                return Err(TransportError::KeyConflict(fed_id));
            }
        }
        self.entries.insert(
            fed_id.clone(),
            DirectoryEntry {
                fed_id,
                public_key,
                address,
            },
        );
        Ok(())
    }

    pub fn lookup(&self, fed_id: &FedId) -> Option<&DirectoryEntry> {
        self.entries.get(fed_id)
    }

    pub fn public_key(&self, fed_id: &FedId) -> Option<PublicKey> {
        self.entries.get(fed_id).map(|e| e.public_key)
    }

    pub fn resolve(&self, addr: &Address) -> Result<Endpoint, TransportError> {
        match self.entries.get(addr.fed_id()) {
            Some(entry) if entry.address.authority() == addr.authority() => Ok(Endpoint {
                node: addr.authority(),
                fed_id: addr.fed_id().clone(),
            }),
            Some(entry) => Err(TransportError::NotFound(format!(
                "{} is served at {}, not {}",
                addr.fed_id(),
                entry.address,
                addr
            ))),
            None => Err(TransportError::NotFound(format!("no directory entry for {}", addr.fed_id()))),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &DirectoryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flat file signed by a directory authority.
    pub fn to_signed(&self, authority: &KeyPair) -> SignedDirectory {
        let entries: Vec<DirectoryEntry> = self.entries.values().cloned().collect();
        let signature = authority.sign(&canonical(&entries));
        SignedDirectory {
            entries,
            authority: authority.public_key(),
            signature,
        }
    }

    pub fn save_signed(&self, path: &Path, authority: &KeyPair) -> Result<(), TransportError> {
        let doc = serde_yaml::to_string(&self.to_signed(authority))
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        std::fs::write(path, doc).map_err(|e| TransportError::Io(e.to_string()))
    }

    pub fn load_signed(path: &Path, trusted: &PublicKey) -> Result<KeyDirectory, TransportError> {
        let text = std::fs::read_to_string(path).map_err(|e| TransportError::Io(e.to_string()))?;
        let doc: SignedDirectory =
            serde_yaml::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
        doc.open(trusted)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedDirectory {
    pub entries: Vec<DirectoryEntry>,
    pub authority: PublicKey,
    pub signature: Signature,
}

impl SignedDirectory {
    pub fn open(self, trusted: &PublicKey) -> Result<KeyDirectory, TransportError> {
        if &self.authority != trusted {
            return Err(TransportError::Malformed("directory signed by an untrusted authority".into()));
        }
        let ok = identity::verify(&canonical(&self.entries), &self.signature, trusted)
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        if !ok {
            return Err(TransportError::Malformed("directory signature does not verify".into()));
        }
        let mut dir = KeyDirectory::default();
        for e in self.entries {
            dir.register(e.fed_id, e.public_key, e.address)?;
        }
        Ok(dir)
    }
}

fn canonical(entries: &[DirectoryEntry]) -> Vec<u8> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.fed_id.cmp(&b.fed_id));
    let mut out = b"comverse-directory-v1".to_vec();
    out.extend(serde_json::to_vec(&sorted).expect("entries serialize"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::SecretSeed;

    fn key(n: u8) -> KeyPair {
        KeyPair::from_seed(SecretSeed([n; 32]))
    }

    fn id(s: &str) -> FedId {
        FedId::new(s).unwrap()
    }

    #[test]
    fn register_resolve_roundtrip() {
        let mut dir = KeyDirectory::default();
        let addr: Address = "comverse://campus:80/com-42".parse().unwrap();
        dir.register(id("com-42"), key(1).public_key(), addr.clone()).unwrap();
        let ep = dir.resolve(&addr).unwrap();
        assert_eq!(ep.node, "campus:80");
        assert_eq!(ep.fed_id, id("com-42"));
        // identical re-register is a no-op
        dir.register(id("com-42"), key(1).public_key(), addr).unwrap();
        assert_eq!(dir.len(), 1);
    }

    #[test]
    fn resolve_unknown_is_not_found() {
        let dir = KeyDirectory::default();
        let addr: Address = "comverse://nowhere/ghost".parse().unwrap();
        assert!(matches!(dir.resolve(&addr), Err(TransportError::NotFound(_))));
    }

    #[test]
    fn wrong_host_is_not_found() {
        let mut dir = KeyDirectory::default();
        dir.register(id("x"), key(1).public_key(), "comverse://a/x".parse().unwrap()).unwrap();
        assert!(dir.resolve(&"comverse://b/x".parse().unwrap()).is_err());
    }

    #[test]
    fn conflicting_key_refused() {
        let mut dir = KeyDirectory::default();
        let addr: Address = "comverse://h/x".parse().unwrap();
        dir.register(id("x"), key(1).public_key(), addr.clone()).unwrap();
        assert!(matches!(
            dir.register(id("x"), key(2).public_key(), addr),
            Err(TransportError::KeyConflict(_))
        ));
        assert_eq!(dir.public_key(&id("x")), Some(key(1).public_key()));
    }

    #[test]
    fn address_must_name_fed_id() {
        let mut dir = KeyDirectory::default();
        assert!(dir
            .register(id("x"), key(1).public_key(), "comverse://h/y".parse().unwrap())
            .is_err());
    }

    #[test]
    fn signed_file_roundtrip_and_tamper() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("directory.yaml");
        let mut dir = KeyDirectory::default();
        dir.register(id("a"), key(1).public_key(), "comverse://h1/a".parse().unwrap()).unwrap();
        dir.register(id("b"), key(2).public_key(), "comverse://h2:9/b".parse().unwrap()).unwrap();
        let authority = key(77);
        dir.save_signed(&path, &authority).unwrap();
        let loaded = KeyDirectory::load_signed(&path, &authority.public_key()).unwrap();
        assert_eq!(loaded, dir);

        assert!(KeyDirectory::load_signed(&path, &key(78).public_key()).is_err());

        let text = std::fs::read_to_string(&path).unwrap().replace("h2:9", "h3:9");
        std::fs::write(&path, text).unwrap();
        assert!(KeyDirectory::load_signed(&path, &authority.public_key()).is_err());
    }
}
