//! The two membership ledgers: communities this fedlet joined, and members
//! of the community it hosts. Persisted as one YAML document with top-level
//! `communities:` and `members:` keys.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::acl::Role;
use super::FedctlError;
use crate::identity::{validate_token, AccessToken, FedId, Timestamp, TokenStatus, TokenValue};
use crate::transport::Address;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareStatus {
    Active,
    Paused,
    Revoked,
}

impl ShareStatus {
    /// active⇄paused, active→revoked, paused→revoked. Revoked is terminal.
    pub fn can_become(self, next: ShareStatus) -> bool {
        use ShareStatus::*;
        matches!(
            (self, next),
            (Active, Paused) | (Paused, Active) | (Active, Revoked) | (Paused, Revoked)
        )
    }
}

impl fmt::Display for ShareStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShareStatus::Active => "active",
            ShareStatus::Paused => "paused",
            ShareStatus::Revoked => "revoked",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberStatus {
    Pending,
    Active,
    Stale,
    Left,
}

impl fmt::Display for MemberStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemberStatus::Pending => "pending",
            MemberStatus::Active => "active",
            MemberStatus::Stale => "stale",
            MemberStatus::Left => "left",
        })
    }
}

/// One joined community, on the member side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityEntry {
    pub community_id: FedId,
    pub name: String,
    pub address: Address,
    pub share_status: ShareStatus,
    pub role: Role,
    pub issued_token: AccessToken,
    pub member_fed_id: FedId,
    /// Accepted until it expires so a refresh in flight does not lock the community out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_token: Option<AccessToken>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undelivered: bool,
}

impl CommunityEntry {
    pub fn token_status(&self, presented: &TokenValue, now: Timestamp) -> TokenStatus {
        match validate_token(presented, &self.issued_token, now) {
            TokenStatus::Mismatch => self
                .previous_token
                .as_ref()
                .map(|prev| validate_token(presented, prev, now))
                .unwrap_or(TokenStatus::Mismatch),
            status => status,
        }
    }
}

/// One admitted member, on the community side. Never removed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub member_id: FedId,
    pub name: String,
    pub address: Address,
    pub status: MemberStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_token: Option<AccessToken>,
    pub joined_at: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    #[serde(default)]
    pub communities: Vec<CommunityEntry>,
    #[serde(default)]
    pub members: Vec<MemberEntry>,
}

impl Ledger {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("ledger serializes")
    }

    pub fn from_yaml(text: &str) -> Result<Ledger, FedctlError> {
        let ledger: Ledger =
            serde_yaml::from_str(text).map_err(|e| FedctlError::InvalidArgument(format!("ledger: {e}")))?;
        ledger.check()?;
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<(), FedctlError> {
        let tmp = path.with_extension("yaml.tmp");
        std::fs::write(&tmp, self.to_yaml()).map_err(|e| FedctlError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| FedctlError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Ledger, FedctlError> {
        let text = std::fs::read_to_string(path).map_err(|e| FedctlError::Io(e.to_string()))?;
        Ledger::from_yaml(&text)
    }

    fn check(&self) -> Result<(), FedctlError> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.communities {
            if !seen.insert(&c.community_id) {
                return Err(FedctlError::InvalidArgument(format!(
                    "ledger lists community {} twice",
                    c.community_id
                )));
            }
            Role::validate_rules(&c.role.acl)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.members {
            if !seen.insert(&m.member_id) {
                return Err(FedctlError::InvalidArgument(format!(
                    "ledger lists member {} twice",
                    m.member_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedctl::acl::{AclRule, Permission};
    use crate::identity::{generate_token, Nonce};

    #[test]
    fn share_transitions() {
        use ShareStatus::*;
        assert!(Active.can_become(Paused));
        assert!(Paused.can_become(Active));
        assert!(Active.can_become(Revoked));
        assert!(Paused.can_become(Revoked));
        assert!(!Revoked.can_become(Active));
        assert!(!Revoked.can_become(Paused));
        assert!(!Active.can_become(Active));
    }

    fn sample() -> Ledger {
        let c = FedId::new("com-42").unwrap();
        let tok = generate_token(&c, Nonce([1; 16]), 100, 3600).unwrap();
        Ledger {
            communities: vec![CommunityEntry {
                community_id: c.clone(),
                name: "Elm Street".into(),
                address: "comverse://campus/com-42".parse().unwrap(),
                share_status: ShareStatus::Active,
                role: Role {
                    role_name: "com-42-member".into(),
                    acl: vec![AclRule::new("air_quality/*", Permission::Read).unwrap()],
                },
                issued_token: tok.clone(),
                member_fed_id: FedId::new("alice.com-42").unwrap(),
                previous_token: None,
                undelivered: false,
            }],
            members: vec![MemberEntry {
                member_id: FedId::new("bob.hub").unwrap(),
                name: "bob".into(),
                address: "comverse://bobhome/bob.hub".parse().unwrap(),
                status: MemberStatus::Pending,
                received_token: None,
                joined_at: 5,
            }],
        }
    }

    #[test]
    fn yaml_has_fig2_top_level_keys() {
        let yaml = sample().to_yaml();
        assert!(yaml.starts_with("communities:"));
        assert!(yaml.contains("\nmembers:"));
        assert!(yaml.contains("share_status: active"));
        assert!(yaml.contains("pattern: air_quality/*"));
        assert_eq!(Ledger::from_yaml(&yaml).unwrap(), sample());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.yaml");
        sample().save(&path).unwrap();
        assert_eq!(Ledger::load(&path).unwrap(), sample());
    }

    #[test]
    fn duplicate_entries_rejected() {
        let mut l = sample();
        l.members.push(l.members[0].clone());
        assert!(Ledger::from_yaml(&l.to_yaml()).is_err());
    }

    #[test]
    fn previous_token_accepted_until_it_expires() {
        let mut entry = sample().communities.remove(0);
        let old = entry.issued_token.clone();
        entry.issued_token = generate_token(&entry.community_id, Nonce([2; 16]), 1900, 3600).unwrap();
        entry.previous_token = Some(old.clone());
        assert_eq!(entry.token_status(&old.token, 2000), TokenStatus::Valid);
        assert_eq!(entry.token_status(&old.token, old.expires_at), TokenStatus::Expired);
        assert_eq!(entry.token_status(&old.token.with_bit_flipped(1), 2000), TokenStatus::Mismatch);
    }
}
