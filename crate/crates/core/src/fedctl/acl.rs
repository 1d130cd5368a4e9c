//! Role ACLs with longest-prefix matching over slash-separated data refs.
//!
//! `air_quality/pm25` matches only that ref; `air_quality/*` matches every
//! descendant of `air_quality` (not `air_quality` itself); `*` matches all.
//! A longer literal prefix beats a shorter one and an exact pattern beats a
//! wildcard of the same length, so after rejecting duplicate patterns at
//! most one rule applies to any ref.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FedctlError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Permission {
    Read,
    AggregateOnly,
    None,
}

impl FromStr for Permission {
    type Err = FedctlError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(Permission::Read),
            "aggregate-only" => Ok(Permission::AggregateOnly),
            "none" => Ok(Permission::None),
            other => Err(FedctlError::InvalidArgument(format!("unknown permission {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DataPattern {
    segments: Vec<String>,
    wildcard: bool,
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Split a concrete data ref; `None` if it is not well formed.
pub fn parse_data_ref(data_ref: &str) -> Option<Vec<&str>> {
    let parts: Vec<&str> = data_ref.split('/').collect();
    parts.iter().all(|p| valid_segment(p)).then_some(parts)
}

impl DataPattern {
    pub fn matches(&self, data_ref: &str) -> bool {
        let Some(parts) = parse_data_ref(data_ref) else {
            return false;
        };
        let prefix_ok = parts.len() >= self.segments.len()
            && self.segments.iter().zip(&parts).all(|(a, b)| a == b);
        if self.wildcard {
            prefix_ok && parts.len() > self.segments.len()
        } else {
            prefix_ok && parts.len() == self.segments.len()
        }
    }

    fn specificity(&self) -> (usize, bool) {
        (self.segments.len(), !self.wildcard)
    }
}

impl FromStr for DataPattern {
    type Err = FedctlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| FedctlError::InvalidArgument(format!("pattern {s:?}: {why}"));
        if s == "*" {
            return Ok(DataPattern {
                segments: vec![],
                wildcard: true,
            });
        }
        let mut parts: Vec<&str> = s.split('/').collect();
        let wildcard = parts.last() == Some(&"*");
        if wildcard {
            parts.pop();
        }
        if parts.is_empty() {
            return Err(bad("empty"));
        }
        for p in &parts {
            if p.contains('*') {
                return Err(bad("wildcard only allowed as the final segment"));
            }
            if !valid_segment(p) {
                return Err(bad("segments must be non-empty [A-Za-z0-9._-]"));
            }
        }
        Ok(DataPattern {
            segments: parts.into_iter().map(String::from).collect(),
            wildcard,
        })
    }
}

impl fmt::Display for DataPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.segments.is_empty(), self.wildcard) {
            (true, _) => f.write_str("*"),
            (false, true) => write!(f, "{}/*", self.segments.join("/")),
            (false, false) => f.write_str(&self.segments.join("/")),
        }
    }
}

impl TryFrom<String> for DataPattern {
    type Error = FedctlError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<DataPattern> for String {
    fn from(p: DataPattern) -> Self {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclRule {
    pub pattern: DataPattern,
    pub permission: Permission,
}

impl AclRule {
    pub fn new(pattern: &str, permission: Permission) -> Result<Self, FedctlError> {
        Ok(AclRule {
            pattern: pattern.parse()?,
            permission,
        })
    }
}

/// Per-community role the member assigns data privileges to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub role_name: String,
    #[serde(default)]
    pub acl: Vec<AclRule>,
}

impl Role {
    pub fn empty(role_name: impl Into<String>) -> Self {
        Role {
            role_name: role_name.into(),
            acl: Vec::new(),
        }
    }

    pub fn validate_rules(rules: &[AclRule]) -> Result<(), FedctlError> {
        for (i, r) in rules.iter().enumerate() {
            if rules[..i].iter().any(|o| o.pattern == r.pattern) {
                return Err(FedctlError::InvalidArgument(format!(
                    "duplicate ACL pattern {}",
                    r.pattern
                )));
            }
        }
        Ok(())
    }

    /// The single most specific matching rule, if any.
    pub fn matching_rule(&self, data_ref: &str) -> Option<&AclRule> {
        self.acl
            .iter()
            .filter(|r| r.pattern.matches(data_ref))
            .max_by_key(|r| r.pattern.specificity())
    }

    pub fn permission_for(&self, data_ref: &str) -> Permission {
        self.matching_rule(data_ref)
            .map(|r| r.permission)
            .unwrap_or(Permission::None)
    }
}
