//! Versioned key/value objects and their on-disk format.
//!
//! One file per object. The first line is a header
//! `comverse-object <object_id> <version> <owner> <role>`; each further line is
//! a tab-separated `key kind data` record.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FedcoreError;
use crate::identity::FedId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectRole {
    /// Shareable state such as a model.
    State,
    /// Member data that only ever leaves its fedlet masked.
    Raw,
    /// Combined results.
    Aggregate,
}

impl fmt::Display for ObjectRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectRole::State => "state",
            ObjectRole::Raw => "raw",
            ObjectRole::Aggregate => "aggregate",
        })
    }
}

impl FromStr for ObjectRole {
    type Err = FedcoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "state" => Ok(ObjectRole::State),
            "raw" => Ok(ObjectRole::Raw),
            "aggregate" => Ok(ObjectRole::Aggregate),
            other => Err(FedcoreError::InvalidArgument(format!("unknown object role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "kebab-case")]
pub enum Value {
    Bytes(#[serde(with = "hex::serde")] Vec<u8>),
    Floats(Vec<f64>),
    Ints(Vec<i64>),
}

impl Value {
    pub fn len(&self) -> usize {
        match self {
            Value::Bytes(b) => b.len(),
            Value::Floats(v) => v.len(),
            Value::Ints(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_floats(&self) -> Option<&[f64]> {
        match self {
            Value::Floats(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            Value::Ints(v) => Some(v),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Bytes(_) => "bytes",
            Value::Floats(_) => "floats",
            Value::Ints(_) => "ints",
        }
    }

    fn check(&self) -> Result<(), FedcoreError> {
        if let Value::Floats(v) = self {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(FedcoreError::InvalidArgument("float values must be finite".into()));
            }
        }
        Ok(())
    }

    fn encode(&self) -> String {
        match self {
            Value::Bytes(b) => hex::encode(b),
            Value::Floats(v) => join(v.iter().map(|x| format!("{x:?}"))),
            Value::Ints(v) => join(v.iter().map(|x| x.to_string())),
        }
    }

    fn decode(kind: &str, data: &str) -> Result<Value, String> {
        fn parts<T: FromStr>(data: &str) -> Result<Vec<T>, String> {
            if data.is_empty() {
                return Ok(Vec::new());
            }
            data.split(',')
                .map(|p| p.parse().map_err(|_| format!("bad number {p:?}")))
                .collect()
        }
        match kind {
            "bytes" => hex::decode(data).map(Value::Bytes).map_err(|e| e.to_string()),
            "floats" => parts(data).map(Value::Floats),
            "ints" => parts(data).map(Value::Ints),
            other => Err(format!("unknown value kind {other:?}")),
        }
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

pub type Entries = BTreeMap<String, Value>;

pub(crate) fn check_object_id(id: &str) -> Result<(), FedcoreError> {
    if crate::fedctl::acl::parse_data_ref(id).is_none() {
        return Err(FedcoreError::InvalidArgument(format!(
            "object id {id:?} must be slash-separated [A-Za-z0-9._-] segments"
        )));
    }
    Ok(())
}

fn check_entries(entries: &Entries) -> Result<(), FedcoreError> {
    for (k, v) in entries {
        if k.is_empty() || k.chars().any(|c| c.is_whitespace()) {
            return Err(FedcoreError::InvalidArgument(format!("entry key {k:?} must be non-empty without whitespace")));
        }
        v.check()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataObject {
    pub object_id: String,
    pub role: ObjectRole,
    pub owner: FedId,
    pub version: u64,
    pub entries: Entries,
}

/// A consistent read of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSnapshot {
    pub object_id: String,
    pub role: ObjectRole,
    pub version: u64,
    pub entries: Entries,
}

impl DataObject {
    pub fn new(object_id: &str, role: ObjectRole, owner: FedId) -> Result<Self, FedcoreError> {
        check_object_id(object_id)?;
        Ok(DataObject {
            object_id: object_id.to_string(),
            role,
            owner,
            version: 0,
            entries: Entries::new(),
        })
    }

    pub fn snapshot(&self) -> ObjectSnapshot {
        ObjectSnapshot {
            object_id: self.object_id.clone(),
            role: self.role,
            version: self.version,
            entries: self.entries.clone(),
        }
    }

    /// Replace all entries; bumps the version.
    pub fn replace(&mut self, entries: Entries) -> Result<u64, FedcoreError> {
        check_entries(&entries)?;
        self.entries = entries;
        self.version += 1;
        Ok(self.version)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "comverse-object {} {} {} {}\n",
            self.object_id, self.version, self.owner, self.role
        );
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}\t{}\t{}\n", v.kind(), v.encode()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FedcoreError> {
        let bad = |why: String| FedcoreError::InvalidArgument(format!("object file: {why}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(' ').collect();
        let [magic, id, version, owner, role] = header[..] else {
            return Err(bad("malformed header".into()));
        };
        if magic != "comverse-object" {
            return Err(bad("missing comverse-object header".into()));
        }
        let mut obj = DataObject::new(id, role.parse()?, FedId::new(owner).map_err(|e| bad(e.to_string()))?)?;
        obj.version = version.parse().map_err(|_| bad(format!("bad version {version:?}")))?;
        for line in lines.filter(|l| !l.is_empty()) {
            let mut f = line.splitn(3, '\t');
            let (Some(k), Some(kind), Some(data)) = (f.next(), f.next(), f.next()) else {
                return Err(bad(format!("malformed record {line:?}")));
            };
            obj.entries.insert(k.to_string(), Value::decode(kind, data).map_err(bad)?);
        }
        check_entries(&obj.entries)?;
        Ok(obj)
    }

    pub fn file_name(&self) -> String {
        format!("{}.obj", self.object_id.replace('/', "~"))
    }

    pub fn save(&self, dir: &Path) -> Result<(), FedcoreError> {
        let path = dir.join(self.file_name());
        let tmp = path.with_extension("obj.tmp");
        std::fs::write(&tmp, self.to_text()).map_err(FedcoreError::io)?;
        std::fs::rename(&tmp, &path).map_err(FedcoreError::io)
    }
}
