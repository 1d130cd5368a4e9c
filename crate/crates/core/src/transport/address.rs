use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TransportError;
use crate::identity::FedId;

pub const SCHEME: &str = "comverse";

/// `comverse://host[:port]/fed_id`
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Address {
    host: String,
    port: Option<u16>,
    fed_id: FedId,
}

impl Address {
    pub fn new(host: impl Into<String>, port: Option<u16>, fed_id: FedId) -> Result<Self, TransportError> {
        let host = host.into();
        Address::from_str(&render(&host, port, &fed_id))
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> Option<u16> {
        self.port
    }

    pub fn fed_id(&self) -> &FedId {
        &self.fed_id
    }

    /// `host[:port]`, the routing key of the fedlet serving this address.
    pub fn authority(&self) -> String {
        match self.port {
            Some(p) => format!("{}:{}", self.host, p),
            None => self.host.clone(),
        }
    }

    /// Same fedlet, different identity.
    pub fn with_fed_id(&self, fed_id: FedId) -> Address {
        Address {
            host: self.host.clone(),
            port: self.port,
            fed_id,
        }
    }

    pub fn http_base(&self) -> String {
        format!("http://{}", self.authority())
    }
}

fn render(host: &str, port: Option<u16>, fed_id: &FedId) -> String {
    match port {
        Some(p) => format!("{SCHEME}://{host}:{p}/{fed_id}"),
        None => format!("{SCHEME}://{host}/{fed_id}"),
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(&self.host, self.port, &self.fed_id))
    }
}

impl FromStr for Address {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| TransportError::InvalidAddress(format!("{s}: {why}"));
        let url = url::Url::parse(s).map_err(|e| bad(&e.to_string()))?;
        if url.scheme() != SCHEME {
            return Err(bad("scheme must be comverse"));
        }
        if !url.username().is_empty() || url.password().is_some() {
            return Err(bad("credentials not allowed"));
        }
        if url.query().is_some() || url.fragment().is_some() {
            return Err(bad("query and fragment not allowed"));
        }
        let host = url.host_str().filter(|h| !h.is_empty()).ok_or_else(|| bad("missing host"))?;
        let path = url.path().strip_prefix('/').unwrap_or("");
        if path.is_empty() || path.contains('/') {
            return Err(bad("path must be a single fed id"));
        }
        let fed_id = FedId::new(path).map_err(|e| bad(&e.to_string()))?;
        Ok(Address {
            host: host.to_string(),
            port: url.port(),
            fed_id,
        })
    }
}

impl TryFrom<String> for Address {
    type Error = TransportError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Address> for String {
    fn from(a: Address) -> Self {
        a.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_port() {
        let a: Address = "comverse://campus.example:7443/com-42".parse().unwrap();
        assert_eq!(a.host(), "campus.example");
        assert_eq!(a.port(), Some(7443));
        assert_eq!(a.fed_id().as_str(), "com-42");
        assert_eq!(a.to_string(), "comverse://campus.example:7443/com-42");
        assert_eq!(a.http_base(), "http://campus.example:7443");

        let b: Address = "comverse://home-1/alice".parse().unwrap();
        assert_eq!(b.port(), None);
        assert_eq!(b.authority(), "home-1");
    }

    #[test]
    fn rejects_malformed() {
        for s in [
            "http://h/x",
            "comverse://h",
            "comverse://h/",
            "comverse://h/a/b",
            "comverse:///x",
            "comverse://h/x?y=1",
            "not a url",
            "comverse://h/bad%20id",
        ] {
            assert!(s.parse::<Address>().is_err(), "{s} should fail");
        }
    }

    #[test]
    fn serde_as_string() {
        let a: Address = "comverse://h:1/x".parse().unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "\"comverse://h:1/x\"");
        assert_eq!(serde_json::from_str::<Address>(&json).unwrap(), a);
    }
}
