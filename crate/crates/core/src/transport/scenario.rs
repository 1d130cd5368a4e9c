//! Scenario files for the simulated network: a list of timed events.
//!
//! ```yaml
//! - at_ms: 0
//!   event: { kind: policy, drop_probability: 0.0, min_delay_ms: 5, max_delay_ms: 20 }
//! - at_ms: 60000
//!   event: { kind: partition, a: home-3, b: campus }
//! - at_ms: 7200000
//!   event: { kind: heal-all }
//! ```

use serde::{Deserialize, Serialize};

use super::{LinkPolicy, TransportError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioEvent {
    NodeStop { node: String },
    NodeStart { node: String },
    Partition { a: String, b: String },
    Heal { a: String, b: String },
    HealAll,
    Policy(LinkPolicy),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub at_ms: u64,
    pub event: ScenarioEvent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scenario {
    pub entries: Vec<ScenarioEntry>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, TransportError> {
        let mut s: Scenario =
            serde_yaml::from_str(text).map_err(|e| TransportError::Malformed(format!("scenario: {e}")))?;
        // stable: equal timestamps keep file order
        s.entries.sort_by_key(|e| e.at_ms);
        Ok(s)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("scenario serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_event_kinds() {
        let text = r#"
- at_ms: 500
  event: { kind: node-stop, node: home-1 }
- at_ms: 100
  event: { kind: partition, a: home-2, b: campus }
- at_ms: 900
  event: { kind: heal, a: home-2, b: campus }
- at_ms: 900
  event: { kind: node-start, node: home-1 }
- at_ms: 1000
  event: { kind: heal-all }
- at_ms: 0
  event: { kind: policy, drop_probability: 0.25, min_delay_ms: 1, max_delay_ms: 9 }
"#;
        let s = Scenario::parse(text).unwrap();
        let times: Vec<u64> = s.entries.iter().map(|e| e.at_ms).collect();
        assert_eq!(times, vec![0, 100, 500, 900, 900, 1000]);
        assert!(matches!(s.entries[3].event, ScenarioEvent::Heal { .. }));
        assert!(matches!(s.entries[4].event, ScenarioEvent::NodeStart { .. }));
        assert_eq!(Scenario::parse(&s.to_yaml()).unwrap(), s);
    }

    #[test]
    fn unknown_kind_is_malformed() {
        assert!(Scenario::parse("- at_ms: 1\n  event: { kind: meteor }\n").is_err());
    }
}
