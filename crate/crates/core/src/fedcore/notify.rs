//! Change notifications for apps.
//!
//! Each app has a bounded FIFO. When it is full the oldest event is dropped
//! and a gap marker carrying the drop count is delivered ahead of the rest.
//! Events for one id therefore always arrive in version order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::object::ObjectSnapshot;
use crate::fedctl::MembershipEvent;
use crate::identity::FedId;

pub const MEMBERSHIP_TOPIC: &str = "membership";
pub const ROUNDS_TOPIC: &str = "rounds";
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum AppEvent {
    ObjectChanged { object_id: String, version: u64 },
    ViewChanged { view_id: String, version: u64 },
    Membership(MembershipEvent),
    RoundOpened { aggregate: String, round: u64, attempt: u32, participants: Vec<FedId> },
    RoundAborted { aggregate: String, round: u64, attempt: u32, missing: Vec<FedId> },
    RoundCompleted { aggregate: String, round: u64, contributors: usize },
    RemoteRead { request_id: u64, from: FedId, result: RemoteReadResult },
    /// `dropped` earlier events were discarded.
    Gap { dropped: u64 },
}

impl AppEvent {
    /// Subscription key the event is routed by.
    pub fn topic(&self) -> &str {
        match self {
            AppEvent::ObjectChanged { object_id, .. } => object_id,
            AppEvent::ViewChanged { view_id, .. } => view_id,
            AppEvent::Membership(_) => MEMBERSHIP_TOPIC,
            AppEvent::RoundOpened { .. } | AppEvent::RoundAborted { .. } | AppEvent::RoundCompleted { .. } => {
                ROUNDS_TOPIC
            }
            AppEvent::RemoteRead { .. } | AppEvent::Gap { .. } => "",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum RemoteReadResult {
    Snapshot { snapshot: ObjectSnapshot },
    Unchanged { object_id: String, version: u64 },
    Denied { reason: String },
}

#[derive(Debug, Default)]
struct Inbox {
    topics: BTreeSet<String>,
    queue: VecDeque<AppEvent>,
    dropped: u64,
}

#[derive(Debug)]
pub struct NotifyHub {
    capacity: usize,
    apps: BTreeMap<String, Inbox>,
}

impl Default for NotifyHub {
    fn default() -> Self {
        NotifyHub::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl NotifyHub {
    pub fn new(capacity: usize) -> Self {
        NotifyHub {
            capacity: capacity.max(1),
            apps: BTreeMap::new(),
        }
    }

    pub fn subscribe(&mut self, app: &str, topic: &str) {
        self.apps.entry(app.into()).or_default().topics.insert(topic.into());
    }

    pub fn unsubscribe_app(&mut self, app: &str) {
        self.apps.remove(app);
    }

    pub fn is_subscribed(&self, app: &str, topic: &str) -> bool {
        self.apps.get(app).is_some_and(|i| i.topics.contains(topic))
    }

    pub fn apps(&self) -> impl Iterator<Item = &str> {
        self.apps.keys().map(String::as_str)
    }

    /// Queue for every app subscribed to the event's topic.
    pub fn publish(&mut self, event: AppEvent) {
        let topic = event.topic().to_string();
        let targets: Vec<String> = self
            .apps
            .iter()
            .filter(|(_, i)| i.topics.contains(&topic))
            .map(|(a, _)| a.clone())
            .collect();
        for app in targets {
            self.push(&app, event.clone());
        }
    }

    /// Queue for one app regardless of subscriptions.
    pub fn push(&mut self, app: &str, event: AppEvent) {
        let cap = self.capacity;
        let inbox = self.apps.entry(app.into()).or_default();
        if inbox.queue.len() >= cap {
            inbox.queue.pop_front();
            inbox.dropped += 1;
        }
        inbox.queue.push_back(event);
    }

    pub fn pending(&self, app: &str) -> usize {
        self.apps.get(app).map_or(0, |i| i.queue.len() + usize::from(i.dropped > 0))
    }

    pub fn drain(&mut self, app: &str) -> Vec<AppEvent> {
        let Some(inbox) = self.apps.get_mut(app) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(inbox.queue.len() + 1);
        if inbox.dropped > 0 {
            out.push(AppEvent::Gap { dropped: inbox.dropped });
            inbox.dropped = 0;
        }
        out.extend(inbox.queue.drain(..));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn changed(id: &str, v: u64) -> AppEvent {
        AppEvent::ObjectChanged { object_id: id.into(), version: v }
    }

    #[test]
    fn only_subscribers_receive() {
        let mut hub = NotifyHub::default();
        hub.subscribe("app", "O1");
        hub.publish(changed("O1", 2));
        hub.publish(changed("O9", 1));
        assert_eq!(hub.drain("app"), vec![changed("O1", 2)]);
        assert!(hub.drain("app").is_empty());
    }

    #[test]
    fn per_id_order_under_rapid_mutation() {
        let mut hub = NotifyHub::default();
        hub.subscribe("app", "a");
        hub.subscribe("app", "b");
        for v in 1..=500 {
            hub.publish(changed("a", v));
            if v % 3 == 0 {
                hub.publish(changed("b", v));
            }
        }
        let mut last = BTreeMap::new();
        for e in hub.drain("app") {
            if let AppEvent::ObjectChanged { object_id, version } = e {
                let prev = last.insert(object_id, version).unwrap_or(0);
                assert!(version > prev);
            }
        }
        assert_eq!(last["a"], 500);
        assert_eq!(last["b"], 498);
    }

    #[test]
    fn overflow_drops_oldest_with_gap_marker() {
        let mut hub = NotifyHub::new(3);
        hub.subscribe("app", "a");
        for v in 1..=5 {
            hub.publish(changed("a", v));
        }
        assert_eq!(hub.pending("app"), 4);
        assert_eq!(
            hub.drain("app"),
            vec![AppEvent::Gap { dropped: 2 }, changed("a", 3), changed("a", 4), changed("a", 5)]
        );
    }
}
