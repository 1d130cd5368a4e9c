//! Deterministic in-process network.
//!
//! Single-threaded and stepped by a virtual clock. All randomness comes from
//! one seeded ChaCha stream, so a scenario replays bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Envelope;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPolicy {
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub min_delay_ms: u64,
    #[serde(default)]
    pub max_delay_ms: u64,
}

impl LinkPolicy {
    pub fn zero_loss() -> Self {
        LinkPolicy {
            drop_probability: 0.0,
            min_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn lan() -> Self {
        LinkPolicy {
            drop_probability: 0.0,
            min_delay_ms: 5,
            max_delay_ms: 20,
        }
    }
}

impl Default for LinkPolicy {
    fn default() -> Self {
        LinkPolicy::lan()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    /// Queued with no added latency.
    Delivered,
    Dropped,
    /// Queued for delivery at the given virtual time.
    Delayed(u64),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub partitioned: u64,
    pub to_down_node: u64,
}

#[derive(Clone, Debug)]
pub struct InFlight {
    pub deliver_at_ms: u64,
    pub from_node: String,
    pub to_node: String,
    pub envelope: Envelope,
}

#[derive(Debug)]
pub struct SimNetwork {
    rng: ChaCha8Rng,
    policy: LinkPolicy,
    partitions: BTreeSet<(String, String)>,
    down: BTreeSet<String>,
    /// Latest scheduled delivery per ordered node pair; keeps each pair FIFO.
    last_delivery: BTreeMap<(String, String), u64>,
    in_flight: BTreeMap<(u64, u64), InFlight>,
    next_id: u64,
    pub stats: NetStats,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl SimNetwork {
    pub fn new(seed: u64, policy: LinkPolicy) -> Self {
        SimNetwork {
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy,
            partitions: BTreeSet::new(),
            down: BTreeSet::new(),
            last_delivery: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            next_id: 0,
            stats: NetStats::default(),
        }
    }

    pub fn policy(&self) -> &LinkPolicy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: LinkPolicy) {
        self.policy = policy;
    }

    pub fn partition(&mut self, a: &str, b: &str) {
        self.partitions.insert(pair(a, b));
    }

    pub fn heal(&mut self, a: &str, b: &str) {
        self.partitions.remove(&pair(a, b));
    }

    pub fn heal_all(&mut self) {
        self.partitions.clear();
    }

    pub fn is_partitioned(&self, a: &str, b: &str) -> bool {
        self.partitions.contains(&pair(a, b))
    }

    pub fn set_down(&mut self, node: &str, down: bool) {
        if down {
            self.down.insert(node.to_string());
        } else {
            self.down.remove(node);
        }
    }

    pub fn is_down(&self, node: &str) -> bool {
        self.down.contains(node)
    }

    pub fn send(&mut self, from_node: &str, to_node: &str, envelope: Envelope, now_ms: u64) -> SendOutcome {
        self.stats.sent += 1;
        if self.is_partitioned(from_node, to_node) {
            self.stats.partitioned += 1;
            return SendOutcome::Dropped;
        }
        // always draw both values so the stream does not depend on which branch ran
        let roll: f64 = self.rng.random();
        let span = self.policy.max_delay_ms.saturating_sub(self.policy.min_delay_ms);
        let jitter = if span == 0 { 0 } else { self.rng.random_range(0..=span) };
        if roll < self.policy.drop_probability {
            self.stats.dropped += 1;
            return SendOutcome::Dropped;
        }
        let key = (from_node.to_string(), to_node.to_string());
        let earliest = now_ms + self.policy.min_delay_ms + jitter;
        let at = earliest.max(self.last_delivery.get(&key).copied().unwrap_or(0));
        self.last_delivery.insert(key, at);
        self.next_id += 1;
        self.in_flight.insert(
            (at, self.next_id),
            InFlight {
                deliver_at_ms: at,
                from_node: from_node.to_string(),
                to_node: to_node.to_string(),
                envelope,
            },
        );
        if at == now_ms {
            SendOutcome::Delivered
        } else {
            SendOutcome::Delayed(at)
        }
    }

    pub fn next_delivery_ms(&self) -> Option<u64> {
        self.in_flight.keys().next().map(|(t, _)| *t)
    }

    pub fn has_in_flight(&self) -> bool {
        !self.in_flight.is_empty()
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    /// Next message due at or before `now_ms`, after partition/down checks.
    /// Messages to a down or partitioned node are dropped here.
    pub fn pop_due(&mut self, now_ms: u64) -> Option<InFlight> {
        loop {
            let key = *self.in_flight.keys().next()?;
            if key.0 > now_ms {
                return None;
            }
            let msg = self.in_flight.remove(&key).expect("key present");
            if self.is_partitioned(&msg.from_node, &msg.to_node) {
                self.stats.partitioned += 1;
                continue;
            }
            if self.is_down(&msg.to_node) {
                self.stats.to_down_node += 1;
                continue;
            }
            self.stats.delivered += 1;
            return Some(msg);
        }
    }
}
