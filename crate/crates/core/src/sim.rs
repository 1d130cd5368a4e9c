//! Discrete-event simulation of a set of fedlets on a [`SimNetwork`].
//!
//! Virtual time advances from event to event: scenario entries, message
//! deliveries and the periodic fedlet tick, in that order at equal times.
//! Every key, nonce and network decision derives from the simulation seed.

use std::collections::{BTreeMap, VecDeque};

use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use crate::app::App;
use crate::appspec::{AppSpec, Placement, Registration};
use crate::fedctl::{JoinPolicy, MemberStatus, ShareStatus};
use crate::fedlet::{ApiError, ApiRequest, Fedlet, FedletConfig, FedletError};
use crate::identity::{FedId, KeyPair, SecretSeed};
use crate::transport::{
    Address, KeyDirectory, LinkPolicy, Scenario, ScenarioEntry, ScenarioEvent, SharedDirectory, SimNetwork,
};

pub const DEFAULT_TICK_MS: u64 = 250;

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub policy: LinkPolicy,
    pub tick_ms: u64,
    pub fedlet: FedletConfig,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        SimConfig {
            seed,
            policy: LinkPolicy::lan(),
            tick_ms: DEFAULT_TICK_MS,
            fedlet: FedletConfig::default(),
        }
    }
}

pub struct Simulation {
    config: SimConfig,
    now_ms: u64,
    next_tick_ms: u64,
    net: SimNetwork,
    directory: SharedDirectory,
    nodes: BTreeMap<String, Fedlet>,
    scenario: VecDeque<ScenarioEntry>,
}

/// Deterministic host key for `name` under `seed`.
pub fn node_key(seed: u64, name: &str) -> KeyPair {
    let mut h = Sha256::new();
    h.update(b"comverse-sim-node|");
    h.update(seed.to_be_bytes());
    h.update(name.as_bytes());
    KeyPair::from_seed(SecretSeed(h.finalize().into()))
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        Simulation {
            net: SimNetwork::new(config.seed, config.policy.clone()),
            config,
            now_ms: 0,
            next_tick_ms: 0,
            directory: KeyDirectory::default().shared(),
            nodes: BTreeMap::new(),
            scenario: VecDeque::new(),
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut SimNetwork {
        &mut self.net
    }

    pub fn directory(&self) -> &SharedDirectory {
        &self.directory
    }

    /// A fedlet on its own node; its FedId and node name are both `name`.
    pub fn add_node(&mut self, name: &str) -> Result<FedId, FedletError> {
        let id = FedId::new(name).map_err(|e| FedletError::Handler(e.to_string()))?;
        let address = Address::new(name, None, id.clone())?;
        let mut cfg = self.config.fedlet.clone();
        cfg.seed = self.config.seed ^ u64::from_be_bytes(Sha256::digest(name.as_bytes())[..8].try_into().expect("8 bytes"));
        let fedlet = Fedlet::new(address, node_key(self.config.seed, name), self.directory.clone(), cfg)?;
        self.nodes.insert(name.to_string(), fedlet);
        Ok(id)
    }

    /// `add_node` plus hosting a community with the given policy.
    pub fn add_community(&mut self, name: &str, policy: JoinPolicy) -> Result<FedId, FedletError> {
        let id = self.add_node(name)?;
        self.fedlet_mut(name).host_community(name, policy);
        Ok(id)
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn fedlet(&self, node: &str) -> &Fedlet {
        self.nodes.get(node).unwrap_or_else(|| panic!("no node {node}"))
    }

    pub fn fedlet_mut(&mut self, node: &str) -> &mut Fedlet {
        self.nodes.get_mut(node).unwrap_or_else(|| panic!("no node {node}"))
    }

    pub fn try_fedlet(&self, node: &str) -> Option<&Fedlet> {
        self.nodes.get(node)
    }

    pub fn is_up(&self, node: &str) -> bool {
        !self.net.is_down(node)
    }

    /// Queue timed events; times are absolute virtual milliseconds.
    pub fn schedule(&mut self, scenario: Scenario) {
        let mut all: Vec<ScenarioEntry> = self.scenario.drain(..).collect();
        all.extend(scenario.entries);
        all.sort_by_key(|e| e.at_ms);
        self.scenario = all.into();
    }

    pub fn apply_event(&mut self, event: &ScenarioEvent) {
        match event {
            ScenarioEvent::NodeStop { node } => self.net.set_down(node, true),
            ScenarioEvent::NodeStart { node } => self.net.set_down(node, false),
            ScenarioEvent::Partition { a, b } => self.net.partition(a, b),
            ScenarioEvent::Heal { a, b } => self.net.heal(a, b),
            ScenarioEvent::HealAll => self.net.heal_all(),
            ScenarioEvent::Policy(p) => self.net.set_policy(p.clone()),
        }
    }

    /// Run an operator command on `node` and send whatever it produced.
    pub fn api(&mut self, node: &str, req: ApiRequest) -> Result<Json, ApiError> {
        let now = self.now_ms;
        let out = self.fedlet_mut(node).api(req, now);
        self.flush(node);
        out
    }

    pub fn install(
        &mut self,
        node: &str,
        spec: &AppSpec,
        placement: &Placement,
        app: Option<Box<dyn App>>,
    ) -> Result<Registration, FedletError> {
        let now = self.now_ms;
        let reg = self.fedlet_mut(node).install(spec, placement, app, now)?;
        self.flush(node);
        Ok(reg)
    }

    /// Run `f` against a node's fedlet at the current time, then send its output.
    pub fn with_fedlet<R>(&mut self, node: &str, f: impl FnOnce(&mut Fedlet, u64) -> R) -> R {
        let now = self.now_ms;
        let r = f(self.fedlet_mut(node), now);
        self.flush(node);
        r
    }

    fn flush(&mut self, node: &str) {
        let now = self.now_ms;
        let Some(fedlet) = self.nodes.get_mut(node) else { return };
        let out = fedlet.take_outbox();
        for env in out {
            let target = self.directory.read().expect("directory lock").resolve(&env.to);
            match target {
                Ok(ep) if self.nodes.contains_key(&ep.node) => {
                    self.net.send(node, &ep.node, env, now);
                }
                _ => {
                    let fedlet = self.nodes.get_mut(node).expect("present");
                    fedlet.delivery_failed(&env, now);
                }
            }
        }
        // delivery failures can queue resends; they go out on the next tick
    }

    fn next_event_ms(&self) -> u64 {
        let mut t = self.next_tick_ms;
        if let Some(d) = self.net.next_delivery_ms() {
            t = t.min(d);
        }
        if let Some(e) = self.scenario.front() {
            t = t.min(e.at_ms);
        }
        t
    }

    /// Process every event up to and including `until_ms`.
    pub fn run_until(&mut self, until_ms: u64) {
        loop {
            let t = self.next_event_ms().max(self.now_ms);
            if t > until_ms {
                break;
            }
            self.now_ms = t;
            self.step();
        }
        self.now_ms = self.now_ms.max(until_ms);
    }

    pub fn run_for(&mut self, ms: u64) {
        self.run_until(self.now_ms + ms);
    }

    /// Run until no message is in flight, or `max_ms` of virtual time passes.
    /// Returns whether the network went quiet.
    pub fn settle(&mut self, max_ms: u64) -> bool {
        let deadline = self.now_ms + max_ms;
        while self.net.has_in_flight() {
            let t = self.next_event_ms().max(self.now_ms);
            if t > deadline {
                self.now_ms = deadline;
                return false;
            }
            self.now_ms = t;
            self.step();
        }
        true
    }

    /// Run until `pred` holds (checked after every event) or `max_ms` passes.
    pub fn run_until_pred(&mut self, max_ms: u64, mut pred: impl FnMut(&Simulation) -> bool) -> bool {
        let deadline = self.now_ms + max_ms;
        loop {
            if pred(self) {
                return true;
            }
            let t = self.next_event_ms().max(self.now_ms);
            if t > deadline {
                self.now_ms = deadline;
                return pred(self);
            }
            self.now_ms = t;
            self.step();
        }
    }

    fn step(&mut self) {
        let now = self.now_ms;
        while self.scenario.front().is_some_and(|e| e.at_ms <= now) {
            let e = self.scenario.pop_front().expect("front exists");
            self.apply_event(&e.event);
        }
        while let Some(msg) = self.net.pop_due(now) {
            if let Some(fedlet) = self.nodes.get_mut(&msg.to_node) {
                // rejected envelopes are recorded by the fedlet
                let _ = fedlet.receive(msg.envelope, now);
                self.flush(&msg.to_node);
            }
        }
        if self.next_tick_ms <= now {
            let names: Vec<String> = self.nodes.keys().cloned().collect();
            for name in names {
                if self.net.is_down(&name) {
                    continue;
                }
                self.fedlet_mut(&name).tick(now);
                self.flush(&name);
            }
            self.next_tick_ms = now + self.config.tick_ms;
        }
    }

    /// Ledger of every node as YAML, in node order.
    pub fn ledgers(&self) -> String {
        let mut out = String::new();
        for (name, f) in &self.nodes {
            out.push_str(&format!("# {name}\n"));
            out.push_str(&f.fedctl().ledger().to_yaml());
        }
        out
    }

    /// Every stored object of every node in its on-disk text form.
    pub fn stores(&self) -> String {
        let mut out = String::new();
        for f in self.nodes.values() {
            for o in f.fedcore().objects() {
                out.push_str(&o.to_text());
            }
        }
        out
    }

    /// Disagreements between community and member ledgers.
    pub fn consensus_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, community) in &self.nodes {
            let Some(hosted) = community.fedctl().hosted() else { continue };
            let cid = &hosted.community_id;
            for m in community.fedctl().members() {
                let owner = self.nodes.values().find(|f| f.owns(&m.member_id));
                let Some(owner) = owner else {
                    out.push(format!("{name}: member {} has no fedlet", m.member_id));
                    continue;
                };
                let entry = owner.fedctl().community(cid);
                match (m.status, entry) {
                    (MemberStatus::Active, Some(e)) => {
                        if e.share_status == ShareStatus::Revoked {
                            out.push(format!("{}: active at {name} but revoked locally", m.member_id));
                        }
                        if m.received_token.as_ref().map(|t| t.token) != Some(e.issued_token.token) {
                            out.push(format!("{}: token differs from {name}'s copy", m.member_id));
                        }
                        if e.member_fed_id != m.member_id || &e.address != community.address() {
                            out.push(format!("{}: identity or address mismatch with {name}", m.member_id));
                        }
                    }
                    (MemberStatus::Active, None) => {
                        out.push(format!("{}: active at {name} but has no community entry", m.member_id))
                    }
                    (MemberStatus::Left, Some(e)) if e.share_status != ShareStatus::Revoked => {
                        out.push(format!("{}: left {name} but still shares", m.member_id))
                    }
                    (MemberStatus::Pending, _) => out.push(format!("{}: still pending at {name}", m.member_id)),
                    _ => {}
                }
            }
            for f in self.nodes.values() {
                if let Some(e) = f.fedctl().community(cid) {
                    let admitted = community.fedctl().member(&e.member_fed_id).is_some();
                    if !admitted {
                        out.push(format!("{}: holds an entry for {cid} that {name} never admitted", f.host_id()));
                    }
                }
            }
        }
        out
    }
}
