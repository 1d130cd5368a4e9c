//! One node: control plane, data plane, apps and the envelope layer.
//!
//! A fedlet is a plain state machine. Inbound envelopes, operator commands and
//! timer ticks are applied one at a time by the caller (the simulator or the
//! HTTP server), and outbound envelopes are collected with [`Fedlet::take_outbox`].

pub mod api;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::app::{App, AppContext};
use crate::appspec::{self, AppSpec, AppSpecError, Placement, Registration};
use crate::fedcore::notify::{AppEvent, MEMBERSHIP_TOPIC};
use crate::fedcore::{
    Contribution, DataRequest, Fedcore, FedcoreConfig, FedcoreError, NotifyMessage, RoundGuard, SyncMessage,
};
use crate::fedctl::{Fedctl, FedctlConfig, JoinPolicy, JoinResponse, Ledger, LeaveNotice, TokenUpdate};
use crate::identity::{FedId, KeyPair, Keyring};
use crate::transport::{Address, Envelope, MsgType, Rejection, ReplayGuard, SeqCounter, SharedDirectory};

pub use api::{ApiError, ApiRequest, ErrorClass};

/// Rounds of app event delivery per step; apps reacting to their own writes settle well before this.
const APP_PASSES: usize = 16;

#[derive(Debug, Error)]
pub enum FedletError {
    #[error("rejected envelope: {0}")]
    Rejected(Rejection),
    #[error("envelope for {0} is not addressed to this fedlet")]
    Misaddressed(FedId),
    #[error("{0}")]
    Handler(String),
    #[error(transparent)]
    AppSpec(#[from] AppSpecError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FedletConfig {
    pub fedctl: FedctlConfig,
    pub fedcore: FedcoreConfig,
    /// Seeds token nonces.
    pub seed: u64,
}

/// Inbound envelopes that never reached a handler.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct DroppedEnvelope {
    pub at_ms: u64,
    pub from: FedId,
    pub msg_type: MsgType,
    pub reason: String,
}

pub struct Fedlet {
    fedctl: Fedctl,
    fedcore: Fedcore,
    directory: SharedDirectory,
    seq: SeqCounter,
    guard: ReplayGuard,
    apps: BTreeMap<String, Box<dyn App>>,
    dropped: Vec<DroppedEnvelope>,
}

impl std::fmt::Debug for Fedlet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fedlet")
            .field("fedctl", &self.fedctl)
            .field("fedcore", &self.fedcore)
            .field("apps", &self.apps.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Fedlet {
    /// Registers the host identity in the directory.
    pub fn new(
        address: Address,
        key: KeyPair,
        directory: SharedDirectory,
        config: FedletConfig,
    ) -> Result<Fedlet, FedletError> {
        let host_id = address.fed_id().clone();
        directory
            .write()
            .expect("directory lock")
            .register(host_id.clone(), key.public_key(), address.clone())?;
        let keyring = Keyring::new(host_id.clone(), key);
        let fedctl = Fedctl::new(keyring, host_id.as_str(), address, config.fedctl, config.seed);
        Ok(Fedlet {
            fedctl,
            fedcore: Fedcore::new(host_id, config.fedcore),
            directory,
            seq: SeqCounter::default(),
            guard: ReplayGuard::default(),
            apps: BTreeMap::new(),
            dropped: Vec::new(),
        })
    }

    pub fn host_id(&self) -> &FedId {
        self.fedctl.host_id()
    }

    pub fn address(&self) -> &Address {
        self.fedctl.address()
    }

    pub fn fedctl(&self) -> &Fedctl {
        &self.fedctl
    }

    pub fn fedctl_mut(&mut self) -> &mut Fedctl {
        &mut self.fedctl
    }

    pub fn fedcore(&self) -> &Fedcore {
        &self.fedcore
    }

    pub fn fedcore_mut(&mut self) -> &mut Fedcore {
        &mut self.fedcore
    }

    pub fn directory(&self) -> &SharedDirectory {
        &self.directory
    }

    pub fn dropped(&self) -> &[DroppedEnvelope] {
        &self.dropped
    }

    pub fn replay_stats(&self) -> (u64, u64) {
        (self.guard.replayed, self.guard.forged)
    }

    pub fn host_community(&mut self, name: &str, policy: JoinPolicy) {
        self.fedctl.host_community(name, policy);
    }

    pub fn app(&self, app_id: &str) -> Option<&dyn App> {
        self.apps.get(app_id).map(|a| a.as_ref())
    }

    pub fn app_ids(&self) -> impl Iterator<Item = &str> {
        self.apps.keys().map(String::as_str)
    }

    /// Instantiate `spec` here and, if given, attach the app serving it.
    pub fn install(
        &mut self,
        spec: &AppSpec,
        placement: &Placement,
        app: Option<Box<dyn App>>,
        now_ms: u64,
    ) -> Result<Registration, FedletError> {
        let reg = appspec::instantiate(spec, placement, &mut self.fedcore, &self.fedctl, now_ms)?;
        if let Some(app) = app {
            if app.app_id() != spec.app_id {
                return Err(FedletError::AppSpec(AppSpecError::InvalidArgument(format!(
                    "app {} cannot serve spec {}",
                    app.app_id(),
                    spec.app_id
                ))));
            }
            self.attach(app, now_ms);
        }
        Ok(reg)
    }

    /// Attach an app; it receives membership events and anything it subscribed to.
    pub fn attach(&mut self, mut app: Box<dyn App>, now_ms: u64) {
        let id = app.app_id().to_string();
        self.fedcore.hub_mut().subscribe(&id, MEMBERSHIP_TOPIC);
        let mut ctx = AppContext::new(&id, &mut self.fedcore, &mut self.fedctl, now_ms);
        app.start(&mut ctx);
        self.apps.insert(id, app);
        self.deliver(now_ms);
    }

    pub fn detach(&mut self, app_id: &str) -> Option<Box<dyn App>> {
        self.fedcore.hub_mut().unsubscribe_app(app_id);
        self.apps.remove(app_id)
    }

    /// Open the next round of a configured aggregate over the active members.
    pub fn open_round(&mut self, aggregate: &str, guard: Option<RoundGuard>, now_ms: u64) -> Result<u64, FedcoreError> {
        let round = self.fedcore.open_round(aggregate, guard, &self.fedctl, now_ms);
        self.settle(now_ms);
        round
    }

    /// Does this fedlet sign for `id`?
    pub fn owns(&self, id: &FedId) -> bool {
        self.fedctl.keyring().owns(id)
    }

    /// Authenticate and apply one peer envelope.
    pub fn receive(&mut self, env: Envelope, now_ms: u64) -> Result<(), FedletError> {
        let result = self.apply(&env, now_ms);
        if let Err(e) = &result {
            tracing::debug!(host = %self.host_id(), from = %env.from, msg = %env.msg_type, "dropped: {e}");
            self.dropped.push(DroppedEnvelope {
                at_ms: now_ms,
                from: env.from.clone(),
                msg_type: env.msg_type,
                reason: e.to_string(),
            });
        }
        self.settle(now_ms);
        result
    }

    fn apply(&mut self, env: &Envelope, now_ms: u64) -> Result<(), FedletError> {
        if env.msg_type == MsgType::Control {
            return Err(FedletError::Handler("control envelopes go through the operator API".into()));
        }
        let directory = self.directory.clone();
        let dir = directory.read().expect("directory lock");
        self.guard.admit(env, &dir).map_err(FedletError::Rejected)?;
        let to = env.to.fed_id();
        if !self.owns(to) {
            return Err(FedletError::Misaddressed(to.clone()));
        }
        let now = now_ms / 1000;
        let from = &env.from;
        let handler = |e: &dyn std::fmt::Display| FedletError::Handler(e.to_string());
        match env.msg_type {
            MsgType::JoinRequest => {
                self.fedctl
                    .handle_join_request(env.decode()?, from, &dir, now)
                    .map_err(|e| handler(&e))?;
            }
            MsgType::JoinResponse => {
                let resp: JoinResponse = env.decode()?;
                if &resp.community_id != from {
                    return Err(FedletError::Handler("join response from a third party".into()));
                }
                self.fedctl.handle_join_response(resp, now);
            }
            MsgType::TokenUpdate => {
                let update: TokenUpdate = env.decode()?;
                self.fedctl.handle_token_update(update, from, now).map_err(|e| handler(&e))?;
            }
            MsgType::Leave => {
                let notice: LeaveNotice = env.decode()?;
                self.fedctl.handle_leave(notice, from, now).map_err(|e| handler(&e))?;
            }
            MsgType::LeaveAck => {
                let notice: LeaveNotice = env.decode()?;
                if &notice.community_id != from {
                    return Err(FedletError::Handler("leave ack from a third party".into()));
                }
                self.fedctl.handle_leave_ack(notice, now);
            }
            MsgType::DataRequest => {
                let req: DataRequest = env.decode()?;
                self.fedcore
                    .handle_data_request(req, from, to, &mut self.fedctl, &dir, now_ms);
            }
            MsgType::Sync => {
                let msg: SyncMessage = env.decode()?;
                self.fedcore.handle_sync(msg, from, &mut self.fedctl, now_ms);
            }
            MsgType::Notify => {
                let msg: NotifyMessage = env.decode()?;
                self.fedcore.handle_notify(msg, from, to, &self.fedctl);
            }
            MsgType::AggregateContribution => {
                let c: Contribution = env.decode()?;
                self.fedcore
                    .handle_contribution(c, from, &mut self.fedctl, &dir, now_ms);
            }
            MsgType::Control => unreachable!("handled above"),
        }
        Ok(())
    }

    /// Timers: token refresh, stale detection, bindings, view refresh, round deadlines.
    pub fn tick(&mut self, now_ms: u64) {
        let now = now_ms / 1000;
        self.fedctl.refresh_tokens(now);
        self.fedctl.detect_stale(now);
        self.settle(now_ms);
        {
            let directory = self.directory.clone();
            let dir = directory.read().expect("directory lock");
            self.fedcore.tick(&mut self.fedctl, &dir, now_ms);
        }
        let ids: Vec<String> = self.apps.keys().cloned().collect();
        for id in ids {
            if let Some(mut app) = self.apps.remove(&id) {
                let mut ctx = AppContext::new(&id, &mut self.fedcore, &mut self.fedctl, now_ms);
                app.on_tick(&mut ctx);
                self.apps.insert(id, app);
            }
        }
        self.settle(now_ms);
    }

    /// Forward membership changes to fedcore and apps, then run app handlers.
    fn settle(&mut self, now_ms: u64) {
        let events = self.fedctl.take_events();
        if !events.is_empty() {
            for e in events {
                self.fedcore.hub_mut().publish(AppEvent::Membership(e));
            }
            self.fedcore.on_membership(&self.fedctl, now_ms);
        }
        self.deliver(now_ms);
    }

    fn deliver(&mut self, now_ms: u64) {
        for _ in 0..APP_PASSES {
            let mut any = false;
            let ids: Vec<String> = self.apps.keys().cloned().collect();
            for id in ids {
                let events = self.fedcore.hub_mut().drain(&id);
                if events.is_empty() {
                    continue;
                }
                any = true;
                let mut app = self.apps.remove(&id).expect("listed app");
                for event in &events {
                    let mut ctx = AppContext::new(&id, &mut self.fedcore, &mut self.fedctl, now_ms);
                    app.on_event(event, &mut ctx);
                }
                self.apps.insert(id, app);
            }
            if !any {
                return;
            }
        }
        tracing::warn!(host = %self.host_id(), "apps still busy after {APP_PASSES} passes");
    }

    /// Everything queued for the network, signed and sequenced.
    pub fn take_outbox(&mut self) -> Vec<Envelope> {
        let mut out = self.fedctl.take_outbox();
        out.extend(self.fedcore.take_outbox());
        out.into_iter()
            .filter_map(|o| {
                let Some(key) = self.fedctl.keyring().key_for(&o.from) else {
                    tracing::warn!(from = %o.from, "no key to sign outbound {}", o.msg_type);
                    return None;
                };
                let seq = self.seq.next(&o.from, &o.to);
                Some(Envelope::seal(o, seq, key))
            })
            .collect()
    }

    /// The transport gave up on an envelope we sent.
    pub fn delivery_failed(&mut self, env: &Envelope, now_ms: u64) {
        self.fedctl.delivery_failed(env.msg_type, &env.to, now_ms / 1000);
        self.settle(now_ms);
    }

    /// Persist the ledger (as `ledger.yaml`) and the store under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), FedletError> {
        fs::create_dir_all(dir).map_err(|e| FedletError::Io(e.to_string()))?;
        fs::write(dir.join("ledger.yaml"), self.fedctl.ledger().to_yaml()).map_err(|e| FedletError::Io(e.to_string()))?;
        self.fedcore
            .save(&dir.join("store"))
            .map_err(|e| FedletError::Io(e.to_string()))
    }

    pub fn load(&mut self, dir: &Path) -> Result<(), FedletError> {
        let ledger = dir.join("ledger.yaml");
        if ledger.exists() {
            let text = fs::read_to_string(&ledger).map_err(|e| FedletError::Io(e.to_string()))?;
            let ledger = Ledger::from_yaml(&text).map_err(|e| FedletError::Io(e.to_string()))?;
            self.fedctl.restore(ledger);
        }
        let store = dir.join("store");
        if store.exists() {
            self.fedcore.load(&store).map_err(|e| FedletError::Io(e.to_string()))?;
        }
        Ok(())
    }
}
