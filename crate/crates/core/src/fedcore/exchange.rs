//! Sync bindings and the request/response side of the data plane.

use serde::{Deserialize, Serialize};

use super::messages::{Contribution, DataRequest, SyncMessage};
use super::notify::{AppEvent, RemoteReadResult};
use super::object::ObjectRole;
use super::toolkit::{MaskParams, Payload, TransformSpec, MASK};
use super::view::{member_partial, split_source};
use super::{Fedcore, FedcoreError, PendingRead, Principal};
use crate::fedctl::{AccessDecision, Fedctl, ShareStatus};
use crate::identity::FedId;
use crate::transport::{KeyDirectory, MsgType, Outgoing};

const MAX_PENDING: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Replace the local object with the remote one whenever it changes.
    Pull,
    /// Contribute the local object to the remote aggregate's open round.
    Push,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncBinding {
    pub binding_id: String,
    pub local_object: String,
    /// Community whose fedlet holds the remote object.
    pub remote: FedId,
    pub remote_object: String,
    pub direction: Direction,
    pub interval_ms: u64,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    /// Entry of the local object that is pushed.
    #[serde(default = "default_entry")]
    pub entry: String,
}

pub fn default_entry() -> String {
    "value".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "kebab-case")]
pub enum SyncOutcome {
    Sent,
    Skipped(String),
    Denied(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingStatus {
    pub binding: SyncBinding,
    pub app: String,
    pub last_outcome: Option<SyncOutcome>,
    pub last_remote_version: Option<u64>,
    /// (local version, round, attempt) of the last push.
    pub last_sent: Option<(u64, u64, u32)>,
}

#[derive(Clone, Debug)]
pub(super) struct BindingState {
    pub status: BindingStatus,
    pub next_due_ms: u64,
}

impl Fedcore {
    pub fn add_binding(&mut self, app: &str, binding: SyncBinding, now_ms: u64) -> Result<(), FedcoreError> {
        if binding.interval_ms == 0 {
            return Err(FedcoreError::InvalidArgument(format!(
                "binding {}: interval must be positive",
                binding.binding_id
            )));
        }
        if !self.objects.contains_key(&binding.local_object) {
            return Err(FedcoreError::NotFound(format!("object {}", binding.local_object)));
        }
        for t in &binding.transforms {
            if !self.transforms.contains(&t.name) {
                return Err(FedcoreError::InvalidArgument(format!("unknown transform {:?}", t.name)));
            }
        }
        if let Some(existing) = self.bindings.get(&binding.binding_id) {
            if existing.status.binding == binding {
                return Ok(());
            }
            return Err(FedcoreError::InvalidArgument(format!("binding {} already exists", binding.binding_id)));
        }
        self.bindings.insert(
            binding.binding_id.clone(),
            BindingState {
                status: BindingStatus {
                    binding,
                    app: app.into(),
                    last_outcome: None,
                    last_remote_version: None,
                    last_sent: None,
                },
                next_due_ms: now_ms,
            },
        );
        Ok(())
    }

    pub fn remove_binding(&mut self, binding_id: &str) -> bool {
        self.bindings.remove(binding_id).is_some()
    }

    pub fn bindings(&self) -> impl Iterator<Item = &BindingStatus> {
        self.bindings.values().map(|b| &b.status)
    }

    pub fn binding(&self, binding_id: &str) -> Option<&BindingStatus> {
        self.bindings.get(binding_id).map(|b| &b.status)
    }

    /// Make push bindings toward `community`'s aggregate run on the next tick.
    pub(super) fn wake_pushes(&mut self, community: &FedId, aggregate: &str) {
        for b in self.bindings.values_mut() {
            let s = &b.status.binding;
            if s.direction == Direction::Push && &s.remote == community && s.remote_object == aggregate {
                b.next_due_ms = 0;
            }
        }
    }

    pub(super) fn wake_local(&mut self, object_id: &str) {
        for b in self.bindings.values_mut() {
            if b.status.binding.direction == Direction::Push && b.status.binding.local_object == object_id {
                b.next_due_ms = 0;
            }
        }
    }

    /// Periodic work: due bindings, due views and round timeouts.
    pub fn tick(&mut self, fedctl: &mut Fedctl, dir: &KeyDirectory, now_ms: u64) {
        let due: Vec<String> = self
            .bindings
            .iter()
            .filter(|(_, b)| b.next_due_ms <= now_ms)
            .map(|(id, _)| id.clone())
            .collect();
        for id in due {
            if let Err(e) = self.sync_tick(&id, fedctl, dir, now_ms) {
                self.warn(format!("binding {id}: {e}"));
            }
        }
        self.request_view_partials(fedctl, now_ms);
        self.expire_rounds(fedctl, now_ms);
    }

    /// Run one binding now.
    pub fn sync_tick(
        &mut self,
        binding_id: &str,
        fedctl: &mut Fedctl,
        dir: &KeyDirectory,
        now_ms: u64,
    ) -> Result<SyncOutcome, FedcoreError> {
        let status = self
            .bindings
            .get(binding_id)
            .ok_or_else(|| FedcoreError::NotFound(format!("binding {binding_id}")))?
            .status
            .clone();
        let outcome = match status.binding.direction {
            Direction::Pull => self.pull(binding_id, &status, fedctl),
            Direction::Push => self.push(binding_id, &status, fedctl, dir, now_ms)?,
        };
        let repeated = self.bindings[binding_id].status.last_outcome.as_ref() == Some(&outcome);
        if let (SyncOutcome::Denied(reason), false) = (&outcome, repeated) {
            fedctl.record_incident(
                now_ms / 1000,
                status.binding.remote.clone(),
                status.binding.local_object.clone(),
                reason.clone(),
            );
        }
        let state = self.bindings.get_mut(binding_id).expect("present above");
        state.next_due_ms = now_ms + status.binding.interval_ms;
        state.status.last_outcome = Some(outcome.clone());
        Ok(outcome)
    }

    fn track(&mut self, kind: PendingRead) -> u64 {
        let id = self.next_request_id();
        self.pending.insert(id, kind);
        while self.pending.len() > MAX_PENDING {
            self.pending.pop_first();
        }
        id
    }

    fn pull(&mut self, binding_id: &str, status: &BindingStatus, fedctl: &Fedctl) -> SyncOutcome {
        let b = &status.binding;
        let Some(entry) = fedctl.community(&b.remote) else {
            return SyncOutcome::Skipped(format!("not a member of {}", b.remote));
        };
        if entry.share_status == ShareStatus::Revoked {
            return SyncOutcome::Skipped(format!("left {}", b.remote));
        }
        let (from, to) = (entry.member_fed_id.clone(), entry.address.clone());
        let request_id = self.track(PendingRead::Binding(binding_id.into()));
        let req = DataRequest::ObjectRead {
            request_id,
            object_id: b.remote_object.clone(),
            since_version: status.last_remote_version,
            token: None,
        };
        self.outbox.push(Outgoing::json(from, to, MsgType::DataRequest, &req));
        SyncOutcome::Sent
    }

    fn push(
        &mut self,
        binding_id: &str,
        status: &BindingStatus,
        fedctl: &Fedctl,
        dir: &KeyDirectory,
        now_ms: u64,
    ) -> Result<SyncOutcome, FedcoreError> {
        let b = &status.binding;
        let Some(entry) = fedctl.community(&b.remote) else {
            return Ok(SyncOutcome::Skipped(format!("not a member of {}", b.remote)));
        };
        match entry.share_status {
            ShareStatus::Active => {}
            s => return Ok(SyncOutcome::Denied(format!("sharing with {} is {s}", b.remote))),
        }
        let Some(obj) = self.objects.get(&b.local_object) else {
            return Ok(SyncOutcome::Skipped(format!("object {} missing", b.local_object)));
        };
        let masked = b.transforms.iter().any(|t| t.name == MASK);
        if obj.role == ObjectRole::Raw && !masked {
            return Ok(SyncOutcome::Denied(format!("raw object {} needs a mask transform", b.local_object)));
        }
        let grant = fedctl.own_grant(&b.remote, &b.local_object, now_ms / 1000);
        match grant {
            AccessDecision::Allow => {}
            AccessDecision::AllowAggregateOnly if masked => {}
            AccessDecision::AllowAggregateOnly => {
                return Ok(SyncOutcome::Denied("aggregate-only grant needs a masked push".into()))
            }
            AccessDecision::Deny(reason) => return Ok(SyncOutcome::Denied(reason.to_string())),
        }
        let Some(open) = self.known_rounds.get(&(b.remote.clone(), b.remote_object.clone())) else {
            return Ok(SyncOutcome::Skipped("no open round".into()));
        };
        let me = entry.member_fed_id.clone();
        if !open.participants.contains(&me) {
            return Ok(SyncOutcome::Skipped("not a participant in this round".into()));
        }
        if obj.version == 0 {
            return Ok(SyncOutcome::Skipped("nothing written yet".into()));
        }
        if let Some(guard) = &open.guard {
            if obj.entries.get(&guard.entry) != Some(&guard.value) {
                return Ok(SyncOutcome::Skipped(format!("{} does not match the round guard", guard.entry)));
            }
        }
        if let Some((version, round, attempt)) = status.last_sent {
            let same_attempt = (round, attempt) == (open.round, open.attempt);
            let stale_data = version == obj.version && round != open.round;
            if same_attempt || (stale_data && open.guard.is_none()) {
                return Ok(SyncOutcome::Skipped("already contributed".into()));
            }
        }
        let Some(value) = obj.entries.get(&b.entry).cloned() else {
            return Ok(SyncOutcome::Skipped(format!("entry {} missing", b.entry)));
        };
        let mut participants = Vec::with_capacity(open.participants.len());
        for p in &open.participants {
            let pk = dir
                .public_key(p)
                .ok_or_else(|| FedcoreError::NotFound(format!("directory key for {p}")))?;
            participants.push((p.clone(), pk));
        }
        let key = fedctl
            .keyring()
            .key_for(&me)
            .ok_or_else(|| FedcoreError::NotFound(format!("key for {me}")))?;
        let params = MaskParams {
            self_id: &me,
            key,
            participants: &participants,
            aggregate: &b.remote_object,
            round: open.round,
            attempt: open.attempt,
        };
        let payload = self.transforms.apply(&b.transforms, Payload::Plain { value }, Some(&params))?;
        let contribution = Contribution {
            aggregate: b.remote_object.clone(),
            round: open.round,
            attempt: open.attempt,
            payload,
        };
        let sent = (obj.version, open.round, open.attempt);
        let to = entry.address.clone();
        self.outbox
            .push(Outgoing::json(me, to, MsgType::AggregateContribution, &contribution));
        self.bindings.get_mut(binding_id).expect("present").status.last_sent = Some(sent);
        Ok(SyncOutcome::Sent)
    }

    /// Community side: ask every active member for fresh partials of due views.
    fn request_view_partials(&mut self, fedctl: &Fedctl, now_ms: u64) {
        let due: Vec<String> = self
            .views
            .iter()
            .filter(|(_, v)| v.next_due_ms <= now_ms)
            .map(|(id, _)| id.clone())
            .collect();
        let Some(hosted) = fedctl.hosted() else { return };
        let host = hosted.community_id.clone();
        for view_id in due {
            let spec = self.views[&view_id].spec.clone();
            let members: Vec<_> = fedctl
                .active_members()
                .filter_map(|m| m.received_token.as_ref().map(|t| (m.member_id.clone(), m.address.clone(), t.token)))
                .collect();
            for (member, address, token) in members {
                let request_id = self.track(PendingRead::View {
                    view_id: view_id.clone(),
                    member,
                });
                let req = DataRequest::ViewPartial {
                    request_id,
                    view_id: view_id.clone(),
                    source_refs: spec.source_refs.clone(),
                    filter: spec.filter.clone(),
                    transform: spec.transform.clone(),
                    token,
                };
                self.outbox.push(Outgoing::json(host.clone(), address, MsgType::DataRequest, &req));
            }
            self.views.get_mut(&view_id).expect("due view").next_due_ms = now_ms + spec.refresh_interval_ms;
        }
    }

    /// An app on the community fedlet reads a member object with the member's token.
    pub fn request_remote_read(
        &mut self,
        app: &str,
        member_id: &FedId,
        object_id: &str,
        fedctl: &Fedctl,
    ) -> Result<u64, FedcoreError> {
        let hosted = fedctl
            .hosted()
            .ok_or_else(|| FedcoreError::InvalidArgument("this fedlet hosts no community".into()))?;
        let member = fedctl
            .member(member_id)
            .ok_or_else(|| FedcoreError::NotFound(format!("member {member_id}")))?;
        let token = member
            .received_token
            .as_ref()
            .ok_or_else(|| FedcoreError::AccessDenied(format!("no token from {member_id}")))?
            .token;
        let (from, to) = (hosted.community_id.clone(), member.address.clone());
        let request_id = self.track(PendingRead::App(app.into()));
        let req = DataRequest::ObjectRead {
            request_id,
            object_id: object_id.into(),
            since_version: None,
            token: Some(token),
        };
        self.outbox.push(Outgoing::json(from, to, MsgType::DataRequest, &req));
        Ok(request_id)
    }

    pub(super) fn reply(&mut self, from: &FedId, to: &FedId, dir: &KeyDirectory, msg: &SyncMessage) {
        match dir.lookup(to) {
            Some(e) => {
                let addr = e.address.clone();
                self.outbox.push(Outgoing::json(from.clone(), addr, MsgType::Sync, msg));
            }
            None => self.warn(format!("cannot reply to unknown {to}")),
        }
    }

    /// Serve a `data-request` addressed to identity `to`.
    pub fn handle_data_request(
        &mut self,
        req: DataRequest,
        from: &FedId,
        to: &FedId,
        fedctl: &mut Fedctl,
        dir: &KeyDirectory,
        now_ms: u64,
    ) {
        let hosting_member = fedctl.hosted().is_some_and(|h| &h.community_id == to) && fedctl.member(from).is_some();
        let our_community = fedctl
            .community_for_member_id(to)
            .is_some_and(|c| &c.community_id == from);
        let reply = match req {
            DataRequest::ObjectRead {
                request_id,
                object_id,
                since_version,
                token,
            } => {
                let principal = if hosting_member {
                    Ok(Principal::Member { member_id: from.clone() })
                } else if our_community {
                    token
                        .map(|token| Principal::Community {
                            community_id: from.clone(),
                            token,
                        })
                        .ok_or_else(|| "token required".to_string())
                } else {
                    Err("unknown principal".to_string())
                };
                let result = principal.and_then(|p| {
                    self.get_object(&object_id, &p, fedctl, now_ms)
                        .map_err(|e| e.to_string())
                });
                match result {
                    Ok(snap) if Some(snap.version) == since_version => SyncMessage::Unchanged {
                        request_id,
                        object_id,
                        version: snap.version,
                    },
                    Ok(snapshot) => SyncMessage::Snapshot { request_id, snapshot },
                    Err(reason) => SyncMessage::Denied {
                        request_id: Some(request_id),
                        target: object_id,
                        reason,
                    },
                }
            }
            DataRequest::ViewPartial {
                request_id,
                view_id,
                source_refs,
                filter,
                transform,
                token,
            } => {
                let result = if our_community {
                    self.view_partials(from, &source_refs, &filter, &transform, &token, fedctl, now_ms)
                } else {
                    Err("unknown principal".to_string())
                };
                match result {
                    Ok(partials) => SyncMessage::Partial {
                        request_id,
                        view_id,
                        partials,
                    },
                    Err(reason) => SyncMessage::Denied {
                        request_id: Some(request_id),
                        target: view_id,
                        reason,
                    },
                }
            }
        };
        self.reply(to, from, dir, &reply);
    }

    #[allow(clippy::too_many_arguments)]
    fn view_partials(
        &mut self,
        community: &FedId,
        sources: &[String],
        filter: &[super::view::Condition],
        transform: &super::view::ViewTransform,
        token: &crate::identity::TokenValue,
        fedctl: &mut Fedctl,
        now_ms: u64,
    ) -> Result<Vec<Vec<f64>>, String> {
        let now = now_ms / 1000;
        let mut out = Vec::with_capacity(sources.len());
        for source in sources {
            let decision = fedctl.authorize(community, source, token, now);
            let allowed = matches!(decision, AccessDecision::Allow | AccessDecision::AllowAggregateOnly);
            self.accesses.push(super::AccessRecord {
                at_ms: now_ms,
                principal: format!("community:{community}"),
                object_id: source.clone(),
                role: None,
                allowed,
            });
            if let AccessDecision::Deny(reason) = decision {
                fedctl.record_incident(now, community.clone(), source.clone(), reason.to_string());
                return Err(reason.to_string());
            }
            let (table, column) = split_source(source).ok_or_else(|| format!("bad source {source:?}"))?;
            let table = self
                .tables
                .get(table)
                .ok_or_else(|| format!("no table {table}"))?;
            out.push(member_partial(table, column, filter, transform, &self.reducers).map_err(|e| e.to_string())?);
        }
        Ok(out)
    }

    /// Apply a `sync` reply.
    pub fn handle_sync(&mut self, msg: SyncMessage, from: &FedId, fedctl: &mut Fedctl, now_ms: u64) {
        let request_id = match &msg {
            SyncMessage::Snapshot { request_id, .. }
            | SyncMessage::Unchanged { request_id, .. }
            | SyncMessage::Partial { request_id, .. } => Some(*request_id),
            SyncMessage::Denied { request_id, .. } => *request_id,
        };
        let pending = request_id.and_then(|id| self.pending.remove(&id));
        match (pending, msg) {
            (Some(PendingRead::Binding(id)), SyncMessage::Snapshot { snapshot, .. }) => {
                let Some(state) = self.bindings.get(&id) else { return };
                let b = &state.status.binding;
                if &b.remote != from || b.remote_object != snapshot.object_id {
                    self.warn(format!("binding {id}: snapshot from unexpected source {from}"));
                    return;
                }
                let local = b.local_object.clone();
                if state.status.last_remote_version >= Some(snapshot.version) {
                    return;
                }
                match self.put_object(&local, snapshot.entries) {
                    Ok(_) => {
                        let state = self.bindings.get_mut(&id).expect("checked");
                        state.status.last_remote_version = Some(snapshot.version);
                    }
                    Err(e) => self.warn(format!("binding {id}: {e}")),
                }
            }
            (Some(PendingRead::Binding(id)), SyncMessage::Unchanged { version, .. }) => {
                if let Some(state) = self.bindings.get_mut(&id) {
                    state.status.last_remote_version = Some(version);
                }
            }
            (Some(PendingRead::Binding(id)), SyncMessage::Denied { reason, target, .. }) => {
                fedctl.record_incident(now_ms / 1000, from.clone(), target, reason.clone());
                if let Some(state) = self.bindings.get_mut(&id) {
                    state.status.last_outcome = Some(SyncOutcome::Denied(reason));
                }
            }
            (Some(PendingRead::App(app)), msg) => {
                let (request_id, result) = match msg {
                    SyncMessage::Snapshot { request_id, snapshot } => (request_id, RemoteReadResult::Snapshot { snapshot }),
                    SyncMessage::Unchanged {
                        request_id,
                        object_id,
                        version,
                    } => (request_id, RemoteReadResult::Unchanged { object_id, version }),
                    SyncMessage::Denied { request_id, reason, .. } => {
                        (request_id.unwrap_or(0), RemoteReadResult::Denied { reason })
                    }
                    SyncMessage::Partial { .. } => return,
                };
                self.hub.push(
                    &app,
                    AppEvent::RemoteRead {
                        request_id,
                        from: from.clone(),
                        result,
                    },
                );
            }
            (Some(PendingRead::View { view_id, member }), msg) if &member == from => {
                let Some(state) = self.views.get_mut(&view_id) else { return };
                match msg {
                    SyncMessage::Partial { partials, .. } if partials.len() == state.spec.source_refs.len() => {
                        state.partials.insert(member, partials);
                    }
                    SyncMessage::Denied { reason, .. } => {
                        state.partials.remove(&member);
                        self.warn(format!("view {view_id}: {member} refused: {reason}"));
                    }
                    _ => {
                        state.partials.remove(&member);
                    }
                }
                if let Err(e) = self.recompute_view(&view_id, fedctl) {
                    self.warn(format!("view {view_id}: {e}"));
                }
            }
            (None, SyncMessage::Denied { target, reason, .. }) => {
                // a refused contribution
                fedctl.record_incident(now_ms / 1000, from.clone(), target.clone(), reason.clone());
                for state in self.bindings.values_mut() {
                    let b = &state.status.binding;
                    if &b.remote == from && b.remote_object == target {
                        state.status.last_outcome = Some(SyncOutcome::Denied(reason.clone()));
                    }
                }
            }
            (_, other) => self.warn(format!("unsolicited sync message from {from}: {other:?}")),
        }
    }
}
