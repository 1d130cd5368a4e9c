//! Control plane: membership ledgers, join/leave, token lifecycle, staleness and RBAC.
//!
//! Every operation is a synchronous transition on [`Fedctl`]. Messages to other
//! fedlets are queued in an outbox as unsigned [`Outgoing`] values; the owning
//! fedlet seals and ships them. State changes other components care about are
//! queued as [`MembershipEvent`]s.

pub mod acl;
pub mod ledger;
pub mod messages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use acl::{AclRule, DataPattern, Permission, Role};
pub use ledger::{CommunityEntry, Ledger, MemberEntry, MemberStatus, ShareStatus};
pub use messages::{CommunityInfo, JoinRequest, JoinResponse, JoinVerdict, LeaveNotice, TokenUpdate};

use crate::identity::{
    generate_token, FedId, IdentityError, Keyring, Nonce, Timestamp, TokenStatus, TokenValue,
    DEFAULT_TOKEN_TTL,
};
use crate::transport::{Address, KeyDirectory, MsgType, Outgoing, TransportError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FedctlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already a member of {0}")]
    AlreadyMember(FedId),
    #[error("delivery failure: {0}")]
    DeliveryFailure(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("this fedlet does not host a community")]
    NotHosting,
    #[error("share status cannot go from {from} to {to}")]
    InvalidTransition { from: ShareStatus, to: ShareStatus },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FedctlConfig {
    pub token_ttl: u64,
    /// How long past expiry before a silent member is marked stale. Defaults to one refresh period.
    pub grace: Option<u64>,
}

impl Default for FedctlConfig {
    fn default() -> Self {
        FedctlConfig {
            token_ttl: DEFAULT_TOKEN_TTL,
            grace: None,
        }
    }
}

impl FedctlConfig {
    /// Tokens are regenerated once they reach half their lifetime.
    pub fn refresh_period(&self) -> u64 {
        (self.token_ttl / 2).max(1)
    }

    pub fn grace(&self) -> u64 {
        self.grace.unwrap_or_else(|| self.refresh_period())
    }
}

/// Admin policy for incoming join requests. Unlisted requesters wait for a human.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinPolicy {
    #[serde(default)]
    pub allow: BTreeSet<FedId>,
    #[serde(default)]
    pub deny: BTreeSet<FedId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JoinDecision {
    Queued,
    AutoApproved,
    AutoDenied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedRequest {
    pub request: JoinRequest,
    pub received_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingJoin {
    pub community_id: FedId,
    pub community_address: Address,
    pub member_fed_id: FedId,
    pub requested_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: Timestamp,
    pub event: String,
}

/// A refused data access, surfaced to the operator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub at: Timestamp,
    pub principal: FedId,
    pub data_ref: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MembershipEvent {
    Member { member_id: FedId, status: MemberStatus },
    Community { community_id: FedId, status: ShareStatus },
    AclChanged { community_id: FedId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum DenyReason {
    Auth { token: TokenStatus },
    Paused,
    Revoked,
    NoGrant,
    UnknownCommunity,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::Auth { token } => write!(f, "auth ({token} token)"),
            DenyReason::Paused => f.write_str("paused"),
            DenyReason::Revoked => f.write_str("revoked"),
            DenyReason::NoGrant => f.write_str("no ACL grant"),
            DenyReason::UnknownCommunity => f.write_str("unknown community"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "kebab-case")]
pub enum AccessDecision {
    Allow,
    AllowAggregateOnly,
    Deny(DenyReason),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostedCommunity {
    pub community_id: FedId,
    pub name: String,
    pub address: Address,
    pub policy: JoinPolicy,
}

pub struct Fedctl {
    keyring: Keyring,
    name: String,
    address: Address,
    config: FedctlConfig,
    rng: ChaCha12Rng,
    hosted: Option<HostedCommunity>,
    members: BTreeMap<FedId, MemberEntry>,
    queue: BTreeMap<FedId, QueuedRequest>,
    communities: BTreeMap<FedId, CommunityEntry>,
    outstanding: BTreeMap<FedId, PendingJoin>,
    denials: BTreeMap<FedId, Timestamp>,
    leave_acks: BTreeSet<FedId>,
    audit: Vec<AuditRecord>,
    incidents: Vec<Incident>,
    outbox: Vec<Outgoing>,
    events: Vec<MembershipEvent>,
}

impl fmt::Debug for Fedctl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fedctl")
            .field("host", self.keyring.host_id())
            .field("communities", &self.communities.len())
            .field("members", &self.members.len())
            .finish_non_exhaustive()
    }
}

impl Fedctl {
    /// `address` is the host identity's address; its fed id must be the keyring host id.
    pub fn new(keyring: Keyring, name: impl Into<String>, address: Address, config: FedctlConfig, seed: u64) -> Self {
        debug_assert_eq!(address.fed_id(), keyring.host_id());
        Fedctl {
            keyring,
            name: name.into(),
            address,
            config,
            rng: ChaCha12Rng::seed_from_u64(seed),
            hosted: None,
            members: BTreeMap::new(),
            queue: BTreeMap::new(),
            communities: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            denials: BTreeMap::new(),
            leave_acks: BTreeSet::new(),
            audit: Vec::new(),
            incidents: Vec::new(),
            outbox: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Host a community under this fedlet's host id.
    pub fn host_community(&mut self, name: impl Into<String>, policy: JoinPolicy) {
        self.hosted = Some(HostedCommunity {
            community_id: self.keyring.host_id().clone(),
            name: name.into(),
            address: self.address.clone(),
            policy,
        });
    }

    pub fn set_join_policy(&mut self, policy: JoinPolicy) -> Result<(), FedctlError> {
        self.hosted.as_mut().ok_or(FedctlError::NotHosting)?.policy = policy;
        Ok(())
    }

    pub fn host_id(&self) -> &FedId {
        self.keyring.host_id()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn address(&self) -> &Address {
        &self.address
    }

    pub fn keyring(&self) -> &Keyring {
        &self.keyring
    }

    pub fn config(&self) -> &FedctlConfig {
        &self.config
    }

    pub fn hosted(&self) -> Option<&HostedCommunity> {
        self.hosted.as_ref()
    }

    pub fn members(&self) -> impl Iterator<Item = &MemberEntry> {
        self.members.values()
    }

    pub fn member(&self, id: &FedId) -> Option<&MemberEntry> {
        self.members.get(id)
    }

    pub fn active_members(&self) -> impl Iterator<Item = &MemberEntry> {
        self.members.values().filter(|m| m.status == MemberStatus::Active)
    }

    pub fn communities(&self) -> impl Iterator<Item = &CommunityEntry> {
        self.communities.values()
    }

    pub fn community(&self, id: &FedId) -> Option<&CommunityEntry> {
        self.communities.get(id)
    }

    /// The joined community a member identity of ours belongs to.
    pub fn community_for_member_id(&self, member_id: &FedId) -> Option<&CommunityEntry> {
        self.communities.values().find(|c| &c.member_fed_id == member_id)
    }

    pub fn queued_requests(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.queue.values()
    }

    pub fn outstanding(&self) -> impl Iterator<Item = &PendingJoin> {
        self.outstanding.values()
    }

    pub fn was_denied(&self, community: &FedId) -> bool {
        self.denials.contains_key(community)
    }

    /// Communities whose last answer to our join request was a denial.
    pub fn denials(&self) -> impl Iterator<Item = &FedId> {
        self.denials.keys()
    }

    pub fn leave_acknowledged(&self, community: &FedId) -> bool {
        self.leave_acks.contains(community)
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    pub fn record_incident(&mut self, at: Timestamp, principal: FedId, data_ref: impl Into<String>, reason: impl Into<String>) {
        self.incidents.push(Incident {
            at,
            principal,
            data_ref: data_ref.into(),
            reason: reason.into(),
        });
    }

    pub fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<MembershipEvent> {
        std::mem::take(&mut self.events)
    }

    fn audit(&mut self, at: Timestamp, event: impl Into<String>) {
        let event = event.into();
        tracing::debug!(host = %self.keyring.host_id(), at, %event, "audit");
        self.audit.push(AuditRecord { at, event });
    }

    fn send<T: Serialize>(&mut self, from: FedId, to: Address, msg_type: MsgType, body: &T) {
        self.outbox.push(Outgoing::json(from, to, msg_type, body));
    }

    fn member_address(&self, member_id: &FedId) -> Address {
        self.address.with_fed_id(member_id.clone())
    }

    fn fresh_token(&mut self, community_id: &FedId, now: Timestamp) -> crate::identity::AccessToken {
        let nonce = Nonce::random(&mut self.rng);
        generate_token(community_id, nonce, now, self.config.token_ttl).expect("configured ttl is positive")
    }

    // ---- member side ----

    /// Ask `community_id` for membership. No ledger entry exists until approval.
    pub fn request_join(
        &mut self,
        community_id: &FedId,
        community_address: &Address,
        directory: &mut KeyDirectory,
        now: Timestamp,
    ) -> Result<PendingJoin, FedctlError> {
        if community_address.fed_id() != community_id {
            return Err(FedctlError::InvalidArgument(format!(
                "{community_address} does not name {community_id}"
            )));
        }
        if community_id == self.keyring.host_id() {
            return Err(FedctlError::InvalidArgument("cannot join own community".into()));
        }
        if let Some(entry) = self.communities.get(community_id) {
            if entry.share_status != ShareStatus::Revoked {
                return Err(FedctlError::AlreadyMember(community_id.clone()));
            }
        }
        directory
            .resolve(community_address)
            .map_err(|e| FedctlError::DeliveryFailure(e.to_string()))?;
        let (member_id, key) = self.keyring.member_identity(community_id);
        let member_address = self.member_address(&member_id);
        directory.register(member_id.clone(), key.public_key(), member_address.clone())?;

        let request = JoinRequest::new(
            member_id.clone(),
            self.name.clone(),
            member_address,
            community_id.clone(),
            &key,
        );
        self.send(member_id.clone(), community_address.clone(), MsgType::JoinRequest, &request);
        let pending = PendingJoin {
            community_id: community_id.clone(),
            community_address: community_address.clone(),
            member_fed_id: member_id,
            requested_at: now,
        };
        self.outstanding.insert(community_id.clone(), pending.clone());
        self.audit(now, format!("join requested: {community_id}"));
        Ok(pending)
    }

    pub fn handle_join_response(&mut self, resp: JoinResponse, now: Timestamp) {
        let Some(pending) = self.outstanding.remove(&resp.community_id) else {
            self.audit(now, format!("ignored unsolicited join response from {}", resp.community_id));
            return;
        };
        match resp.verdict {
            JoinVerdict::Denied => {
                self.denials.insert(resp.community_id.clone(), now);
                self.audit(now, format!("join denied by {}", resp.community_id));
            }
            JoinVerdict::Approved => {
                let info = resp.community.unwrap_or(CommunityInfo {
                    community_id: resp.community_id.clone(),
                    name: resp.community_id.to_string(),
                    address: pending.community_address.clone(),
                });
                let token = self.fresh_token(&resp.community_id, now);
                let entry = CommunityEntry {
                    community_id: resp.community_id.clone(),
                    name: info.name,
                    address: pending.community_address.clone(),
                    share_status: ShareStatus::Active,
                    role: Role::empty(format!("{}-member", resp.community_id)),
                    issued_token: token.clone(),
                    member_fed_id: pending.member_fed_id.clone(),
                    previous_token: None,
                    undelivered: false,
                };
                self.communities.insert(resp.community_id.clone(), entry);
                self.denials.remove(&resp.community_id);
                self.leave_acks.remove(&resp.community_id);
                self.send(
                    pending.member_fed_id,
                    pending.community_address,
                    MsgType::TokenUpdate,
                    &TokenUpdate { token },
                );
                self.events.push(MembershipEvent::Community {
                    community_id: resp.community_id.clone(),
                    status: ShareStatus::Active,
                });
                self.audit(now, format!("joined {}", resp.community_id));
            }
        }
    }

    /// Regenerate and resend tokens that reached half their lifetime.
    pub fn refresh_tokens(&mut self, now: Timestamp) -> Vec<FedId> {
        let refresh_period = self.config.refresh_period();
        let due: Vec<FedId> = self
            .communities
            .values()
            .filter(|c| c.share_status == ShareStatus::Active)
            .filter(|c| c.undelivered || c.issued_token.age(now) >= refresh_period)
            .map(|c| c.community_id.clone())
            .collect();
        for id in &due {
            let regenerate = self.communities[id].issued_token.age(now) >= refresh_period;
            let token = if regenerate {
                let fresh = self.fresh_token(id, now);
                let entry = self.communities.get_mut(id).expect("due entry exists");
                entry.previous_token = Some(std::mem::replace(&mut entry.issued_token, fresh));
                entry.issued_token.clone()
            } else {
                self.communities[id].issued_token.clone()
            };
            let entry = self.communities.get_mut(id).expect("due entry exists");
            entry.undelivered = false;
            let (from, to) = (entry.member_fed_id.clone(), entry.address.clone());
            self.send(from, to, MsgType::TokenUpdate, &TokenUpdate { token });
        }
        due
    }

    /// The transport could not resolve the destination; retry on the next tick.
    pub fn delivery_failed(&mut self, out_msg_type: MsgType, to: &Address, now: Timestamp) {
        if out_msg_type == MsgType::TokenUpdate {
            if let Some(entry) = self.communities.get_mut(to.fed_id()) {
                entry.undelivered = true;
            }
        }
        self.audit(now, format!("delivery failed: {out_msg_type} to {to}"));
    }

    pub fn leave(&mut self, community_id: &FedId, now: Timestamp) -> Result<(), FedctlError> {
        let entry = self
            .communities
            .get_mut(community_id)
            .ok_or_else(|| FedctlError::NotFound(format!("community {community_id}")))?;
        entry.share_status = ShareStatus::Revoked;
        let notice = LeaveNotice {
            community_id: community_id.clone(),
            member_id: entry.member_fed_id.clone(),
        };
        let (from, to) = (entry.member_fed_id.clone(), entry.address.clone());
        self.leave_acks.remove(community_id);
        self.send(from, to, MsgType::Leave, &notice);
        self.events.push(MembershipEvent::Community {
            community_id: community_id.clone(),
            status: ShareStatus::Revoked,
        });
        self.audit(now, format!("left {community_id}"));
        Ok(())
    }

    pub fn handle_leave_ack(&mut self, notice: LeaveNotice, now: Timestamp) {
        self.leave_acks.insert(notice.community_id.clone());
        self.audit(now, format!("leave acknowledged by {}", notice.community_id));
    }

    pub fn set_share_status(&mut self, community_id: &FedId, status: ShareStatus, now: Timestamp) -> Result<(), FedctlError> {
        let entry = self
            .communities
            .get_mut(community_id)
            .ok_or_else(|| FedctlError::NotFound(format!("community {community_id}")))?;
        if entry.share_status == status {
            return Ok(());
        }
        if !entry.share_status.can_become(status) {
            return Err(FedctlError::InvalidTransition {
                from: entry.share_status,
                to: status,
            });
        }
        entry.share_status = status;
        self.events.push(MembershipEvent::Community {
            community_id: community_id.clone(),
            status,
        });
        self.audit(now, format!("share status for {community_id} -> {status}"));
        Ok(())
    }

    /// Replace the community role's ACL atomically.
    pub fn set_acl(&mut self, community_id: &FedId, rules: Vec<AclRule>) -> Result<(), FedctlError> {
        Role::validate_rules(&rules)?;
        let entry = self
            .communities
            .get_mut(community_id)
            .ok_or_else(|| FedctlError::NotFound(format!("community {community_id}")))?;
        entry.role.acl = rules;
        self.events.push(MembershipEvent::AclChanged {
            community_id: community_id.clone(),
        });
        Ok(())
    }

    pub fn authorize(&self, community_id: &FedId, data_ref: &str, token: &TokenValue, now: Timestamp) -> AccessDecision {
        let Some(entry) = self.communities.get(community_id) else {
            return AccessDecision::Deny(DenyReason::UnknownCommunity);
        };
        match entry.token_status(token, now) {
            TokenStatus::Valid => {}
            status => return AccessDecision::Deny(DenyReason::Auth { token: status }),
        }
        match entry.share_status {
            ShareStatus::Active => {}
            ShareStatus::Paused => return AccessDecision::Deny(DenyReason::Paused),
            ShareStatus::Revoked => return AccessDecision::Deny(DenyReason::Revoked),
        }
        match entry.role.permission_for(data_ref) {
            Permission::Read => AccessDecision::Allow,
            Permission::AggregateOnly => AccessDecision::AllowAggregateOnly,
            Permission::None => AccessDecision::Deny(DenyReason::NoGrant),
        }
    }

    /// What this fedlet would allow a joined community to do with `data_ref`, using our own current token.
    pub fn own_grant(&self, community_id: &FedId, data_ref: &str, now: Timestamp) -> AccessDecision {
        match self.communities.get(community_id) {
            Some(entry) => self.authorize(community_id, data_ref, &entry.issued_token.token, now),
            None => AccessDecision::Deny(DenyReason::UnknownCommunity),
        }
    }

    // ---- community side ----

    pub fn handle_join_request(
        &mut self,
        req: JoinRequest,
        sender: &FedId,
        directory: &KeyDirectory,
        now: Timestamp,
    ) -> Result<JoinDecision, FedctlError> {
        let hosted = self.hosted.as_ref().ok_or(FedctlError::NotHosting)?;
        let community_id = hosted.community_id.clone();
        let auth_failure = if &req.requester != sender {
            Some("envelope sender differs from requester")
        } else if req.community_id != community_id {
            Some("request names a different community")
        } else if directory.public_key(&req.requester) != Some(req.requester_key) {
            Some("requester key does not match directory")
        } else if req.requester_address.fed_id() != &req.requester {
            Some("requester address names another identity")
        } else if !req.verify() {
            Some("bad request signature")
        } else {
            None
        };
        if let Some(why) = auth_failure {
            self.audit(now, format!("dropped join request from {}: {why}", req.requester));
            return Err(FedctlError::Auth(why.into()));
        }

        let requester = req.requester.clone();
        if let Some(existing) = self.members.get(&requester) {
            if existing.status != MemberStatus::Left {
                // duplicate request from an admitted member: repeat the approval
                let resp = self.approval(&requester);
                let to = existing.address.clone();
                self.send(community_id, to, MsgType::JoinResponse, &resp);
                return Ok(JoinDecision::AutoApproved);
            }
        }

        let policy = &hosted.policy;
        let decision = if policy.deny.contains(&requester) {
            JoinDecision::AutoDenied
        } else if policy.allow.contains(&requester) {
            JoinDecision::AutoApproved
        } else {
            JoinDecision::Queued
        };
        self.queue.insert(
            requester.clone(),
            QueuedRequest {
                request: req,
                received_at: now,
            },
        );
        match decision {
            JoinDecision::Queued => self.audit(now, format!("join request from {requester} queued")),
            JoinDecision::AutoApproved => {
                self.approve_join(&requester, now)?;
            }
            JoinDecision::AutoDenied => self.deny_join(&requester, now)?,
        }
        Ok(decision)
    }

    fn approval(&self, member_id: &FedId) -> JoinResponse {
        let hosted = self.hosted.as_ref().expect("approval only while hosting");
        JoinResponse {
            community_id: hosted.community_id.clone(),
            member_id: member_id.clone(),
            verdict: JoinVerdict::Approved,
            community: Some(CommunityInfo {
                community_id: hosted.community_id.clone(),
                name: hosted.name.clone(),
                address: hosted.address.clone(),
            }),
        }
    }

    pub fn approve_join(&mut self, member_id: &FedId, now: Timestamp) -> Result<MemberEntry, FedctlError> {
        let community_id = self.hosted.as_ref().ok_or(FedctlError::NotHosting)?.community_id.clone();
        let queued = self
            .queue
            .remove(member_id)
            .ok_or_else(|| FedctlError::NotFound(format!("no queued request from {member_id}")))?;
        let req = queued.request;
        let entry = self
            .members
            .entry(member_id.clone())
            .and_modify(|m| {
                m.status = MemberStatus::Pending;
                m.name = req.requester_name.clone();
                m.address = req.requester_address.clone();
                m.received_token = None;
            })
            .or_insert_with(|| MemberEntry {
                member_id: member_id.clone(),
                name: req.requester_name.clone(),
                address: req.requester_address.clone(),
                status: MemberStatus::Pending,
                received_token: None,
                joined_at: now,
            })
            .clone();
        let resp = self.approval(member_id);
        self.send(community_id, req.requester_address, MsgType::JoinResponse, &resp);
        self.events.push(MembershipEvent::Member {
            member_id: member_id.clone(),
            status: MemberStatus::Pending,
        });
        self.audit(now, format!("approved {member_id}"));
        Ok(entry)
    }

    /// No state is kept for a denied requester.
    pub fn deny_join(&mut self, member_id: &FedId, now: Timestamp) -> Result<(), FedctlError> {
        let community_id = self.hosted.as_ref().ok_or(FedctlError::NotHosting)?.community_id.clone();
        let queued = self
            .queue
            .remove(member_id)
            .ok_or_else(|| FedctlError::NotFound(format!("no queued request from {member_id}")))?;
        let resp = JoinResponse {
            community_id: community_id.clone(),
            member_id: member_id.clone(),
            verdict: JoinVerdict::Denied,
            community: None,
        };
        self.send(community_id, queued.request.requester_address, MsgType::JoinResponse, &resp);
        self.audit(now, format!("denied {member_id}"));
        Ok(())
    }

    pub fn handle_token_update(&mut self, update: TokenUpdate, sender: &FedId, now: Timestamp) -> Result<(), FedctlError> {
        let community_id = self.hosted.as_ref().ok_or(FedctlError::NotHosting)?.community_id.clone();
        if update.token.community_id != community_id {
            return Err(FedctlError::InvalidArgument(format!(
                "token for {} sent to {community_id}",
                update.token.community_id
            )));
        }
        let Some(member) = self.members.get_mut(sender) else {
            self.audit(now, format!("token from non-member {sender} ignored"));
            return Err(FedctlError::NotFound(format!("member {sender}")));
        };
        if member.status == MemberStatus::Left {
            self.audit(now, format!("token from departed member {sender} ignored"));
            return Ok(());
        }
        member.received_token = Some(update.token);
        if member.status != MemberStatus::Active {
            member.status = MemberStatus::Active;
            self.events.push(MembershipEvent::Member {
                member_id: sender.clone(),
                status: MemberStatus::Active,
            });
        }
        Ok(())
    }

    /// Active members whose token expired at least one grace interval ago become stale.
    pub fn detect_stale(&mut self, now: Timestamp) -> Vec<FedId> {
        let grace = self.config.grace();
        let mut newly = Vec::new();
        for m in self.members.values_mut() {
            if m.status != MemberStatus::Active {
                continue;
            }
            let Some(token) = &m.received_token else { continue };
            if now >= token.expires_at.saturating_add(grace) {
                m.status = MemberStatus::Stale;
                newly.push(m.member_id.clone());
            }
        }
        for id in &newly {
            self.events.push(MembershipEvent::Member {
                member_id: id.clone(),
                status: MemberStatus::Stale,
            });
            self.audit(now, format!("member {id} marked stale"));
        }
        newly
    }

    pub fn handle_leave(&mut self, notice: LeaveNotice, sender: &FedId, now: Timestamp) -> Result<(), FedctlError> {
        let community_id = self.hosted.as_ref().ok_or(FedctlError::NotHosting)?.community_id.clone();
        if &notice.member_id != sender || notice.community_id != community_id {
            return Err(FedctlError::Auth("leave notice does not match sender".into()));
        }
        let member = self
            .members
            .get_mut(sender)
            .ok_or_else(|| FedctlError::NotFound(format!("member {sender}")))?;
        member.status = MemberStatus::Left;
        let to = member.address.clone();
        self.events.push(MembershipEvent::Member {
            member_id: sender.clone(),
            status: MemberStatus::Left,
        });
        self.send(community_id, to, MsgType::LeaveAck, &notice);
        self.audit(now, format!("member {sender} left"));
        Ok(())
    }

    // ---- persistence ----

    pub fn ledger(&self) -> Ledger {
        Ledger {
            communities: self.communities.values().cloned().collect(),
            members: self.members.values().cloned().collect(),
        }
    }

    pub fn restore(&mut self, ledger: Ledger) {
        self.communities = ledger
            .communities
            .into_iter()
            .map(|c| {
                // re-derive so the keyring can sign for restored member ids
                self.keyring.member_identity(&c.community_id);
                (c.community_id.clone(), c)
            })
            .collect();
        self.members = ledger.members.into_iter().map(|m| (m.member_id.clone(), m)).collect();
    }
}
