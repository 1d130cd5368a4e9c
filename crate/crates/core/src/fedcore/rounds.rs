//! Aggregation rounds, coordinated by the community's fedcore.
//!
//! A round runs in attempts. Each attempt fixes its participant set, and
//! masks are derived per attempt, so an attempt is released only when every
//! participant's contribution is in. A missing contribution at the deadline
//! aborts the attempt without touching the aggregate, and a new attempt
//! starts over the members that did contribute.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::messages::{Contribution, NotifyMessage, RoundGuard, RoundOpen, SyncMessage};
use super::notify::{AppEvent, ROUNDS_TOPIC};
use super::object::{Entries, ObjectRole, Value};
use super::toolkit::{aggregate_sum, decode_ring, ring_sum, Payload};
use super::{active_members, Fedcore, FedcoreError};
use crate::fedctl::{Fedctl, MemberStatus};
use crate::identity::FedId;
use crate::transport::{KeyDirectory, MsgType, Outgoing};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Receives the ring sum of the contributions.
    pub aggregate: String,
    /// Receives the decoded sum.
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

#[derive(Clone, Debug)]
pub(super) struct Attempt {
    round: u64,
    attempt: u32,
    participants: BTreeSet<FedId>,
    contributions: BTreeMap<FedId, Payload>,
    deadline_ms: u64,
    guard: Option<RoundGuard>,
}

#[derive(Clone, Debug)]
pub(super) struct RoundState {
    config: RoundConfig,
    round: u64,
    completed: u64,
    current: Option<Attempt>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStatus {
    pub aggregate: String,
    pub round: u64,
    pub completed_rounds: u64,
    pub attempt: Option<u32>,
    pub participants: Vec<FedId>,
    pub contributors: Vec<FedId>,
}

impl Fedcore {
    pub fn configure_round(&mut self, app: &str, config: RoundConfig) -> Result<(), FedcoreError> {
        for id in [&config.aggregate, &config.output] {
            match self.objects.get(id.as_str()) {
                Some(o) if o.role == ObjectRole::Aggregate => {}
                Some(o) => {
                    return Err(FedcoreError::InvalidArgument(format!(
                        "round object {id} must be an aggregate, not {}",
                        o.role
                    )))
                }
                None => return Err(FedcoreError::NotFound(format!("object {id}"))),
            }
        }
        if let Some(existing) = self.rounds.get(&config.aggregate) {
            if existing.config == config {
                return Ok(());
            }
            return Err(FedcoreError::InvalidArgument(format!(
                "round for {} already configured",
                config.aggregate
            )));
        }
        self.hub.subscribe(app, ROUNDS_TOPIC);
        self.rounds.insert(
            config.aggregate.clone(),
            RoundState {
                config,
                round: 0,
                completed: 0,
                current: None,
            },
        );
        Ok(())
    }

    pub fn remove_round(&mut self, aggregate: &str) -> bool {
        self.rounds.remove(aggregate).is_some()
    }

    pub fn round_status(&self, aggregate: &str) -> Option<RoundStatus> {
        let s = self.rounds.get(aggregate)?;
        Some(RoundStatus {
            aggregate: aggregate.into(),
            round: s.round,
            completed_rounds: s.completed,
            attempt: s.current.as_ref().map(|a| a.attempt),
            participants: s
                .current
                .as_ref()
                .map(|a| a.participants.iter().cloned().collect())
                .unwrap_or_default(),
            contributors: s
                .current
                .as_ref()
                .map(|a| a.contributions.keys().cloned().collect())
                .unwrap_or_default(),
        })
    }

    /// Start a new round over the currently active members.
    pub fn open_round(
        &mut self,
        aggregate: &str,
        guard: Option<RoundGuard>,
        fedctl: &Fedctl,
        now_ms: u64,
    ) -> Result<u64, FedcoreError> {
        let state = self
            .rounds
            .get_mut(aggregate)
            .ok_or_else(|| FedcoreError::NotFound(format!("round for {aggregate}")))?;
        if state.current.is_some() {
            return Err(FedcoreError::InvalidArgument(format!(
                "round {} of {aggregate} is still open",
                state.round
            )));
        }
        let participants = active_members(fedctl);
        if participants.is_empty() {
            return Err(FedcoreError::InvalidArgument("no active members to aggregate over".into()));
        }
        state.round += 1;
        let round = state.round;
        self.start_attempt(aggregate, round, 0, participants, guard, fedctl, now_ms);
        Ok(round)
    }

    #[allow(clippy::too_many_arguments)]
    fn start_attempt(
        &mut self,
        aggregate: &str,
        round: u64,
        attempt: u32,
        participants: BTreeSet<FedId>,
        guard: Option<RoundGuard>,
        fedctl: &Fedctl,
        now_ms: u64,
    ) {
        let timeout = self.rounds[aggregate]
            .config
            .timeout_ms
            .unwrap_or(self.config.round_timeout_ms);
        let open = RoundOpen {
            aggregate: aggregate.into(),
            round,
            attempt,
            participants: participants.iter().cloned().collect(),
            guard: guard.clone(),
        };
        if let Some(host) = fedctl.hosted() {
            for p in &participants {
                if let Some(m) = fedctl.member(p) {
                    self.outbox.push(Outgoing::json(
                        host.community_id.clone(),
                        m.address.clone(),
                        MsgType::Notify,
                        &NotifyMessage::RoundOpen(open.clone()),
                    ));
                }
            }
        }
        self.hub.publish(AppEvent::RoundOpened {
            aggregate: aggregate.into(),
            round,
            attempt,
            participants: open.participants.clone(),
        });
        let state = self.rounds.get_mut(aggregate).expect("configured");
        state.current = Some(Attempt {
            round,
            attempt,
            participants,
            contributions: BTreeMap::new(),
            deadline_ms: now_ms + timeout,
            guard,
        });
    }

    /// Abort the current attempt and retry over `next`, or give up on the round if `next` is empty.
    fn restart(&mut self, aggregate: &str, next: BTreeSet<FedId>, fedctl: &Fedctl, now_ms: u64) {
        let state = self.rounds.get_mut(aggregate).expect("configured");
        let Some(cur) = state.current.take() else { return };
        let missing: Vec<FedId> = cur
            .participants
            .iter()
            .filter(|p| !cur.contributions.contains_key(*p))
            .cloned()
            .collect();
        self.hub.publish(AppEvent::RoundAborted {
            aggregate: aggregate.into(),
            round: cur.round,
            attempt: cur.attempt,
            missing,
        });
        if next.is_empty() {
            self.warn(format!("round {} of {aggregate} abandoned: no participants left", cur.round));
            return;
        }
        self.start_attempt(aggregate, cur.round, cur.attempt + 1, next, cur.guard, fedctl, now_ms);
    }

    pub(super) fn expire_rounds(&mut self, fedctl: &Fedctl, now_ms: u64) {
        let expired: Vec<String> = self
            .rounds
            .iter()
            .filter(|(_, s)| s.current.as_ref().is_some_and(|a| a.deadline_ms <= now_ms))
            .map(|(id, _)| id.clone())
            .collect();
        let active = active_members(fedctl);
        for aggregate in expired {
            let cur = self.rounds[&aggregate].current.as_ref().expect("filtered");
            let contributed: BTreeSet<FedId> = cur
                .contributions
                .keys()
                .filter(|m| active.contains(*m))
                .cloned()
                .collect();
            let next = if contributed.is_empty() { active.clone() } else { contributed };
            self.restart(&aggregate, next, fedctl, now_ms);
        }
    }

    /// Participants that went stale or left are dropped at once rather than waiting for the timeout.
    pub(super) fn drop_lapsed_participants(&mut self, fedctl: &Fedctl, now_ms: u64) {
        let active = active_members(fedctl);
        let affected: Vec<(String, BTreeSet<FedId>)> = self
            .rounds
            .iter()
            .filter_map(|(id, s)| {
                let cur = s.current.as_ref()?;
                let keep: BTreeSet<FedId> = cur.participants.intersection(&active).cloned().collect();
                (keep.len() != cur.participants.len()).then(|| (id.clone(), keep))
            })
            .collect();
        for (aggregate, keep) in affected {
            self.restart(&aggregate, keep, fedctl, now_ms);
        }
    }

    /// Community side: accept one member's contribution.
    pub fn handle_contribution(
        &mut self,
        c: Contribution,
        from: &FedId,
        fedctl: &mut Fedctl,
        dir: &KeyDirectory,
        now_ms: u64,
    ) {
        let host = match fedctl.hosted() {
            Some(h) => h.community_id.clone(),
            None => return,
        };
        let refusal = match fedctl.member(from).map(|m| m.status) {
            None => Some("not a member".to_string()),
            Some(MemberStatus::Active) => None,
            Some(status) => Some(format!("member is {status}")),
        }
        .or_else(|| match self.rounds.get(&c.aggregate) {
            None => Some(format!("no aggregate {}", c.aggregate)),
            Some(_) => None,
        });
        if let Some(reason) = refusal {
            fedctl.record_incident(now_ms / 1000, from.clone(), c.aggregate.clone(), reason.clone());
            let msg = SyncMessage::Denied {
                request_id: None,
                target: c.aggregate,
                reason,
            };
            self.reply(&host, from, dir, &msg);
            return;
        }
        let state = self.rounds.get_mut(&c.aggregate).expect("checked");
        let Some(cur) = state.current.as_mut() else { return };
        if (cur.round, cur.attempt) != (c.round, c.attempt) || !cur.participants.contains(from) {
            return;
        }
        if let Some((_, first)) = cur.contributions.iter().next() {
            let compatible = first.dim() == c.payload.dim()
                && match (first, &c.payload) {
                    (Payload::Masked { encoding: a, .. }, Payload::Masked { encoding: b, .. }) => a == b,
                    (a, b) => !a.is_masked() && !b.is_masked(),
                };
            if !compatible {
                let reason = format!("contribution from {from} does not match the round's shape");
                self.warn(reason.clone());
                let msg = SyncMessage::Denied {
                    request_id: None,
                    target: c.aggregate,
                    reason,
                };
                self.reply(&host, from, dir, &msg);
                return;
            }
        }
        cur.contributions.entry(from.clone()).or_insert(c.payload);
        if cur.contributions.len() == cur.participants.len() {
            let aggregate = c.aggregate.clone();
            if let Err(e) = self.complete(&aggregate) {
                self.warn(format!("round of {aggregate} failed: {e}"));
                self.restart(&aggregate, BTreeSet::new(), fedctl, now_ms);
            }
        }
    }

    fn complete(&mut self, aggregate: &str) -> Result<(), FedcoreError> {
        let state = self.rounds.get_mut(aggregate).expect("configured");
        let cur = state.current.as_ref().expect("open attempt");
        let n = cur.contributions.len() as i64;
        let first = cur.contributions.values().next().expect("non-empty");
        let (agg_value, out_value) = match first {
            Payload::Masked { encoding, .. } => {
                let encoding = *encoding;
                let rings: Vec<(FedId, Vec<u64>)> = cur
                    .contributions
                    .iter()
                    .map(|(id, p)| match p {
                        Payload::Masked { ring, .. } => (id.clone(), ring.clone()),
                        _ => unreachable!("shape checked on arrival"),
                    })
                    .collect();
                let sum = ring_sum(&rings)?;
                (
                    Value::Ints(sum.iter().map(|&x| x as i64).collect()),
                    decode_ring(encoding, &sum),
                )
            }
            _ => {
                let dense: BTreeMap<FedId, Vec<f64>> = cur
                    .contributions
                    .iter()
                    .map(|(id, p)| {
                        p.dense_floats()
                            .map(|v| (id.clone(), v))
                            .ok_or_else(|| FedcoreError::InvalidArgument(format!("non-numeric contribution from {id}")))
                    })
                    .collect::<Result<_, _>>()?;
                let sum = Value::Floats(aggregate_sum(&dense)?);
                (sum.clone(), sum)
            }
        };
        let round = cur.round;
        let output = state.config.output.clone();
        state.current = None;
        state.completed += 1;
        let count = || ("count".to_string(), Value::Ints(vec![n]));
        let round_entry = || ("round".to_string(), Value::Ints(vec![round as i64]));
        self.put_object(aggregate, Entries::from([("value".into(), agg_value), count(), round_entry()]))?;
        self.put_object(&output, Entries::from([("value".into(), out_value), count(), round_entry()]))?;
        self.hub.publish(AppEvent::RoundCompleted {
            aggregate: aggregate.into(),
            round,
            contributors: n as usize,
        });
        Ok(())
    }

    /// Member side: a community announced a round attempt.
    pub fn handle_notify(&mut self, msg: NotifyMessage, from: &FedId, to: &FedId, fedctl: &Fedctl) {
        let NotifyMessage::RoundOpen(open) = msg;
        let ours = fedctl
            .community(from)
            .is_some_and(|c| &c.member_fed_id == to);
        if !ours {
            self.warn(format!("round announcement from {from}, which we have not joined"));
            return;
        }
        let key = (from.clone(), open.aggregate.clone());
        if let Some(known) = self.known_rounds.get(&key) {
            if (known.round, known.attempt) >= (open.round, open.attempt) {
                return;
            }
        }
        self.hub.publish(AppEvent::RoundOpened {
            aggregate: open.aggregate.clone(),
            round: open.round,
            attempt: open.attempt,
            participants: open.participants.clone(),
        });
        self.known_rounds.insert(key, open.clone());
        self.wake_pushes(from, &open.aggregate);
    }

    /// Latest round announced by `community` for `aggregate`.
    pub fn known_round(&self, community: &FedId, aggregate: &str) -> Option<&RoundOpen> {
        self.known_rounds.get(&(community.clone(), aggregate.to_string()))
    }
}
