//! Data plane: objects, tables, materialized views, sync bindings, aggregation
//! rounds and access enforcement.
//!
//! Every read by a non-local principal goes through [`Fedcore::get_object`],
//! which consults fedctl each time. Raw objects are never returned to anyone
//! but the local fedlet; they leave only as masked aggregate contributions.

pub mod exchange;
pub mod messages;
pub mod notify;
pub mod object;
mod rounds;
pub mod table;
pub mod toolkit;
pub mod view;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exchange::{BindingStatus, Direction, SyncBinding, SyncOutcome};
pub use messages::{Contribution, DataRequest, NotifyMessage, RoundGuard, RoundOpen, SyncMessage};
pub use notify::{AppEvent, NotifyHub, RemoteReadResult, MEMBERSHIP_TOPIC, ROUNDS_TOPIC};
pub use object::{DataObject, Entries, ObjectRole, ObjectSnapshot, Value};
pub use rounds::{RoundConfig, RoundStatus};
pub use table::{Cell, Column, ColumnType, DataTable};
pub use toolkit::{Payload, TransformRegistry, TransformSpec};
pub use view::{ReducerRegistry, ViewSpec, ViewTransform};

use crate::appspec::Registration;
use crate::fedctl::{AccessDecision, Fedctl, MemberStatus};
use crate::identity::{FedId, TokenValue};
use crate::transport::Outgoing;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FedcoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("access denied: {0}")]
    AccessDenied(String),
    #[error("io: {0}")]
    Io(String),
}

impl FedcoreError {
    pub(crate) fn io(e: std::io::Error) -> Self {
        FedcoreError::Io(e.to_string())
    }
}

/// Who is asking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Principal {
    /// Code running on this fedlet: an app or the operator.
    Local { label: String },
    /// A community this fedlet belongs to, presenting the token we issued it.
    Community { community_id: FedId, token: TokenValue },
    /// A member of the community this fedlet hosts.
    Member { member_id: FedId },
}

impl Principal {
    pub fn local(label: &str) -> Self {
        Principal::Local { label: label.into() }
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Local { label } => write!(f, "local:{label}"),
            Principal::Community { community_id, .. } => write!(f, "community:{community_id}"),
            Principal::Member { member_id } => write!(f, "member:{member_id}"),
        }
    }
}

/// One attempted object read, kept for auditing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub at_ms: u64,
    pub principal: String,
    pub object_id: String,
    pub role: Option<ObjectRole>,
    pub allowed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FedcoreConfig {
    pub round_timeout_ms: u64,
}

impl Default for FedcoreConfig {
    fn default() -> Self {
        FedcoreConfig {
            round_timeout_ms: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewState {
    pub spec: ViewSpec,
    pub app: String,
    pub rows: Vec<Vec<Cell>>,
    pub version: u64,
    /// Latest partials per member, one per source ref.
    pub partials: BTreeMap<FedId, Vec<Vec<f64>>>,
    next_due_ms: u64,
}

#[derive(Debug, Clone)]
enum PendingRead {
    Binding(String),
    App(String),
    View { view_id: String, member: FedId },
}

pub struct Fedcore {
    owner: FedId,
    config: FedcoreConfig,
    objects: BTreeMap<String, DataObject>,
    tables: BTreeMap<String, DataTable>,
    views: BTreeMap<String, ViewState>,
    bindings: BTreeMap<String, exchange::BindingState>,
    rounds: BTreeMap<String, rounds::RoundState>,
    known_rounds: BTreeMap<(FedId, String), RoundOpen>,
    transforms: TransformRegistry,
    reducers: ReducerRegistry,
    hub: NotifyHub,
    outbox: Vec<Outgoing>,
    next_request: u64,
    pending: BTreeMap<u64, PendingRead>,
    accesses: Vec<AccessRecord>,
    warnings: Vec<String>,
    apps: BTreeMap<String, Registration>,
}

impl fmt::Debug for Fedcore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fedcore")
            .field("owner", &self.owner)
            .field("objects", &self.objects.len())
            .field("views", &self.views.len())
            .field("bindings", &self.bindings.len())
            .finish_non_exhaustive()
    }
}

impl Fedcore {
    pub fn new(owner: FedId, config: FedcoreConfig) -> Self {
        Fedcore {
            owner,
            config,
            objects: BTreeMap::new(),
            tables: BTreeMap::new(),
            views: BTreeMap::new(),
            bindings: BTreeMap::new(),
            rounds: BTreeMap::new(),
            known_rounds: BTreeMap::new(),
            transforms: TransformRegistry::standard(),
            reducers: ReducerRegistry::default(),
            hub: NotifyHub::default(),
            outbox: Vec::new(),
            next_request: 1,
            pending: BTreeMap::new(),
            accesses: Vec::new(),
            warnings: Vec::new(),
            apps: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &FedId {
        &self.owner
    }

    pub fn config(&self) -> &FedcoreConfig {
        &self.config
    }

    pub fn transforms(&self) -> &TransformRegistry {
        &self.transforms
    }

    pub fn transforms_mut(&mut self) -> &mut TransformRegistry {
        &mut self.transforms
    }

    pub fn reducers(&self) -> &ReducerRegistry {
        &self.reducers
    }

    pub fn reducers_mut(&mut self) -> &mut ReducerRegistry {
        &mut self.reducers
    }

    pub fn hub(&self) -> &NotifyHub {
        &self.hub
    }

    pub fn hub_mut(&mut self) -> &mut NotifyHub {
        &mut self.hub
    }

    pub fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn access_log(&self) -> &[AccessRecord] {
        &self.accesses
    }

    /// Apps instantiated from a spec, by app id.
    pub fn registrations(&self) -> impl Iterator<Item = &Registration> {
        self.apps.values()
    }

    pub fn registration(&self, app_id: &str) -> Option<&Registration> {
        self.apps.get(app_id)
    }

    pub(crate) fn set_registration(&mut self, reg: Option<Registration>, app_id: &str) {
        match reg {
            Some(r) => self.apps.insert(app_id.to_string(), r),
            None => self.apps.remove(app_id),
        };
    }

    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    fn warn(&mut self, msg: String) {
        tracing::warn!(owner = %self.owner, "{msg}");
        self.warnings.push(msg);
    }

    fn next_request_id(&mut self) -> u64 {
        let id = self.next_request;
        self.next_request += 1;
        id
    }

    // ---- objects ----

    /// Create an empty object at version 0. Re-creating with the same role is a no-op.
    pub fn create_object(&mut self, object_id: &str, role: ObjectRole) -> Result<(), FedcoreError> {
        if let Some(existing) = self.objects.get(object_id) {
            if existing.role == role {
                return Ok(());
            }
            return Err(FedcoreError::InvalidArgument(format!(
                "object {object_id} already exists as {}",
                existing.role
            )));
        }
        let obj = DataObject::new(object_id, role, self.owner.clone())?;
        self.objects.insert(object_id.into(), obj);
        Ok(())
    }

    pub fn remove_object(&mut self, object_id: &str) -> Option<DataObject> {
        self.objects.remove(object_id)
    }

    pub fn contains_object(&self, object_id: &str) -> bool {
        self.objects.contains_key(object_id)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &str> {
        self.objects.keys().map(String::as_str)
    }

    pub fn objects(&self) -> impl Iterator<Item = &DataObject> {
        self.objects.values()
    }

    /// Owner write: replaces all entries. Unknown ids are created as raw objects.
    pub fn put_object(&mut self, object_id: &str, entries: Entries) -> Result<u64, FedcoreError> {
        if !self.objects.contains_key(object_id) {
            self.create_object(object_id, ObjectRole::Raw)?;
        }
        let obj = self.objects.get_mut(object_id).expect("just ensured");
        let version = obj.replace(entries)?;
        self.wake_local(object_id);
        self.hub.publish(AppEvent::ObjectChanged {
            object_id: object_id.into(),
            version,
        });
        Ok(version)
    }

    /// Read with authorization. Local principals read anything.
    pub fn get_object(
        &mut self,
        object_id: &str,
        principal: &Principal,
        fedctl: &mut Fedctl,
        now_ms: u64,
    ) -> Result<ObjectSnapshot, FedcoreError> {
        let role = self.objects.get(object_id).map(|o| o.role);
        let verdict = match role {
            None => Err(FedcoreError::NotFound(format!("object {object_id}"))),
            Some(role) => check_access(object_id, role, principal, fedctl, now_ms / 1000),
        };
        self.accesses.push(AccessRecord {
            at_ms: now_ms,
            principal: principal.to_string(),
            object_id: object_id.into(),
            role,
            allowed: verdict.is_ok(),
        });
        if let Err(FedcoreError::AccessDenied(reason)) = &verdict {
            let who = match principal {
                Principal::Community { community_id, .. } => Some(community_id.clone()),
                Principal::Member { member_id } => Some(member_id.clone()),
                Principal::Local { .. } => None,
            };
            if let Some(who) = who {
                fedctl.record_incident(now_ms / 1000, who, object_id, reason.clone());
            }
        }
        verdict?;
        Ok(self.objects[object_id].snapshot())
    }

    /// Local read without logging, for internal plumbing and tests.
    pub fn object(&self, object_id: &str) -> Option<&DataObject> {
        self.objects.get(object_id)
    }

    // ---- tables ----

    pub fn create_table(&mut self, table: DataTable) -> Result<(), FedcoreError> {
        if let Some(existing) = self.tables.get(&table.table_id) {
            if existing.schema == table.schema {
                return Ok(());
            }
            return Err(FedcoreError::InvalidArgument(format!(
                "table {} exists with a different schema",
                table.table_id
            )));
        }
        self.tables.insert(table.table_id.clone(), table);
        Ok(())
    }

    pub fn remove_table(&mut self, table_id: &str) -> Option<DataTable> {
        self.tables.remove(table_id)
    }

    pub fn table(&self, table_id: &str) -> Option<&DataTable> {
        self.tables.get(table_id)
    }

    pub fn tables(&self) -> impl Iterator<Item = &DataTable> {
        self.tables.values()
    }

    pub fn insert_row(&mut self, table_id: &str, row: Vec<Cell>) -> Result<u64, FedcoreError> {
        self.tables
            .get_mut(table_id)
            .ok_or_else(|| FedcoreError::NotFound(format!("table {table_id}")))?
            .insert(row)
    }

    pub fn replace_rows(&mut self, table_id: &str, rows: Vec<Vec<Cell>>) -> Result<u64, FedcoreError> {
        self.tables
            .get_mut(table_id)
            .ok_or_else(|| FedcoreError::NotFound(format!("table {table_id}")))?
            .replace_rows(rows)
    }

    // ---- views ----

    pub fn define_view(&mut self, app: &str, spec: ViewSpec, now_ms: u64) -> Result<(), FedcoreError> {
        let errs = spec.validate(&self.reducers);
        if !errs.is_empty() {
            return Err(FedcoreError::InvalidArgument(errs.join("; ")));
        }
        if let Some(existing) = self.views.get(&spec.view_id) {
            if existing.spec == spec {
                return Ok(());
            }
            return Err(FedcoreError::InvalidArgument(format!("view {} already defined", spec.view_id)));
        }
        self.hub.subscribe(app, &spec.view_id);
        self.views.insert(
            spec.view_id.clone(),
            ViewState {
                spec,
                app: app.into(),
                rows: Vec::new(),
                version: 0,
                partials: BTreeMap::new(),
                next_due_ms: now_ms,
            },
        );
        Ok(())
    }

    pub fn remove_view(&mut self, view_id: &str) -> Option<ViewState> {
        self.views.remove(view_id)
    }

    pub fn view(&self, view_id: &str) -> Option<&ViewState> {
        self.views.get(view_id)
    }

    /// Recompute from the partials of currently active members; returns the number of rows that changed.
    /// Fresh partials are requested on the next tick.
    pub fn refresh_view(&mut self, view_id: &str, fedctl: &Fedctl, now_ms: u64) -> Result<usize, FedcoreError> {
        let state = self
            .views
            .get_mut(view_id)
            .ok_or_else(|| FedcoreError::NotFound(format!("view {view_id}")))?;
        state.next_due_ms = now_ms;
        self.recompute_view(view_id, fedctl)
    }

    fn recompute_view(&mut self, view_id: &str, fedctl: &Fedctl) -> Result<usize, FedcoreError> {
        let state = self.views.get(view_id).expect("caller checked");
        let eligible: BTreeMap<FedId, Vec<Vec<f64>>> = state
            .partials
            .iter()
            .filter(|(m, _)| fedctl.member(m).is_some_and(|e| e.status == MemberStatus::Active))
            .map(|(m, p)| (m.clone(), p.clone()))
            .collect();
        let rows = view::combine_rows(&state.spec, &eligible, &self.reducers)?;
        if eligible.is_empty() {
            self.warn(format!("view {view_id} has no authorized sources"));
        }
        let state = self.views.get_mut(view_id).expect("caller checked");
        let changed = rows_changed(&state.rows, &rows);
        if changed > 0 {
            state.rows = rows;
            state.version += 1;
            let version = state.version;
            self.hub.publish(AppEvent::ViewChanged {
                view_id: view_id.into(),
                version,
            });
        }
        Ok(changed)
    }

    /// React to fedctl membership changes: lapsed members leave views and rounds.
    pub fn on_membership(&mut self, fedctl: &Fedctl, now_ms: u64) {
        let ids: Vec<String> = self.views.keys().cloned().collect();
        for id in ids {
            if let Err(e) = self.recompute_view(&id, fedctl) {
                self.warn(format!("view {id}: {e}"));
            }
        }
        self.drop_lapsed_participants(fedctl, now_ms);
    }

    // ---- persistence ----

    /// Write every object and table under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), FedcoreError> {
        let objects = dir.join("objects");
        let tables = dir.join("tables");
        std::fs::create_dir_all(&objects).map_err(FedcoreError::io)?;
        std::fs::create_dir_all(&tables).map_err(FedcoreError::io)?;
        for o in self.objects.values() {
            o.save(&objects)?;
        }
        for t in self.tables.values() {
            t.save(&tables)?;
        }
        Ok(())
    }

    /// Load objects and tables saved by [`Fedcore::save`], replacing in-memory copies.
    pub fn load(&mut self, dir: &Path) -> Result<(), FedcoreError> {
        let read_dir = |sub: &str| -> Result<Vec<std::path::PathBuf>, FedcoreError> {
            let path = dir.join(sub);
            if !path.exists() {
                return Ok(Vec::new());
            }
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(FedcoreError::io)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            Ok(files)
        };
        for f in read_dir("objects")? {
            if f.extension().is_some_and(|e| e == "obj") {
                let text = std::fs::read_to_string(&f).map_err(FedcoreError::io)?;
                let obj = DataObject::from_text(&text)?;
                if let Some(existing) = self.objects.get(&obj.object_id) {
                    if existing.version > obj.version {
                        return Err(FedcoreError::InvalidArgument(format!(
                            "{} on disk is older than memory",
                            obj.object_id
                        )));
                    }
                }
                self.objects.insert(obj.object_id.clone(), obj);
            }
        }
        for f in read_dir("tables")? {
            if f.extension().is_some_and(|e| e == "csv") {
                let id = f
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| FedcoreError::InvalidArgument("bad table file name".into()))?
                    .replace('~', "/");
                let t = DataTable::load(f.parent().expect("file in dir"), &id)?;
                self.tables.insert(id, t);
            }
        }
        Ok(())
    }
}

fn rows_changed(old: &[Vec<Cell>], new: &[Vec<Cell>]) -> usize {
    let common = old.len().min(new.len());
    let differing = (0..common).filter(|&i| old[i] != new[i]).count();
    differing + old.len().max(new.len()) - common
}

fn check_access(
    object_id: &str,
    role: ObjectRole,
    principal: &Principal,
    fedctl: &Fedctl,
    now: u64,
) -> Result<(), FedcoreError> {
    let deny = |why: String| Err(FedcoreError::AccessDenied(why));
    match principal {
        Principal::Local { .. } => Ok(()),
        _ if role == ObjectRole::Raw => deny("raw data never leaves its fedlet".into()),
        Principal::Member { member_id } => match fedctl.member(member_id) {
            Some(m) if m.status == MemberStatus::Active => Ok(()),
            Some(m) => deny(format!("member is {}", m.status)),
            None => deny("not a member".into()),
        },
        Principal::Community { community_id, token } => match fedctl.authorize(community_id, object_id, token, now) {
            AccessDecision::Allow => Ok(()),
            AccessDecision::AllowAggregateOnly if role == ObjectRole::Aggregate => Ok(()),
            AccessDecision::AllowAggregateOnly => deny("aggregate-only access".into()),
            AccessDecision::Deny(reason) => deny(reason.to_string()),
        },
    }
}

/// Members currently eligible for rounds and views.
pub(crate) fn active_members(fedctl: &Fedctl) -> BTreeSet<FedId> {
    fedctl.active_members().map(|m| m.member_id.clone()).collect()
}
