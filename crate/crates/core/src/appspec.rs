//! Declarative app specifications.
//!
//! A spec names the objects, tables, views, bindings and transforms an app
//! needs. Ids in the document are app-local; on instantiation they are
//! stored as `{app_id}/{id}`. See `SPEC_FORMAT.md` for the document layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use semver::Version;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::fedcore::{
    Column, DataTable, Direction, Fedcore, FedcoreError, ObjectRole, ReducerRegistry, RoundConfig, SyncBinding,
    TransformRegistry, TransformSpec, ViewSpec, ViewTransform,
};
use crate::fedctl::Fedctl;
use crate::identity::FedId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppSpecError {
    #[error("malformed spec: {0}")]
    Parse(String),
    #[error("{} violation(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("instantiation failed: {0}")]
    Instantiation(String),
}

/// Which side of a parent/child deployment an item lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Parent,
    Child,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDecl {
    pub id: String,
    pub role: ObjectRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeRole>,
    /// Subscribe the app to changes of this object.
    #[serde(default, skip_serializing_if = "is_false")]
    pub notify: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDecl {
    pub table_id: String,
    pub schema: Vec<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeRole>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDecl {
    #[serde(flatten)]
    pub spec: ViewSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeRole>,
}

/// Always lives on the child; `remote` is an object of the parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingDecl {
    pub binding_id: String,
    pub local: String,
    pub remote: String,
    pub direction: Direction,
    pub interval_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rounds: Vec<RoundConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub app_id: String,
    #[serde(with = "version_str")]
    pub version: Version,
    #[serde(default)]
    pub objects: Vec<ObjectDecl>,
    #[serde(default)]
    pub tables: Vec<TableDecl>,
    #[serde(default)]
    pub views: Vec<ViewDecl>,
    #[serde(default)]
    pub bindings: Vec<BindingDecl>,
    /// Object id → ordered push transforms.
    #[serde(default, deserialize_with = "transform_map")]
    pub transforms: BTreeMap<String, Vec<TransformSpec>>,
    #[serde(default)]
    pub policy: UpdatePolicy,
}

fn is_false(b: &bool) -> bool {
    !*b
}

mod version_str {
    use semver::Version;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Version, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Version, D::Error> {
        // a bare `1.0` would come through as a float, so take any scalar
        let raw = serde_yaml::Value::deserialize(d)?;
        let text = match raw {
            serde_yaml::Value::String(s) => s,
            other => serde_yaml::to_string(&other).unwrap_or_default().trim().to_string(),
        };
        Version::parse(&text).map_err(|e| serde::de::Error::custom(format!("bad version {text:?}: {e}")))
    }
}

/// Transform lists accept a bare name or `{name, k}`.
fn transform_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Vec<TransformSpec>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Name(String),
        Spec(TransformSpec),
    }
    let raw: BTreeMap<String, Vec<Entry>> = BTreeMap::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| {
            let chain = v
                .into_iter()
                .map(|e| match e {
                    Entry::Name(n) => TransformSpec::named(&n),
                    Entry::Spec(s) => s,
                })
                .collect();
            (k, chain)
        })
        .collect())
}

/// Parse and validate with the standard toolkit and no custom reducers.
pub fn load_spec(document: &str) -> Result<AppSpec, AppSpecError> {
    load_spec_with(document, &TransformRegistry::standard(), &ReducerRegistry::default())
}

pub fn load_spec_with(
    document: &str,
    transforms: &TransformRegistry,
    reducers: &ReducerRegistry,
) -> Result<AppSpec, AppSpecError> {
    let value: serde_yaml::Value = serde_yaml::from_str(document).map_err(|e| AppSpecError::Parse(e.to_string()))?;
    // a bad version string is a violation like the others, not a parse failure
    let mut violations = Vec::new();
    let mut value = value;
    if let Some(map) = value.as_mapping_mut() {
        if let Some(v) = map.get("version") {
            let text = match v {
                serde_yaml::Value::String(s) => s.clone(),
                other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
            };
            if Version::parse(&text).is_err() {
                violations.push(format!("version {text:?} is not major.minor.patch"));
                map.insert("version".into(), "0.0.0".into());
            }
        }
    }
    let spec: AppSpec = serde_yaml::from_value(value).map_err(|e| AppSpecError::Parse(e.to_string()))?;
    violations.extend(spec.violations(transforms, reducers));
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(AppSpecError::Validation(violations))
    }
}

fn valid_id(s: &str) -> bool {
    crate::fedctl::acl::parse_data_ref(s).is_some()
}

fn dup_check<'a>(kind: &str, ids: impl Iterator<Item = &'a str>, out: &mut Vec<String>) {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !valid_id(id) {
            out.push(format!("{kind} id {id:?} must be slash-separated [A-Za-z0-9._-] segments"));
        }
        if !seen.insert(id) {
            out.push(format!("{kind} {id} declared twice"));
        }
    }
}

impl AppSpec {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("spec serializes")
    }

    pub fn object(&self, id: &str) -> Option<&ObjectDecl> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Every violated invariant, in document order.
    pub fn violations(&self, transforms: &TransformRegistry, reducers: &ReducerRegistry) -> Vec<String> {
        let mut out = Vec::new();
        if self.app_id.is_empty() || self.app_id.contains('/') || !valid_id(&self.app_id) {
            out.push(format!("app_id {:?} must be one [A-Za-z0-9._-] segment", self.app_id));
        }
        dup_check("object", self.objects.iter().map(|o| o.id.as_str()), &mut out);
        dup_check("table", self.tables.iter().map(|t| t.table_id.as_str()), &mut out);
        dup_check("view", self.views.iter().map(|v| v.spec.view_id.as_str()), &mut out);
        dup_check("binding", self.bindings.iter().map(|b| b.binding_id.as_str()), &mut out);

        for t in &self.tables {
            if let Err(e) = DataTable::new("t", t.schema.clone()) {
                out.push(format!("table {}: {}", t.table_id, e));
            }
        }

        for b in &self.bindings {
            let local = self.object(&b.local);
            let remote = self.object(&b.remote);
            if local.is_none() {
                out.push(format!("binding {}: local object {} is not declared", b.binding_id, b.local));
            }
            if remote.is_none() {
                out.push(format!("binding {}: remote object {} is not declared", b.binding_id, b.remote));
            }
            if b.interval_ms == 0 {
                out.push(format!("binding {}: interval_ms must be positive", b.binding_id));
            }
            match (b.direction, local, remote) {
                (Direction::Push, Some(l), _) if l.role == ObjectRole::Aggregate => out.push(format!(
                    "binding {}: aggregate object {} cannot be a push source",
                    b.binding_id, l.id
                )),
                (Direction::Push, _, Some(r)) if r.role != ObjectRole::Aggregate => out.push(format!(
                    "binding {}: push target {} must be an aggregate",
                    b.binding_id, r.id
                )),
                (Direction::Pull, _, Some(r)) if r.role == ObjectRole::Raw => out.push(format!(
                    "binding {}: raw object {} cannot be pulled",
                    b.binding_id, r.id
                )),
                (Direction::Pull, Some(l), _) if l.role != ObjectRole::State => out.push(format!(
                    "binding {}: pull destination {} must be a state object",
                    b.binding_id, l.id
                )),
                _ => {}
            }
        }

        for (obj, chain) in &self.transforms {
            match self.object(obj) {
                None => out.push(format!("transforms: object {obj} is not declared")),
                Some(o) if o.role == ObjectRole::Aggregate => {
                    out.push(format!("transforms: aggregate object {obj} is never pushed"))
                }
                _ => {}
            }
            for t in chain {
                if !transforms.contains(&t.name) {
                    out.push(format!("transforms: unknown transform {:?} on {obj}", t.name));
                }
                if t.name == crate::fedcore::toolkit::TOPK && !matches!(t.k, Some(k) if k > 0) {
                    out.push(format!("transforms: topk on {obj} needs k > 0"));
                }
            }
        }

        for v in &self.views {
            out.extend(v.spec.validate(reducers));
            for s in &v.spec.source_refs {
                let Some((table, column)) = crate::fedcore::view::split_source(s) else { continue };
                match self.tables.iter().find(|t| t.table_id == table) {
                    None => out.push(format!("view {}: source table {table} is not declared", v.spec.view_id)),
                    Some(t) => match t.schema.iter().find(|c| c.name == column) {
                        None => out.push(format!("view {}: table {table} has no column {column}", v.spec.view_id)),
                        Some(c) if !c.ty.is_numeric() && v.spec.transform != ViewTransform::Count => {
                            out.push(format!("view {}: column {s} is not numeric", v.spec.view_id))
                        }
                        _ => {}
                    },
                }
            }
        }

        let mut aggregates = BTreeSet::new();
        for r in &self.policy.rounds {
            for id in [&r.aggregate, &r.output] {
                match self.object(id) {
                    None => out.push(format!("round on {}: object {id} is not declared", r.aggregate)),
                    Some(o) if o.role != ObjectRole::Aggregate => {
                        out.push(format!("round on {}: {id} must be an aggregate", r.aggregate))
                    }
                    _ => {}
                }
            }
            if r.aggregate == r.output {
                out.push(format!("round on {}: output must differ from the aggregate", r.aggregate));
            }
            if !aggregates.insert(&r.aggregate) {
                out.push(format!("round on {} declared twice", r.aggregate));
            }
            if r.timeout_ms == Some(0) {
                out.push(format!("round on {}: timeout_ms must be positive", r.aggregate));
            }
        }
        out
    }

    pub fn scoped(&self, id: &str) -> String {
        format!("{}/{}", self.app_id, id)
    }
}

/// The two answers of [`check_compatibility`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "reason", rename_all = "kebab-case")]
pub enum Compatibility {
    Compatible,
    Incompatible(String),
}

/// Versions are compatible iff their major components are equal.
pub fn check_compatibility(parent: &str, child: &str) -> Result<Compatibility, AppSpecError> {
    let parse = |s: &str| {
        Version::parse(s).map_err(|e| AppSpecError::InvalidArgument(format!("version {s:?}: {e}")))
    };
    let (p, c) = (parse(parent)?, parse(child)?);
    Ok(if p.major == c.major {
        Compatibility::Compatible
    } else {
        Compatibility::Incompatible(format!("major version {} differs from {}", c.major, p.major))
    })
}

/// Where an instance of the app runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "kebab-case")]
pub enum Placement {
    Parent,
    /// A member of `community`; bindings point there.
    Child { community: FedId },
    /// Hosts its own children and is itself a child of `community`.
    Relay { community: FedId },
}

impl Placement {
    fn hosts(&self, node: Option<NodeRole>) -> bool {
        match (self, node) {
            (_, None) | (Placement::Relay { .. }, _) => true,
            (Placement::Parent, Some(n)) => n == NodeRole::Parent,
            (Placement::Child { .. }, Some(n)) => n == NodeRole::Child,
        }
    }

    fn parent_of(&self) -> Option<&FedId> {
        match self {
            Placement::Parent => None,
            Placement::Child { community } | Placement::Relay { community } => Some(community),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Parent => f.write_str("parent"),
            Placement::Child { community } => write!(f, "child of {community}"),
            Placement::Relay { community } => write!(f, "relay under {community}"),
        }
    }
}

/// What an instantiation created, with store-scoped ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub app_id: String,
    pub version: String,
    pub placement: Placement,
    pub objects: Vec<String>,
    pub tables: Vec<String>,
    pub views: Vec<String>,
    pub bindings: Vec<String>,
    pub rounds: Vec<String>,
}

impl Registration {
    fn empty(spec: &AppSpec, placement: &Placement) -> Self {
        Registration {
            app_id: spec.app_id.clone(),
            version: spec.version.to_string(),
            placement: placement.clone(),
            objects: Vec::new(),
            tables: Vec::new(),
            views: Vec::new(),
            bindings: Vec::new(),
            rounds: Vec::new(),
        }
    }
}

/// Create everything the spec places on this node, or nothing.
///
/// Re-instantiating the same app id, version and placement returns the
/// existing registration.
pub fn instantiate(
    spec: &AppSpec,
    placement: &Placement,
    fedcore: &mut Fedcore,
    fedctl: &Fedctl,
    now_ms: u64,
) -> Result<Registration, AppSpecError> {
    let errs = spec.violations(fedcore.transforms(), fedcore.reducers());
    if !errs.is_empty() {
        return Err(AppSpecError::Validation(errs));
    }
    if let Some(existing) = fedcore.registration(&spec.app_id) {
        if existing.version == spec.version.to_string() && &existing.placement == placement {
            return Ok(existing.clone());
        }
        return Err(AppSpecError::Instantiation(format!(
            "{} {} is already installed as {}; uninstall it first",
            existing.app_id, existing.version, existing.placement
        )));
    }
    let bindings: Vec<&BindingDecl> = match placement {
        Placement::Parent => Vec::new(),
        _ => spec.bindings.iter().collect(),
    };
    if let Some(community) = placement.parent_of() {
        if !bindings.is_empty() && fedctl.community(community).is_none() {
            return Err(AppSpecError::Instantiation(format!(
                "not a member of {community}, which the bindings of {} need",
                spec.app_id
            )));
        }
    }

    let mut reg = Registration::empty(spec, placement);
    match build(spec, placement, &bindings, fedcore, now_ms, &mut reg) {
        Ok(()) => {
            fedcore.set_registration(Some(reg.clone()), &spec.app_id);
            Ok(reg)
        }
        Err(e) => {
            teardown(fedcore, &reg);
            Err(AppSpecError::Instantiation(e.to_string()))
        }
    }
}

fn build(
    spec: &AppSpec,
    placement: &Placement,
    bindings: &[&BindingDecl],
    fedcore: &mut Fedcore,
    now_ms: u64,
    reg: &mut Registration,
) -> Result<(), FedcoreError> {
    let app = spec.app_id.as_str();
    for o in spec.objects.iter().filter(|o| placement.hosts(o.node)) {
        let id = spec.scoped(&o.id);
        if fedcore.contains_object(&id) {
            return Err(FedcoreError::InvalidArgument(format!("object {id} already exists")));
        }
        fedcore.create_object(&id, o.role)?;
        reg.objects.push(id);
    }
    for t in spec.tables.iter().filter(|t| placement.hosts(t.node)) {
        let id = spec.scoped(&t.table_id);
        fedcore.create_table(DataTable::new(&id, t.schema.clone())?)?;
        reg.tables.push(id);
    }
    for v in spec.views.iter().filter(|v| placement.hosts(v.node)) {
        let mut view = v.spec.clone();
        view.view_id = spec.scoped(&view.view_id);
        view.source_refs = view.source_refs.iter().map(|s| spec.scoped(s)).collect();
        let id = view.view_id.clone();
        if fedcore.view(&id).is_some() {
            return Err(FedcoreError::InvalidArgument(format!("view {id} already exists")));
        }
        fedcore.define_view(app, view, now_ms)?;
        reg.views.push(id);
    }
    if placement.hosts(Some(NodeRole::Parent)) {
        for r in &spec.policy.rounds {
            let cfg = RoundConfig {
                aggregate: spec.scoped(&r.aggregate),
                output: spec.scoped(&r.output),
                timeout_ms: r.timeout_ms,
            };
            if fedcore.round_status(&cfg.aggregate).is_some() {
                return Err(FedcoreError::InvalidArgument(format!("round on {} already exists", cfg.aggregate)));
            }
            fedcore.configure_round(app, cfg.clone())?;
            reg.rounds.push(cfg.aggregate);
        }
    }
    if let Some(community) = placement.parent_of() {
        for b in bindings {
            let binding = SyncBinding {
                binding_id: spec.scoped(&b.binding_id),
                local_object: spec.scoped(&b.local),
                remote: community.clone(),
                remote_object: spec.scoped(&b.remote),
                direction: b.direction,
                interval_ms: b.interval_ms,
                transforms: spec.transforms.get(&b.local).cloned().unwrap_or_default(),
                entry: b.entry.clone().unwrap_or_else(crate::fedcore::exchange::default_entry),
            };
            if fedcore.binding(&binding.binding_id).is_some() {
                return Err(FedcoreError::InvalidArgument(format!(
                    "binding {} already exists",
                    binding.binding_id
                )));
            }
            let id = binding.binding_id.clone();
            fedcore.add_binding(app, binding, now_ms)?;
            reg.bindings.push(id);
        }
    }
    for o in spec.objects.iter().filter(|o| o.notify && placement.hosts(o.node)) {
        fedcore.hub_mut().subscribe(app, &spec.scoped(&o.id));
    }
    Ok(())
}

fn teardown(fedcore: &mut Fedcore, reg: &Registration) {
    for b in &reg.bindings {
        fedcore.remove_binding(b);
    }
    for r in &reg.rounds {
        fedcore.remove_round(r);
    }
    for v in &reg.views {
        fedcore.remove_view(v);
    }
    for t in &reg.tables {
        fedcore.remove_table(t);
    }
    for o in &reg.objects {
        fedcore.remove_object(o);
    }
    fedcore.hub_mut().unsubscribe_app(&reg.app_id);
}

/// Remove everything an instantiation created.
pub fn uninstall(fedcore: &mut Fedcore, app_id: &str) -> Result<Registration, AppSpecError> {
    let reg = fedcore
        .registration(app_id)
        .cloned()
        .ok_or_else(|| AppSpecError::InvalidArgument(format!("app {app_id} is not installed")))?;
    teardown(fedcore, &reg);
    fedcore.set_registration(None, app_id);
    Ok(reg)
}

#[cfg(test)]
mod tests;
