use proptest::prelude::*;

use super::*;
use crate::fedcore::FedcoreConfig;
use crate::fedctl::{CommunityEntry, FedctlConfig, Ledger, Role, ShareStatus};
use crate::identity::{generate_token, KeyPair, Keyring, Nonce, SecretSeed};
use crate::transport::Address;

const CSW: &str = include_str!("../../../csw/csw.spec");

fn fed(s: &str) -> FedId {
    FedId::new(s).unwrap()
}

fn ctl(joined: bool) -> Fedctl {
    let me = fed("home-1");
    let keyring = Keyring::new(me.clone(), KeyPair::from_seed(SecretSeed([3; 32])));
    let mut ctl = Fedctl::new(
        keyring,
        "home-1",
        Address::new("home-1", None, me).unwrap(),
        FedctlConfig::default(),
        1,
    );
    if joined {
        ctl.restore(Ledger {
            communities: vec![CommunityEntry {
                community_id: fed("campus"),
                name: "campus".into(),
                address: "comverse://campus/campus".parse().unwrap(),
                share_status: ShareStatus::Active,
                role: Role {
                    role_name: "member".into(),
                    acl: vec![],
                },
                issued_token: generate_token(&fed("campus"), Nonce([1; 16]), 0, 3600).unwrap(),
                member_fed_id: fed("home-1.campus"),
                previous_token: None,
                undelivered: false,
            }],
            members: vec![],
        });
    }
    ctl
}

fn core() -> Fedcore {
    Fedcore::new(fed("home-1"), FedcoreConfig::default())
}

fn child() -> Placement {
    Placement::Child { community: fed("campus") }
}

fn violations(doc: &str) -> Vec<String> {
    match load_spec(doc) {
        Err(AppSpecError::Validation(v)) => v,
        other => panic!("expected violations, got {other:?}"),
    }
}

#[test]
fn csw_fixture_counts() {
    let spec = load_spec(CSW).unwrap();
    // counted by hand from the fixture
    assert_eq!(spec.objects.len(), 6);
    assert_eq!(spec.bindings.len(), 2);
    let names: Vec<String> = spec.transforms.values().flatten().map(|t| t.name.clone()).collect();
    assert_eq!(names, vec!["topk", "mask"]);
    assert_eq!(spec.transforms["O3"][0].k, Some(4));
    assert_eq!(spec.policy.rounds.len(), 1);
}

const BASE: &str = "app_id: t\nversion: 1.0.0\n";

#[test]
fn binding_to_undeclared_object_named() {
    let doc = format!(
        "{BASE}objects: [{{id: a, role: state}}]\n\
         bindings: [{{binding_id: b, local: a, remote: ghost, direction: pull, interval_ms: 10}}]\n"
    );
    let v = violations(&doc);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("ghost"));
}

#[test]
fn unknown_transform_named() {
    let doc = format!("{BASE}objects: [{{id: a, role: raw}}]\ntransforms: {{a: [mask, rot13]}}\n");
    let v = violations(&doc);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("rot13"));
}

#[test]
fn bad_version_is_a_violation() {
    let v = violations("app_id: t\nversion: v1\n");
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("v1"));
}

#[test]
fn aggregate_cannot_be_a_source() {
    let doc = format!(
        "{BASE}objects: [{{id: s, role: aggregate}}, {{id: d, role: aggregate}}]\n\
         bindings: [{{binding_id: b, local: s, remote: d, direction: push, interval_ms: 10}}]\n"
    );
    let v = violations(&doc);
    assert!(v.iter().any(|m| m.contains("cannot be a push source")), "{v:?}");
}

#[test]
fn view_needs_declared_sources() {
    let doc = format!(
        "{BASE}objects: []\nviews:\n  - view_id: v\n    source_refs: [readings/pm25]\n    transform: mean\n    \
         output_schema: [{{name: source, type: string}}, {{name: value, type: float}}]\n    refresh_interval_ms: 1000\n"
    );
    let v = violations(&doc);
    assert_eq!(v.len(), 1, "{v:?}");
    assert!(v[0].contains("readings"));
}

#[test]
fn every_violation_listed() {
    let doc = "app_id: t\nversion: nope\n\
               objects: [{id: a, role: raw}, {id: a, role: state}, {id: g, role: aggregate}]\n\
               bindings: [{binding_id: b, local: a, remote: x, direction: pull, interval_ms: 0}]\n\
               transforms: {a: [zip], y: [mask], g: [topk]}\n\
               policy: {rounds: [{aggregate: g, output: a}]}\n";
    let v = violations(doc);
    for needle in [
        "version", "declared twice", "remote object x", "interval_ms", "zip", "object y", "aggregate object g",
        "needs k", "a must be an aggregate",
    ] {
        assert!(v.iter().any(|m| m.contains(needle)), "missing {needle:?} in {v:?}");
    }
}

#[test]
fn raw_objects_are_never_pulled() {
    let doc = format!(
        "{BASE}objects: [{{id: a, role: state}}, {{id: r, role: raw}}]\n\
         bindings: [{{binding_id: b, local: a, remote: r, direction: pull, interval_ms: 10}}]\n"
    );
    assert!(violations(&doc)[0].contains("raw object r"));
}

#[test]
fn malformed_document() {
    assert!(matches!(load_spec("app_id: [unclosed"), Err(AppSpecError::Parse(_))));
    assert!(matches!(load_spec("objects: []"), Err(AppSpecError::Parse(_))));
}

#[test]
fn compatibility_is_major_equality() {
    assert_eq!(check_compatibility("1.2.0", "1.9.3").unwrap(), Compatibility::Compatible);
    assert!(matches!(
        check_compatibility("1.4.0", "2.0.0").unwrap(),
        Compatibility::Incompatible(_)
    ));
    assert!(matches!(check_compatibility("v1", "1.0.0"), Err(AppSpecError::InvalidArgument(_))));
    assert!(matches!(check_compatibility("1.0.0", "1.0"), Err(AppSpecError::InvalidArgument(_))));
}

#[test]
fn csw_round_trips() {
    let spec = load_spec(CSW).unwrap();
    assert_eq!(load_spec(&spec.to_yaml()).unwrap(), spec);
}

#[test]
fn parent_instance_creates_parent_objects() {
    let spec = load_spec(CSW).unwrap();
    let mut core = core();
    let reg = instantiate(&spec, &Placement::Parent, &mut core, &ctl(false), 0).unwrap();
    assert_eq!(reg.objects, vec!["csw/O1", "csw/O4", "csw/O5"]);
    assert!(reg.bindings.is_empty());
    assert_eq!(reg.rounds, vec!["csw/O4"]);
    for id in &reg.objects {
        assert_eq!(core.object(id).unwrap().version, 0);
    }
    assert!(core.hub().is_subscribed("csw", "csw/O5"));
    assert!(!core.hub().is_subscribed("csw", "csw/O1"));
}

#[test]
fn child_instance_wires_bindings() {
    let spec = load_spec(CSW).unwrap();
    let mut core = core();
    let reg = instantiate(&spec, &child(), &mut core, &ctl(true), 0).unwrap();
    assert_eq!(reg.objects, vec!["csw/O2", "csw/O3", "csw/O6"]);
    let push = core.binding("csw/gradient").unwrap();
    assert_eq!(push.binding.remote, fed("campus"));
    assert_eq!(push.binding.remote_object, "csw/O4");
    let chain: Vec<String> = push.binding.transforms.iter().map(|t| t.to_string()).collect();
    assert_eq!(chain, vec!["topk(k=4)", "mask"]);
    assert!(core.binding("csw/model").unwrap().binding.transforms.is_empty());
}

#[test]
fn missing_membership_leaves_store_unchanged() {
    let spec = load_spec(CSW).unwrap();
    let mut core = core();
    let err = instantiate(&spec, &child(), &mut core, &ctl(false), 0).unwrap_err();
    assert!(matches!(err, AppSpecError::Instantiation(_)));
    assert_eq!(core.objects().count(), 0);
    assert_eq!(core.bindings().count(), 0);
    assert!(core.registration("csw").is_none());
}

#[test]
fn partial_failure_rolls_back() {
    let spec = load_spec(CSW).unwrap();
    let mut core = core();
    // O6 is created last, so O2 and O3 exist when this collides
    core.create_object("csw/O6", ObjectRole::Raw).unwrap();
    let err = instantiate(&spec, &child(), &mut core, &ctl(true), 0).unwrap_err();
    assert!(err.to_string().contains("csw/O6"), "{err}");
    let ids: Vec<&str> = core.object_ids().collect();
    assert_eq!(ids, vec!["csw/O6"]);
    assert_eq!(core.bindings().count(), 0);
}

#[test]
fn reinstantiation_is_a_noop() {
    let spec = load_spec(CSW).unwrap();
    let mut core = core();
    let ctl = ctl(true);
    let first = instantiate(&spec, &child(), &mut core, &ctl, 0).unwrap();
    core.put_object("csw/O3", Default::default()).unwrap();
    let again = instantiate(&spec, &child(), &mut core, &ctl, 50).unwrap();
    assert_eq!(first, again);
    assert_eq!(core.object("csw/O3").unwrap().version, 1);

    let mut newer = spec.clone();
    newer.version = Version::new(1, 1, 0);
    assert!(instantiate(&newer, &child(), &mut core, &ctl, 0).is_err());
    uninstall(&mut core, "csw").unwrap();
    assert_eq!(core.objects().count(), 0);
    instantiate(&newer, &child(), &mut core, &ctl, 0).unwrap();
}

fn arb_spec() -> impl Strategy<Value = AppSpec> {
    let roles = prop_oneof![Just(ObjectRole::State), Just(ObjectRole::Raw), Just(ObjectRole::Aggregate)];
    let node = prop_oneof![Just(None), Just(Some(NodeRole::Parent)), Just(Some(NodeRole::Child))];
    (
        "[a-z][a-z0-9]{0,6}",
        (0u64..5, 0u64..20, 0u64..20),
        prop::collection::vec((roles, node, any::<bool>()), 0..6),
        prop::collection::vec((any::<bool>(), 1u64..100_000), 0..4),
        prop::option::of(1usize..64),
    )
        .prop_map(|(app_id, (ma, mi, pa), objs, binds, k)| {
            let objects: Vec<ObjectDecl> = objs
                .into_iter()
                .enumerate()
                .map(|(i, (role, node, notify))| ObjectDecl {
                    id: format!("o{i}"),
                    role,
                    node,
                    notify,
                })
                .collect();
            let n = objects.len();
            let bindings = binds
                .into_iter()
                .enumerate()
                .filter(|_| n > 0)
                .map(|(i, (push, interval_ms))| BindingDecl {
                    binding_id: format!("b{i}"),
                    local: format!("o{}", i % n),
                    remote: format!("o{}", (i + 1) % n),
                    direction: if push { Direction::Push } else { Direction::Pull },
                    interval_ms,
                    entry: push.then(|| "value".to_string()),
                })
                .collect();
            let mut transforms = BTreeMap::new();
            if let (Some(k), true) = (k, n > 0) {
                transforms.insert("o0".to_string(), vec![TransformSpec { name: "topk".into(), k: Some(k) }]);
            }
            AppSpec {
                app_id,
                version: Version::new(ma, mi, pa),
                objects,
                tables: vec![],
                views: vec![],
                bindings,
                transforms,
                policy: UpdatePolicy::default(),
            }
        })
}

proptest! {
    #[test]
    fn serialized_specs_parse_back(spec in arb_spec()) {
        let reg = TransformRegistry::standard();
        let reducers = ReducerRegistry::default();
        let text = spec.to_yaml();
        match load_spec_with(&text, &reg, &reducers) {
            Ok(back) => prop_assert_eq!(back, spec),
            Err(AppSpecError::Validation(v)) => {
                // invalid specs report the same violations as the in-memory check
                prop_assert_eq!(v, spec.violations(&reg, &reducers));
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
