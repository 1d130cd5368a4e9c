//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use comverse_core::app::{App, AppContext};
use comverse_core::appspec::{load_spec, AppSpec, Placement};
use comverse_core::fedcore::{AppEvent, Entries, ObjectRole, Value};
use comverse_core::fedctl::{FedctlConfig, JoinPolicy, MemberStatus};
use comverse_core::fedlet::{ApiRequest, ErrorClass};
use comverse_core::identity::{FedId, TokenValue};
use comverse_core::sim::{node_key, SimConfig, Simulation};
use comverse_core::transport::ScenarioEvent;
use comverse_csw::{Demo, DemoConfig, Sample, APP_ID, PARENT};
use comverse_http::SimGateway;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const SEED: u64 = 2024;

fn fed(s: &str) -> FedId {
    FedId::new(s).unwrap()
}

fn allow(ids: &[&str]) -> JoinPolicy {
    JoinPolicy {
        allow: ids.iter().map(|s| fed(s)).collect(),
        deny: BTreeSet::new(),
    }
}

fn fingerprint(sim: &Simulation) -> String {
    format!("{}{}", sim.ledgers(), sim.stores())
}

fn list_status(sim: &mut Simulation, node: &str, community: &str) -> Option<String> {
    let list = sim.api(node, ApiRequest::List).unwrap();
    list.as_array()?
        .iter()
        .find(|r| r["community_id"] == community)
        .map(|r| r["status"].as_str().unwrap().to_string())
}

fn share(sim: &mut Simulation, node: &str, community: &str, data: &[&str]) {
    let req = ApiRequest::Share {
        community: fed(community),
        data: data.iter().map(|d| d.to_string()).collect(),
        revoke: false,
        aggregate_only: true,
    };
    sim.api(node, req).unwrap();
}

// ---------------------------------------------------------------- membership

/// Runs the scenario; also returns the community ledger just before and after the denial.
fn membership_scenario(seed: u64) -> (Simulation, String, String) {
    let mut sim = Simulation::new(SimConfig::new(seed));
    sim.add_community("com", allow(&["m1.com", "m2.com"])).unwrap();
    for m in ["m1", "m2", "m3", "m4", "m5"] {
        sim.add_node(m).unwrap();
        sim.api(m, ApiRequest::Join { community: fed("com") }).unwrap();
    }
    assert!(sim.settle(30_000), "join traffic did not settle");
    let queued = sim.api("com", ApiRequest::Requests).unwrap();
    let ids: Vec<&str> = queued.as_array().unwrap().iter().map(|q| q["member_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["m3.com", "m4.com", "m5.com"], "admin queue");
    for m in ["m3.com", "m4.com"] {
        sim.api("com", ApiRequest::Approve { member: fed(m) }).unwrap();
    }
    assert!(sim.settle(30_000), "approval traffic did not settle");
    let before = sim.fedlet("com").fedctl().ledger().to_yaml();
    sim.api("com", ApiRequest::Deny { member: fed("m5.com") }).unwrap();
    assert!(sim.settle(30_000), "denial traffic did not settle");
    let after = sim.fedlet("com").fedctl().ledger().to_yaml();
    (sim, before, after)
}

fn membership_consensus() -> String {
    let start = Instant::now();
    let (mut sim, before, after) = membership_scenario(SEED);
    assert!(before == after, "denial changed the community ledger");
    let violations = sim.consensus_violations();
    assert!(violations.is_empty(), "{violations:?}");
    let community = sim.fedlet("com").fedctl();
    let active: Vec<&str> = community
        .members()
        .filter(|m| m.status == MemberStatus::Active)
        .map(|m| m.member_id.as_str())
        .collect();
    assert_eq!(active, ["m1.com", "m2.com", "m3.com", "m4.com"]);
    assert!(community.member(&fed("m5.com")).is_none());
    assert_eq!(community.queued_requests().count(), 0);
    assert!(community.ledger().members.iter().all(|m| m.member_id.as_str() != "m5.com"));
    assert!(sim.fedlet("m5").fedctl().community(&fed("com")).is_none());
    assert_eq!(sim.fedlet("m5").fedctl().outstanding().count(), 0);
    let m5 = sim.fedlet("m5").fedctl().ledger();
    assert!(m5.communities.is_empty() && m5.members.is_empty(), "m5 holds ledger state");
    for m in ["m1", "m2", "m3", "m4"] {
        assert_eq!(list_status(&mut sim, m, "com").as_deref(), Some("active"), "{m}");
    }
    let (again, _, _) = membership_scenario(SEED);
    assert_eq!(sim.ledgers(), again.ledgers(), "same seed, different ledgers");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    format!("4 admitted, 1 denied, ledgers agree, {elapsed:.2?}")
}

// ---------------------------------------------------------------- tokens

fn token_lifecycle() -> String {
    let cfg = FedctlConfig::default();
    let (ttl_ms, grace_ms) = (cfg.token_ttl * 1000, cfg.grace() * 1000);
    let mut sim = Simulation::new(SimConfig::new(SEED));
    sim.add_community("com", allow(&["m1.com"])).unwrap();
    sim.add_node("m1").unwrap();
    sim.api("m1", ApiRequest::Join { community: fed("com") }).unwrap();
    // several refreshes in, at an offset that is not a refresh boundary
    sim.run_for(3 * ttl_ms + 777_000);
    let halt = sim.now_ms();
    sim.apply_event(&ScenarioEvent::NodeStop { node: "m1".into() });
    sim.settle(10_000);
    let member = |s: &Simulation| s.fedlet("com").fedctl().member(&fed("m1.com")).unwrap().clone();
    let expires_at = member(&sim).received_token.unwrap().expires_at;
    assert_eq!(member(&sim).status, MemberStatus::Active);

    assert!(sim.run_until_pred(2 * (ttl_ms + grace_ms), |s| member(s).status == MemberStatus::Stale));
    let stale_at = sim.now_ms();
    let exact = (expires_at + cfg.grace()) * 1000;
    assert_eq!(stale_at, exact, "stale at {stale_at}, token expiry {expires_at}s");
    assert!(
        stale_at >= halt + ttl_ms && stale_at <= halt + ttl_ms + grace_ms,
        "stale at {stale_at} outside [{}, {}]",
        halt + ttl_ms,
        halt + ttl_ms + grace_ms
    );

    sim.apply_event(&ScenarioEvent::NodeStart { node: "m1".into() });
    let resumed = sim.now_ms();
    assert!(sim.run_until_pred(10_000, |s| member(s).status == MemberStatus::Active));
    sim.settle(10_000);
    assert!(sim.consensus_violations().is_empty());
    format!(
        "halted at {halt} ms, stale at {stale_at} ms (window [{}, {}]), active again {} ms after restart",
        halt + ttl_ms,
        halt + ttl_ms + grace_ms,
        sim.now_ms() - resumed
    )
}

// ---------------------------------------------------------------- authorization

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tok {
    Valid,
    Expired,
    Mismatch,
}

fn authorization_truth_table() -> String {
    let mut cases = 0;
    for tok in [Tok::Valid, Tok::Expired, Tok::Mismatch] {
        for active in [true, false] {
            for grant in [true, false] {
                let mut sim = Simulation::new(SimConfig::new(SEED));
                sim.add_community("com", allow(&["m1.com"])).unwrap();
                sim.add_node("m1").unwrap();
                sim.api("m1", ApiRequest::Join { community: fed("com") }).unwrap();
                sim.settle(10_000);
                sim.with_fedlet("m1", |f, _| {
                    let core = f.fedcore_mut();
                    core.create_object("air/pm25", ObjectRole::State).unwrap();
                    core.put_object("air/pm25", Entries::from([("value".into(), Value::Floats(vec![12.0]))]))
                        .unwrap();
                });
                if grant {
                    let req = ApiRequest::Share {
                        community: fed("com"),
                        data: vec!["air/*".into()],
                        revoke: false,
                        aggregate_only: false,
                    };
                    sim.api("m1", req).unwrap();
                }
                if !active {
                    let pause = ApiRequest::Share {
                        community: fed("com"),
                        data: vec![],
                        revoke: false,
                        aggregate_only: false,
                    };
                    sim.api("m1", pause).unwrap();
                }
                let held = sim
                    .fedlet("com")
                    .fedctl()
                    .member(&fed("m1.com"))
                    .and_then(|m| m.received_token.clone())
                    .unwrap();
                let (token, at_ms): (TokenValue, u64) = match tok {
                    Tok::Valid => (held.token, sim.now_ms()),
                    Tok::Expired => (held.token, held.expires_at * 1000 + 1_000),
                    Tok::Mismatch => (held.token.with_bit_flipped(5), sim.now_ms()),
                };
                let req = ApiRequest::ReadObject {
                    object_id: "air/pm25".into(),
                    requester: fed("com"),
                    token,
                };
                let got = sim.fedlet_mut("m1").api(req, at_ms);
                let want = tok == Tok::Valid && active && grant;
                match (&got, want) {
                    (Ok(_), true) => {}
                    (Err(e), false) if e.class == ErrorClass::Denied => {
                        let incidents = sim.fedlet("m1").fedctl().incidents();
                        assert!(
                            incidents.iter().any(|i| i.data_ref == "air/pm25"),
                            "{tok:?}/{active}/{grant}: denial not recorded"
                        );
                    }
                    _ => panic!("token {tok:?}, active {active}, grant {grant}: got {got:?}, want allow={want}"),
                }
                cases += 1;
            }
        }
    }
    format!("{cases} combinations, only valid+active+grant allowed")
}

// ---------------------------------------------------------------- federated training

/// Plain full-batch gradient descent on the pooled samples.
fn centralized(pooled: &[Sample], d: usize, eta: f64, rounds: usize) -> Vec<Vec<f64>> {
    let mut w = vec![0.0; d];
    let mut out = vec![w.clone()];
    for _ in 0..rounds {
        let mut g = vec![0.0; d];
        for s in pooled {
            let r: f64 = s.label - (0..d).map(|j| w[j] * s.features[j]).sum::<f64>();
            for j in 0..d {
                g[j] -= r * s.features[j];
            }
        }
        for j in 0..d {
            w[j] -= eta * g[j] / pooled.len() as f64;
        }
        out.push(w.clone());
    }
    out
}

fn csw_run(seed: u64) -> Demo {
    let mut demo = Demo::new(DemoConfig {
        seed,
        ..DemoConfig::default()
    })
    .unwrap();
    demo.run().unwrap();
    demo
}

fn federated_equivalence() -> String {
    let start = Instant::now();
    let demo = csw_run(SEED);
    let cfg = demo.config().clone();
    assert_eq!((cfg.children, cfg.dim, cfg.rounds, cfg.topk), (3, 8, 50, None));
    let oracle = centralized(&demo.pooled().samples, cfg.dim, cfg.eta, cfg.rounds as usize);
    let history = demo.parent_app().history();
    assert_eq!(history.len(), oracle.len());
    let mut worst = 0.0f64;
    for (m, w) in history.iter().zip(&oracle) {
        for (a, b) in m.weights.iter().zip(w) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-9, "max elementwise gap {worst:e}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    format!("max gap {worst:.1e} over 50 rounds, {elapsed:.2?}")
}

// ---------------------------------------------------------------- secure aggregation

const SUM_SPEC: &str = "
app_id: sum
version: 1.0.0
objects:
  - { id: O3, role: raw, node: child }
  - { id: O4, role: aggregate, node: parent }
  - { id: O5, role: aggregate, node: parent }
bindings:
  - { binding_id: up, local: O3, remote: O4, direction: push, interval_ms: 200 }
transforms:
  O3: [mask]
policy:
  rounds:
    - { aggregate: O4, output: O5, timeout_ms: 3000 }
";

fn object_state(sim: &Simulation, node: &str, id: &str) -> (u64, Option<Value>) {
    let o = sim.fedlet(node).fedcore().object(id).unwrap();
    (o.version, o.entries.get("value").cloned())
}

fn completed(sim: &Simulation, node: &str, aggregate: &str) -> u64 {
    sim.fedlet(node).fedcore().round_status(aggregate).unwrap().completed_rounds
}

fn secure_round(seed: u64) -> Simulation {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6usize);
    let dim = rng.random_range(1..=16usize);
    let names: Vec<String> = (1..=n).map(|i| format!("p{i}")).collect();
    let ids: Vec<String> = names.iter().map(|p| format!("{p}.agg")).collect();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();

    let spec = load_spec(SUM_SPEC).unwrap();
    let mut sim = Simulation::new(SimConfig::new(seed));
    sim.add_community("agg", allow(&id_refs)).unwrap();
    sim.install("agg", &spec, &Placement::Parent, None).unwrap();
    for p in &names {
        sim.add_node(p).unwrap();
        sim.api(p, ApiRequest::Join { community: fed("agg") }).unwrap();
    }
    sim.settle(30_000);
    let mut plain = vec![0i64; dim];
    for p in &names {
        sim.install(p, &spec, &Placement::Child { community: fed("agg") }, None).unwrap();
        share(&mut sim, p, "agg", &["sum/O3"]);
        let x: Vec<i64> = (0..dim).map(|_| rng.random_range(-(1i64 << 40)..(1i64 << 40))).collect();
        for (acc, v) in plain.iter_mut().zip(&x) {
            *acc += v;
        }
        sim.with_fedlet(p, |f, _| {
            f.fedcore_mut()
                .put_object("sum/O3", Entries::from([("value".into(), Value::Ints(x))]))
                .unwrap()
        });
    }
    sim.with_fedlet("agg", |f, now| f.open_round("sum/O4", None, now)).unwrap();
    assert!(
        sim.run_until_pred(30_000, |s| completed(s, "agg", "sum/O4") == 1),
        "seed {seed}: round did not complete"
    );
    for id in ["sum/O4", "sum/O5"] {
        assert_eq!(object_state(&sim, "agg", id).1, Some(Value::Ints(plain.clone())), "seed {seed}: {id}");
    }

    // one member drops out of the next round
    let gone = &names[rng.random_range(0..n)];
    sim.apply_event(&ScenarioEvent::NodeStop { node: gone.clone() });
    let before = (object_state(&sim, "agg", "sum/O4"), object_state(&sim, "agg", "sum/O5"));
    sim.with_fedlet("agg", |f, now| f.open_round("sum/O4", None, now)).unwrap();
    let aborted = |s: &Simulation| s.fedlet("agg").fedcore().round_status("sum/O4").unwrap().attempt == Some(1);
    assert!(sim.run_until_pred(30_000, aborted), "seed {seed}: dropout did not abort the attempt");
    let after = (object_state(&sim, "agg", "sum/O4"), object_state(&sim, "agg", "sum/O5"));
    assert_eq!(before, after, "seed {seed}: aborted attempt touched O4/O5");
    sim
}

fn secure_aggregation() -> String {
    for seed in 0..100 {
        secure_round(seed);
    }
    "100 seeds bit-exact, dropout leaves O4/O5 untouched".into()
}

// ---------------------------------------------------------------- privacy

fn privacy_interposition() -> String {
    let mut demo = csw_run(SEED);
    let app = format!("local:app:{APP_ID}");
    let parent = demo.sim().fedlet(PARENT).fedcore();
    let mut app_reads = 0;
    for r in parent.access_log() {
        if r.principal == app {
            app_reads += 1;
            assert!(r.role != Some(ObjectRole::Raw), "parent app read raw {r:?}");
            assert!(["csw/O1", "csw/O5"].contains(&r.object_id.as_str()), "parent app read {r:?}");
        }
    }
    assert!(app_reads >= 50, "parent app made only {app_reads} reads");
    for id in parent.object_ids() {
        assert!(!id.ends_with("/O3") && !id.ends_with("/O6"), "parent stores {id}");
    }
    let children = demo.children().to_vec();
    for c in &children {
        for r in demo.sim().fedlet(c).fedcore().access_log() {
            let raw = r.role == Some(ObjectRole::Raw);
            assert!(!(raw && r.allowed && !r.principal.starts_with("local:")), "{c}: {r:?}");
        }
    }
    // the community asking outright is refused too
    for c in &children {
        let member = fed(&format!("{c}.{PARENT}"));
        let token = demo.sim().fedlet(PARENT).fedctl().member(&member).unwrap().received_token.clone().unwrap();
        for obj in ["csw/O3", "csw/O6"] {
            let req = ApiRequest::ReadObject {
                object_id: obj.into(),
                requester: fed(PARENT),
                token: token.token,
            };
            let err = demo.sim_mut().api(c, req).unwrap_err();
            assert_eq!(err.class, ErrorClass::Denied, "{c} {obj}");
        }
    }
    format!("{app_reads} parent app reads, all of O1/O5; raw reads by others: 0")
}

// ---------------------------------------------------------------- hierarchy

const TREE_SPEC: &str = "
app_id: tree
version: 1.0.0
objects:
  - { id: x, role: raw, node: child }
  - { id: agg, role: aggregate, node: parent }
  - { id: total, role: aggregate, node: parent }
bindings:
  - { binding_id: up, local: x, remote: agg, direction: push, interval_ms: 200 }
transforms:
  x: [mask]
policy:
  rounds:
    - { aggregate: agg, output: total, timeout_ms: 3000 }
";

/// A mid-level fedlet's app: forwards each completed subtree total upward.
struct Relay;

impl App for Relay {
    fn app_id(&self) -> &str {
        "tree"
    }

    fn on_event(&mut self, event: &AppEvent, ctx: &mut AppContext<'_>) {
        if let AppEvent::RoundCompleted { aggregate, .. } = event {
            if *aggregate == ctx.scoped("agg") {
                let total = ctx.read("total").unwrap();
                let value = total.entries["value"].clone();
                ctx.put("x", Entries::from([("value".into(), value)])).unwrap();
            }
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn hierarchy_scenario(seed: u64) -> (Simulation, Vec<i64>, Vec<i64>) {
    let spec: AppSpec = load_spec(TREE_SPEC).unwrap();
    let mut sim = Simulation::new(SimConfig::new(seed));
    sim.add_community("root", allow(&["mid-a.root", "mid-b.root"])).unwrap();
    sim.install("root", &spec, &Placement::Parent, None).unwrap();
    let tree: BTreeMap<&str, [&str; 2]> = BTreeMap::from([("mid-a", ["leaf-a1", "leaf-a2"]), ("mid-b", ["leaf-b1", "leaf-b2"])]);
    for (mid, leaves) in &tree {
        let members: Vec<String> = leaves.iter().map(|l| format!("{l}.{mid}")).collect();
        let refs: Vec<&str> = members.iter().map(String::as_str).collect();
        sim.add_community(mid, allow(&refs)).unwrap();
        sim.api(mid, ApiRequest::Join { community: fed("root") }).unwrap();
        for leaf in leaves {
            sim.add_node(leaf).unwrap();
            sim.api(leaf, ApiRequest::Join { community: fed(mid) }).unwrap();
        }
    }
    assert!(sim.settle(30_000));
    assert!(sim.consensus_violations().is_empty());

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut brute = vec![0i64; 4];
    for (mid, leaves) in &tree {
        let relay = Placement::Relay { community: fed("root") };
        sim.install(mid, &spec, &relay, Some(Box::new(Relay))).unwrap();
        share(&mut sim, mid, "root", &["tree/x"]);
        for leaf in leaves {
            sim.install(leaf, &spec, &Placement::Child { community: fed(mid) }, None).unwrap();
            share(&mut sim, leaf, mid, &["tree/x"]);
            let x: Vec<i64> = (0..4).map(|_| rng.random_range(-1_000_000..1_000_000)).collect();
            for (b, v) in brute.iter_mut().zip(&x) {
                *b += v;
            }
            sim.with_fedlet(leaf, |f, _| {
                f.fedcore_mut()
                    .put_object("tree/x", Entries::from([("value".into(), Value::Ints(x))]))
                    .unwrap()
            });
        }
    }
    for mid in tree.keys() {
        sim.with_fedlet(mid, |f, now| f.open_round("tree/agg", None, now)).unwrap();
    }
    let mids_done = |s: &Simulation| ["mid-a", "mid-b"].iter().all(|m| completed(s, m, "tree/agg") == 1);
    assert!(sim.run_until_pred(30_000, mids_done), "mid rounds stalled");
    sim.with_fedlet("root", |f, now| f.open_round("tree/agg", None, now)).unwrap();
    assert!(sim.run_until_pred(30_000, |s| completed(s, "root", "tree/agg") == 1), "root round stalled");
    let got = match object_state(&sim, "root", "tree/total").1 {
        Some(Value::Ints(v)) => v,
        other => panic!("root total is {other:?}"),
    };
    (sim, got, brute)
}

fn hierarchical_federation() -> String {
    let (sim, got, brute) = hierarchy_scenario(SEED);
    assert_eq!(got, brute, "root total vs brute-force leaf sum");
    for mid in ["mid-a", "mid-b"] {
        let f = sim.fedlet(mid);
        assert!(f.fedctl().hosted().is_some() && f.fedctl().community(&fed("root")).is_some());
    }
    format!("root total {got:?} equals the sum over 4 leaves")
}

// ---------------------------------------------------------------- determinism

fn suite_fingerprint(seed: u64) -> String {
    let mut out = String::new();
    out.push_str(&fingerprint(&membership_scenario(seed).0));
    let demo = csw_run(seed);
    for w in &demo.model().weights {
        out.push_str(&format!("{:016x}\n", w.to_bits()));
    }
    out.push_str(&fingerprint(demo.sim()));
    out.push_str(&fingerprint(&secure_round(seed)));
    out.push_str(&fingerprint(&hierarchy_scenario(seed).0));
    out
}

fn determinism() -> String {
    let a = suite_fingerprint(SEED);
    let b = suite_fingerprint(SEED);
    assert!(a == b, "two runs with seed {SEED} differ");
    assert_ne!(a, suite_fingerprint(SEED + 1), "seed has no effect");
    format!("{} bytes of ledgers, stores and weights identical across runs", a.len())
}

// ---------------------------------------------------------------- cli

struct Cli {
    base: String,
    keys: tempfile::TempDir,
    _rt: tokio::runtime::Runtime,
}

impl Cli {
    fn run(&self, node: &str, args: &[&str]) -> (i32, String) {
        let url = format!("{}/n/{node}", self.base);
        let key: PathBuf = self.keys.path().join(node);
        let mut argv = vec!["comctl", "--json", "--fedlet", &url, "--key", key.to_str().unwrap()];
        argv.extend_from_slice(args);
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = comctl::run(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap())
    }
}

fn cli_conformance() -> String {
    let mut sim = Simulation::new(SimConfig::new(SEED));
    sim.add_community("com-42", allow(&["alice.com-42"])).unwrap();
    for n in ["alice", "bob", "carol"] {
        sim.add_node(n).unwrap();
    }
    sim.with_fedlet("alice", |f, _| {
        let core = f.fedcore_mut();
        core.create_object("air_quality", ObjectRole::State).unwrap();
        core.put_object("air_quality", Entries::from([("value".into(), Value::Floats(vec![7.5]))]))
            .unwrap();
    });
    let keys = tempfile::TempDir::new().unwrap();
    for n in ["com-42", "alice", "bob", "carol"] {
        fs::write(keys.path().join(n), node_key(SEED, n).secret_seed().to_hex()).unwrap();
    }
    let gw = SimGateway::new(sim, 30_000);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = gw.router();
    rt.spawn(async move { axum::serve(listener, app).await });
    let cli = Cli { base, keys, _rt: rt };
    let json = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap();

    let (code, out) = cli.run("alice", &["join", "com-42"]);
    assert_eq!(code, 0, "join: {out}");
    let (code, out) = cli.run("alice", &["list"]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)[0]["status"], "active", "list after join");

    let read = |gw: &SimGateway| {
        let mut sim = gw.lock();
        let token = sim
            .fedlet("com-42")
            .fedctl()
            .member(&fed("alice.com-42"))
            .and_then(|m| m.received_token.clone())
            .unwrap();
        let req = ApiRequest::ReadObject {
            object_id: "air_quality".into(),
            requester: fed("com-42"),
            token: token.token,
        };
        sim.api("alice", req).is_ok()
    };
    assert!(!read(&gw), "read allowed before share");
    let (code, _) = cli.run("alice", &["share", "com-42", "air_quality"]);
    assert_eq!(code, 0);
    assert!(read(&gw), "community read denied after share");
    let (code, out) = cli.run("alice", &["share", "com-42"]);
    assert_eq!((code, json(&out)["share_status"].as_str()), (0, Some("paused")));
    assert!(!read(&gw), "read allowed while paused");
    assert_eq!(cli.run("alice", &["share", "com-42", "air_quality"]).0, 0);
    assert!(read(&gw), "read denied after resume");

    // admin path
    for n in ["bob", "carol"] {
        assert_eq!(cli.run(n, &["join", "com-42"]).0, 0, "{n} join");
    }
    let (code, out) = cli.run("com-42", &["requests"]);
    assert_eq!(code, 0);
    let queued: Vec<String> = json(&out).as_array().unwrap().iter().map(|r| r["member_id"].as_str().unwrap().into()).collect();
    assert_eq!(queued, ["bob.com-42", "carol.com-42"]);
    assert_eq!(cli.run("com-42", &["approve", "bob.com-42"]).0, 0);
    assert_eq!(cli.run("com-42", &["deny", "carol.com-42"]).0, 0);
    assert_eq!(cli.run("com-42", &["approve", "carol.com-42"]).0, 4, "request consumed");
    let (_, out) = cli.run("bob", &["list"]);
    assert_eq!(json(&out)[0]["status"], "active");
    let (code, out) = cli.run("com-42", &["status"]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["host_id"], "com-42");

    // every read verb prints parseable, stable json
    for verb in ["list", "requests", "members", "incidents", "status"] {
        let (code, first) = cli.run("com-42", &[verb]);
        assert_eq!(code, 0, "{verb}");
        json(&first);
        assert_eq!(first, cli.run("com-42", &[verb]).1, "{verb} output unstable");
    }

    let (code, out) = cli.run("alice", &["leave", "unknown-id"]);
    assert_eq!(code, 4);
    assert_eq!(json(&out)["error"]["class"], "not-found");
    let (code, _) = cli.run("alice", &["share", "com-42", "not a ref!"]);
    assert_eq!(code, 5, "validation");
    let (code, _) = cli.run("alice", &["frobnicate"]);
    assert_eq!(code, 2, "usage");
    let (mut o, mut e) = (Vec::new(), Vec::new());
    assert_eq!(comctl::run(["comctl", "--fedlet", "http://127.0.0.1:9", "list"], &mut o, &mut e), 3, "connection");

    let (code, out) = cli.run("alice", &["leave", "com-42"]);
    assert_eq!(code, 0, "leave: {out}");
    let (_, out) = cli.run("com-42", &["members"]);
    let alice = json(&out).as_array().unwrap().iter().find(|m| m["member_id"] == "alice.com-42").cloned().unwrap();
    assert_eq!(alice["status"], "left");
    assert!(!read(&gw), "read allowed after leave");
    assert!(gw.lock().consensus_violations().is_empty());
    "list, join, leave, share, requests, approve, deny, members, incidents, status; exit codes 0/2/3/4/5".into()
}

// ----------------------------------------------------------------

fn message(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panicked".into()
    }
}

fn main() {
    let criteria: [(&str, fn() -> String); 9] = [
        ("membership consensus", membership_consensus),
        ("token lifecycle", token_lifecycle),
        ("authorization truth table", authorization_truth_table),
        ("federated/centralized equivalence", federated_equivalence),
        ("secure aggregation", secure_aggregation),
        ("privacy interposition", privacy_interposition),
        ("hierarchical federation", hierarchical_federation),
        ("determinism", determinism),
        ("cli conformance", cli_conformance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(p) => {
                failed += 1;
                println!("FAIL  {name}: {}", message(p));
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
