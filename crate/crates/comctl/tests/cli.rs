use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use comverse_core::fedcore::{Entries, ObjectRole, Value};
use comverse_core::fedctl::JoinPolicy;
use comverse_core::identity::FedId;
use comverse_core::sim::{node_key, SimConfig, Simulation};
use comverse_http::SimGateway;
use serde_json::Value as Json;
use tempfile::TempDir;

const SEED: u64 = 31;

struct Harness {
    base: String,
    gw: SimGateway,
    keys: TempDir,
    _rt: tokio::runtime::Runtime,
}

impl Harness {
    fn new() -> Harness {
        let mut sim = Simulation::new(SimConfig::new(SEED));
        let policy = JoinPolicy {
            allow: BTreeSet::from([FedId::new("alice.com-42").unwrap()]),
            deny: BTreeSet::new(),
        };
        sim.add_community("com-42", policy).unwrap();
        let keys = TempDir::new().unwrap();
        for n in ["com-42", "alice", "bob", "carol"] {
            if n != "com-42" {
                sim.add_node(n).unwrap();
            }
            fs::write(keys.path().join(n), node_key(SEED, n).secret_seed().to_hex()).unwrap();
        }
        let gw = SimGateway::new(sim, 30_000);
        let rt = tokio::runtime::Runtime::new().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let app = gw.router();
        rt.spawn(async move { axum::serve(listener, app).await });
        Harness { base, gw, keys, _rt: rt }
    }

    fn key(&self, node: &str) -> PathBuf {
        self.keys.path().join(node)
    }

    fn ctl(&self, node: &str, args: &[&str]) -> (i32, String, String) {
        let url = format!("{}/n/{node}", self.base);
        let key = self.key(node);
        let mut argv = vec!["comctl", "--fedlet", &url, "--key", key.to_str().unwrap()];
        argv.extend_from_slice(args);
        raw(&argv)
    }

    fn json(&self, node: &str, args: &[&str]) -> (i32, Json) {
        let mut a = vec!["--json"];
        a.extend_from_slice(args);
        let (code, out, _) = self.ctl(node, &a);
        (code, serde_json::from_str(&out).unwrap_or_else(|e| panic!("{args:?} printed non-json {out:?}: {e}")))
    }
}

fn raw(argv: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = comctl::run(argv.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn status_of(list: &Json, community: &str) -> Option<String> {
    list.as_array()?
        .iter()
        .find(|r| r["community_id"] == community)
        .map(|r| r["status"].as_str().unwrap().to_string())
}

#[test]
fn join_then_list_shows_active() {
    let h = Harness::new();
    let (code, out, err) = h.ctl("alice", &["join", "com-42"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("com-42"));
    let (code, list) = h.json("alice", &["list"]);
    assert_eq!(code, 0);
    assert_eq!(status_of(&list, "com-42").as_deref(), Some("active"));
    let (_, text, _) = h.ctl("alice", &["list"]);
    assert!(text.lines().nth(1).unwrap().starts_with("com-42"), "{text}");
}

#[test]
fn leaving_an_unknown_community_is_not_found() {
    let h = Harness::new();
    let (code, doc) = h.json("alice", &["leave", "unknown-id"]);
    assert_eq!(code, 4);
    assert_eq!(doc["error"]["class"], "not-found");
}

#[test]
fn shared_data_becomes_readable_by_the_community() {
    let h = Harness::new();
    assert_eq!(h.ctl("alice", &["join", "com-42"]).0, 0);
    {
        let mut sim = h.gw.lock();
        sim.with_fedlet("alice", |f, _| {
            let core = f.fedcore_mut();
            core.create_object("air_quality", ObjectRole::State).unwrap();
            core.put_object("air_quality", Entries::from([("value".into(), Value::Floats(vec![41.5]))]))
                .unwrap();
        });
    }
    let token = {
        let sim = h.gw.lock();
        let m = sim.fedlet("com-42").fedctl().member(&FedId::new("alice.com-42").unwrap()).cloned();
        m.unwrap().received_token.unwrap().token.to_hex()
    };
    let read = || {
        let url = format!("{}/n/alice/object/air_quality?requester=com-42&token={token}", h.base);
        reqwest::blocking::get(url).unwrap().status().as_u16()
    };
    assert_eq!(read(), 403);
    let (code, _, err) = h.ctl("alice", &["share", "com-42", "air_quality"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(read(), 200);

    let (code, doc) = h.json("alice", &["share", "com-42"]);
    assert_eq!((code, doc["share_status"].as_str()), (0, Some("paused")));
    assert_eq!(read(), 403);
    let (code, doc) = h.json("alice", &["share", "com-42", "air_quality"]);
    assert_eq!((code, doc["share_status"].as_str()), (0, Some("active")));
    let (code, doc) = h.json("alice", &["share", "com-42", "--revoke"]);
    assert_eq!((code, doc["share_status"].as_str()), (0, Some("revoked")));
    assert_eq!(read(), 403);
}

#[test]
fn admin_queue_round_trip() {
    let h = Harness::new();
    assert_eq!(h.ctl("bob", &["join", "com-42"]).0, 0);
    assert_eq!(h.ctl("carol", &["join", "com-42"]).0, 0);
    let (code, queue) = h.json("com-42", &["requests"]);
    assert_eq!(code, 0);
    let ids: Vec<&str> = queue.as_array().unwrap().iter().map(|q| q["member_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["bob.com-42", "carol.com-42"]);

    assert_eq!(h.ctl("com-42", &["approve", "bob.com-42"]).0, 0);
    assert_eq!(h.ctl("com-42", &["deny", "carol.com-42"]).0, 0);
    assert_eq!(h.ctl("com-42", &["approve", "bob.com-42"]).0, 4);
    let (_, out, _) = h.ctl("com-42", &["requests"]);
    assert_eq!(out, "no pending requests\n");

    let (_, bob) = h.json("bob", &["list"]);
    assert_eq!(status_of(&bob, "com-42").as_deref(), Some("active"));
    let (_, carol) = h.json("carol", &["list"]);
    assert_eq!(status_of(&carol, "com-42").as_deref(), Some("denied"));
    let (_, members) = h.json("com-42", &["members"]);
    assert_eq!(members.as_array().unwrap().len(), 1);
}

#[test]
fn waiting_on_a_denied_join_fails() {
    let h = Harness::new();
    std::thread::scope(|s| {
        let waiting = s.spawn(|| h.ctl("carol", &["join", "com-42", "--wait", "10"]));
        let queued = |h: &Harness| h.json("com-42", &["requests"]).1.as_array().is_some_and(|q| !q.is_empty());
        while !queued(&h) {
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
        assert_eq!(h.ctl("com-42", &["deny", "carol.com-42"]).0, 0);
        let (code, _, err) = waiting.join().unwrap();
        assert_eq!(code, 4, "{err}");
    });
}

#[test]
fn status_and_reads_are_stable() {
    let h = Harness::new();
    let (code, out, _) = h.ctl("com-42", &["status"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("host:         com-42\n"), "{out}");
    assert_eq!(h.ctl("com-42", &["members"]).1, h.ctl("com-42", &["members"]).1);
    for verb in ["list", "requests", "members", "incidents", "status"] {
        let (code, _) = h.json("com-42", &[verb]);
        assert_eq!(code, 0, "{verb}");
    }
}

#[test]
fn exit_codes() {
    let h = Harness::new();
    assert_eq!(raw(&["comctl"]).0, 2);
    assert_eq!(raw(&["comctl", "frobnicate"]).0, 2);
    assert_eq!(raw(&["comctl", "--config", "/nonexistent/comctl.toml", "list"]).0, 2);
    assert_eq!(raw(&["comctl", "--help"]).0, 0);
    assert_eq!(raw(&["comctl", "--fedlet", "http://127.0.0.1:9", "list"]).0, 3);
    let url = format!("{}/n/alice", h.base);
    assert_eq!(raw(&["comctl", "--fedlet", &url, "join", "com-42"]).0, 2, "no key");
    assert_eq!(h.ctl("alice", &["join", "not a fed id"]).0, 5);
    assert_eq!(h.ctl("alice", &["join", "nowhere"]).0, 3);
    assert_eq!(h.ctl("alice", &["join", "com-42"]).0, 0);
    assert_eq!(h.ctl("alice", &["join", "com-42"]).0, 4, "already a member");
    assert_eq!(h.ctl("alice", &["share", "com-42", "bad ref!"]).0, 5);
    let wrong_key = h.key("bob");
    let argv = ["comctl", "--fedlet", &url, "--key", wrong_key.to_str().unwrap(), "leave", "com-42"];
    assert_eq!(raw(&argv).0, 4, "signed by someone else");
}

#[test]
fn config_file_supplies_endpoint_and_key() {
    let h = Harness::new();
    let cfg = h.keys.path().join("comctl.toml");
    let key = h.key("alice");
    fs::write(
        &cfg,
        format!("fedlet = \"{}/n/alice\"\nkey = {:?}\n", h.base, key.to_str().unwrap()),
    )
    .unwrap();
    let (code, _, err) = raw(&["comctl", "--config", cfg.to_str().unwrap(), "join", "com-42"]);
    assert_eq!(code, 0, "{err}");
}
