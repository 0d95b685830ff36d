mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{token_of, Fixture, Limits, TestServer};
use prism_core::access::{Acl, QuotaPolicy};
use prism_core::clock::{Clock, MockClock};
use prism_core::gateway::{Gateway, GatewayConfig};
use prism_core::wire::{decode_map, ModelValue};

const RUN: &str = r#"{"func":["prism_model_run"]}"#;
const DEFAULTS: &str = r#"{"func":["prism_get_default_input"]}"#;

fn code(body: &str) -> u32 {
    decode_map(body).unwrap()["error_code"].as_f64().unwrap() as u32
}

fn field(body: &str, key: &str) -> ModelValue {
    decode_map(body).unwrap()[key].clone()
}

fn poll_body(token: &str) -> String {
    format!(r#"{{"func":["prism_get_async_results"],"token":["{token}"]}}"#)
}

#[test]
fn error_table() {
    let f = Fixture::new();
    f.test_plugin("sleeper", &["sleeper"], false, Limits { wall_timeout: 0.5, ..Limits::default() });
    f.test_plugin("crasher", &["crash"], false, Limits::default());
    f.add_model("secret", &[common::ACCEPT], false, "restricted", Limits::default());
    let other = f.create_key("bob", Acl::Models(BTreeSet::from(["epic-demo".to_owned()])), QuotaPolicy::default());
    let s = TestServer::start(f.config());
    let unknown_token = poll_body("zzzzzzzzzz");

    let cases: Vec<(&str, Option<&str>, &str, u16, u32)> = vec![
        ("/route/accept-demo/run", None, "{not json", 400, 1),
        ("/route/accept-demo/run", None, r#"{"func":["rm -rf"]}"#, 400, 1),
        ("/route/accept-demo/run", None, r#"{"func":["prism_get_async_results"],"token":["abcdefghij"]}"#, 400, 1),
        ("/route/accept-demo/async/run", None, RUN, 400, 1),
        ("/route/accept-demo/run", None, r#"{"func":["prism_model_run"],"model_input":{"age":[39]}}"#, 400, 1),
        ("/route/accept-demo/run", Some("pmk_bogus"), RUN, 401, 2),
        ("/route/secret/run", None, RUN, 401, 2),
        ("/route/secret/run", Some(other.as_str()), RUN, 403, 3),
        ("/route/nope/run", None, RUN, 404, 4),
        ("/route/Bad.Name/run", None, RUN, 404, 4),
        ("/route/epic-demo/frobnicate", None, RUN, 404, 4),
        ("/route/epic-demo/async/status", None, &unknown_token, 404, 4),
        ("/route/sleeper/run", None, RUN, 408, 6),
        ("/route/crasher/run", None, RUN, 500, 7),
    ];
    for (path, key, body, status, error_code) in cases {
        let r = s.post(path, key, body);
        assert_eq!(r.status, status, "{path} {body}: {}", r.body);
        let m = decode_map(&r.body).unwrap();
        assert_eq!(code(&r.body), error_code, "{path}: {}", r.body);
        assert!(matches!(m["error_message"], ModelValue::String(_)));
        assert_eq!(m.len(), 2);
    }
    let r = s.post("/route/sleeper/run", None, RUN);
    assert!(r.body.contains("WorkerTimeout"), "{}", r.body);
    let r = s.post("/route/crasher/run", None, RUN);
    assert!(r.body.contains("WorkerCrashed"), "{}", r.body);
    let r = s.get("/route/accept-demo/run", None);
    assert_eq!((r.status, code(&r.body)), (400, 1));
    let r = s.get("/elsewhere", None);
    assert_eq!((r.status, code(&r.body)), (404, 4));
}

#[test]
fn successful_bodies() {
    let f = Fixture::new();
    let s = TestServer::start(f.config());

    let r = s.post("/route/accept-demo/run", None, DEFAULTS);
    assert_eq!(r.status, 200);
    let m = decode_map(&r.body).unwrap();
    assert_eq!(m.len(), 22);
    assert_eq!(m.keys().last().unwrap(), "error_code");
    assert_eq!(m["FEV1"], ModelValue::Number(33.0));

    let r = s.post("/route/accept-demo/run", None, RUN);
    assert_eq!(r.status, 200);
    assert_eq!(field(&r.body, "predicted_severe_exac_probability"), ModelValue::Number(0.5));
    assert_eq!(code(&r.body), 0);

    let r = s.post(
        "/route/accept-demo/run",
        None,
        r#"{"func":["prism_model_run"],"model_input":{"LastYrSevExacCount":[3]}}"#,
    );
    let p = field(&r.body, "predicted_severe_exac_probability").as_f64().unwrap();
    assert!((p - 0.689_974_481_127_612_4).abs() < 1e-15);

    let r = s.post("/route/epic-demo/async/run", None, RUN);
    assert_eq!(r.status, 200);
    let m = decode_map(&r.body).unwrap();
    assert_eq!(m.keys().collect::<Vec<_>>(), ["token", "error_code"]);
}

#[test]
fn async_lifecycle_and_outbox() {
    let f = Fixture::new();
    let s = TestServer::start(f.config());
    let r = s.post(
        "/route/epic-demo/async/run",
        None,
        r#"{"func":["prism_model_run"],"email_address":["a@b.c"],"seed":[5]}"#,
    );
    let token = token_of(&r.body);
    let done = common::poll_until_terminal(&s.base, "epic-demo", None, &token, Duration::from_secs(20));
    let m = decode_map(&done).unwrap();
    assert_eq!(m["status"], ModelValue::String("[COMPLETED]".into()));
    let data = m["status_data"].as_map().unwrap();
    assert_eq!(data["n_agents"], ModelValue::Number(1000.0));

    // Polling again returns the same result.
    let again = s.post("/route/epic-demo/async/status", None, &poll_body(&token));
    assert_eq!(again.body, done);
    // The token belongs to epic-demo only.
    let r = s.post("/route/accept-demo/async/status", None, &poll_body(&token));
    assert_eq!(r.status, 404);

    let outbox = std::fs::read_to_string(f.path("outbox.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(outbox.lines().next().unwrap()).unwrap();
    assert_eq!(line["email"], "a@b.c");
    assert_eq!(line["token"], token.as_str());
    assert_eq!(line["status"], "[COMPLETED]");
}

#[test]
fn queued_status_has_no_data_and_queue_cap() {
    let f = Fixture::new();
    let mut cfg = f.config();
    cfg.queue_cap = 2;
    let s = TestServer::start_with(cfg, Arc::new(prism_core::clock::SystemClock), false);
    let t = token_of(&s.post("/route/epic-demo/async/run", None, RUN).body);
    let r = s.post("/route/epic-demo/async/status", None, &poll_body(&t));
    let m = decode_map(&r.body).unwrap();
    assert_eq!(m["status"], ModelValue::String("[QUEUED]".into()));
    assert!(!m.contains_key("status_data"));
    assert_eq!(s.post("/route/epic-demo/async/run", None, RUN).status, 200);
    let r = s.post("/route/epic-demo/async/run", None, RUN);
    assert_eq!((r.status, code(&r.body)), (503, 8));
}

#[test]
fn failed_job_reports_error() {
    let f = Fixture::new();
    f.test_plugin("slowjob", &["sleeper"], true, Limits { wall_timeout: 0.3, ..Limits::default() });
    let s = TestServer::start(f.config());
    let t = token_of(&s.post("/route/slowjob/async/run", None, r#"{"func":["prism_model_run"],"email_address":["x@y.z"]}"#).body);
    let done = common::poll_until_terminal(&s.base, "slowjob", None, &t, Duration::from_secs(10));
    let m = decode_map(&done).unwrap();
    assert_eq!(m["status"], ModelValue::String("[FAILED]".into()));
    assert!(m["job_error"].as_str().unwrap().contains("timeout"));
    assert!(!m.contains_key("status_data"));
    let outbox = std::fs::read_to_string(f.path("outbox.jsonl")).unwrap();
    assert!(outbox.contains("[FAILED]"));
}

#[test]
fn restricted_results_need_an_authorized_key() {
    let f = Fixture::empty();
    f.add_model("epic-private", &[common::EPIC], true, "restricted", Limits::default());
    let owner = f.create_key("o", Acl::parse("epic-private"), QuotaPolicy::default());
    let stranger = f.create_key("s", Acl::parse("other"), QuotaPolicy::default());
    let s = TestServer::start(f.config());
    let t = token_of(&s.post("/route/epic-private/async/run", Some(&owner), RUN).body);
    common::poll_until_terminal(&s.base, "epic-private", Some(&owner), &t, Duration::from_secs(20));
    assert_eq!(s.post("/route/epic-private/async/status", None, &poll_body(&t)).status, 401);
    assert_eq!(s.post("/route/epic-private/async/status", Some(&stranger), &poll_body(&t)).status, 403);
}

#[test]
fn model_listing_is_filtered() {
    let f = Fixture::new();
    f.add_model("secret", &[common::ACCEPT], false, "restricted", Limits::default());
    let all = f.create_key("a", Acl::All, QuotaPolicy::default());
    let none = f.create_key("n", Acl::parse("x"), QuotaPolicy::default());
    let s = TestServer::start(f.config());
    let names = |key: Option<&str>| -> Vec<String> {
        let r = s.get("/models", key);
        assert_eq!(r.status, 200);
        let v: Vec<serde_json::Value> = serde_json::from_str(&r.body).unwrap();
        v.iter().map(|m| m["name"].as_str().unwrap().to_owned()).collect()
    };
    assert_eq!(names(None), ["accept-demo", "epic-demo"]);
    assert_eq!(names(Some(&none)), ["accept-demo", "epic-demo"]);
    assert_eq!(names(Some(&all)), ["accept-demo", "epic-demo", "secret"]);
    assert_eq!(s.get("/models", Some("pmk_nope")).status, 401);

    let empty = Fixture::empty();
    let s2 = TestServer::start(empty.config());
    assert_eq!(s2.get("/models", None).body, "[]");
    assert_eq!(s2.get("/healthz", None).status, 200);
}

#[test]
fn key_changes_apply_without_restart() {
    let f = Fixture::new();
    f.add_model("secret", &[common::ACCEPT], false, "restricted", Limits::default());
    let keys = f.keys();
    let (rec, key) = keys.create_key("a", Acl::parse("epic-demo"), QuotaPolicy::default()).unwrap();
    let s = TestServer::start(f.config());
    assert_eq!(s.post("/route/secret/run", Some(&key), RUN).status, 403);
    keys.set_acl(&rec.key_id, Acl::parse("epic-demo,secret")).unwrap();
    assert_eq!(s.post("/route/secret/run", Some(&key), RUN).status, 200);
    keys.revoke_key(&rec.key_id).unwrap();
    assert_eq!(s.post("/route/secret/run", Some(&key), RUN).status, 401);
}

#[test]
fn quota_rejects_then_readmits_on_mock_clock() {
    let f = Fixture::empty();
    f.test_plugin("spin", &["spin", "0.4"], false, Limits::default());
    let policy = QuotaPolicy {
        cpu_seconds_per_window: 1.0,
        window: 60,
        max_concurrent: 4,
    };
    let key = f.create_key("q", Acl::All, policy);
    let clock = MockClock::new(1_700_000_000_000);
    let s = TestServer::start_with(f.config(), Arc::new(clock.clone()), true);
    assert_eq!(s.post("/route/spin/run", Some(&key), RUN).status, 200);
    assert_eq!(s.post("/route/spin/run", Some(&key), RUN).status, 200);
    let r = s.post("/route/spin/run", Some(&key), RUN);
    assert_eq!((r.status, code(&r.body)), (429, 5), "{}", r.body);
    let retry: u64 = r.retry_after.unwrap().parse().unwrap();
    assert!((1..=60).contains(&retry));
    clock.advance_secs(retry);
    assert_eq!(s.post("/route/spin/run", Some(&key), RUN).status, 200);

    let log = std::fs::read_to_string(f.path("requests.jsonl")).unwrap();
    let outcomes: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["outcome"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(outcomes, ["OK", "OK", "QUOTA", "OK"]);
}

#[test]
fn request_log_records_every_call() {
    let f = Fixture::new();
    f.add_model("secret", &[common::ACCEPT], false, "restricted", Limits::default());
    let s = TestServer::start(f.config());
    s.post("/route/accept-demo/run", None, RUN);
    s.post("/route/secret/run", None, RUN);
    s.post("/route/accept-demo/run", Some("pmk_x"), RUN);
    let entries: Vec<serde_json::Value> = std::fs::read_to_string(f.path("requests.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries[0]["outcome"], "OK");
    assert_eq!(entries[0]["key_id"], "anonymous");
    assert!(entries[0]["cpu_seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(entries[1]["outcome"], "DENIED");
    assert_eq!(entries[1]["model"], "secret");
    assert_eq!(entries[2]["outcome"], "DENIED");
}

#[test]
fn concurrent_calls_do_not_interfere() {
    let f = Fixture::empty();
    f.test_plugin("fast", &["slow", "10"], false, Limits::default());
    let cfg = f.config();
    let n = cfg.pool_size;
    let s = TestServer::start(cfg);
    let base = s.base.clone();
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let base = base.clone();
            std::thread::spawn(move || {
                let body = format!(r#"{{"func":["prism_model_run"],"seed":[{i}]}}"#);
                let r = common::post(&base, "/route/fast/run", None, &body);
                (r.status, field(&r.body, "seed"))
            })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        let (status, seed) = h.join().unwrap();
        assert_eq!(status, 200);
        assert_eq!(seed, ModelValue::Number(i as f64));
    }
}

#[test]
fn hog_leaves_gateway_healthy() {
    let f = Fixture::new();
    f.test_plugin("hog", &["hog"], false, Limits { memory_limit: 128 << 20, ..Limits::default() });
    let s = TestServer::start(f.config());
    let r = s.post("/route/hog/run", None, RUN);
    assert_eq!((r.status, code(&r.body)), (500, 7));
    assert!(r.body.contains("WorkerOomOrCpuKill"), "{}", r.body);
    assert_eq!(s.get("/healthz", None).status, 200);
    assert_eq!(s.post("/route/accept-demo/run", None, RUN).status, 200);
}

#[test]
fn counter_is_stateless_through_gateway() {
    let f = Fixture::empty();
    f.test_plugin("counter", &["counter"], false, Limits::default());
    let s = TestServer::start(f.config());
    for _ in 0..10 {
        let r = s.post("/route/counter/run", None, RUN);
        assert_eq!(field(&r.body, "count"), ModelValue::Number(1.0));
    }
}

#[test]
fn expiry_purges_old_results() {
    let f = Fixture::new();
    let clock = MockClock::new(1_000_000);
    let s = TestServer::start_with(f.config(), Arc::new(clock.clone()), true);
    let t = token_of(&s.post("/route/epic-demo/async/run", None, RUN).body);
    common::poll_until_terminal(&s.base, "epic-demo", None, &t, Duration::from_secs(20));
    clock.advance_secs(3600);
    assert_eq!(s.gw.jobs.expire_jobs(clock.now_ms()), 0);
    clock.advance_secs(24 * 3600);
    assert_eq!(s.gw.jobs.expire_jobs(clock.now_ms()), 1);
    assert_eq!(s.post("/route/epic-demo/async/status", None, &poll_body(&t)).status, 404);
}

#[test]
fn registry_reload_picks_up_new_models() {
    let f = Fixture::new();
    let s = TestServer::start(f.config());
    assert_eq!(s.post("/route/late/run", None, DEFAULTS).status, 404);
    f.add_model("late", &[common::ACCEPT], false, "public", Limits::default());
    assert_eq!(s.gw.reload_registry().unwrap(), 3);
    assert_eq!(s.post("/route/late/run", None, DEFAULTS).status, 200);
}

#[test]
fn startup_rejects_bad_config() {
    let f = Fixture::new();
    let mut cfg = GatewayConfig::with_dirs(f.dir.path(), &f.path("missing"));
    cfg.pool_size = 1;
    let err = Gateway::open(cfg, Arc::new(prism_core::clock::SystemClock)).err().unwrap();
    assert!(err.to_string().contains("models_dir"), "{err}");
}

#[test]
fn startup_handshake_reports_each_model() {
    let f = Fixture::new();
    f.test_plugin("broken", &["crash"], false, Limits::default());
    let gw = Gateway::open(f.config(), Arc::new(prism_core::clock::SystemClock)).unwrap();
    let report = gw.validate_plugins();
    let ok: Vec<_> = report.iter().filter(|(_, r)| r.is_ok()).map(|(n, _)| n.as_str()).collect();
    assert_eq!(ok, ["accept-demo", "epic-demo"]);
    assert_eq!(report.iter().find(|(n, _)| n == "accept-demo").unwrap().1, Ok(21));
}

#[test]
fn sync_call_latency_is_reasonable() {
    let f = Fixture::new();
    let s = TestServer::start(f.config());
    let t = Instant::now();
    for _ in 0..5 {
        assert_eq!(s.post("/route/accept-demo/run", None, RUN).status, 200);
    }
    assert!(t.elapsed() < Duration::from_secs(5));
}
