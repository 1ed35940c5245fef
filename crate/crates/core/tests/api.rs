// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};

use itzal::config::Config;
use itzal::message::Request;
use itzal::system::Running;
use itzal::workload::gen_workload;

fn config(out: &Path) -> Config {
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let mut c = Config::default();
    c.app.listen = any;
    c.shadower.listen = any;
    c.reporting.listen = any;
    c.reporting.output_dir = out.to_path_buf();
    c.regression.min_patched_line_executions = 3;
    c.regression.min_executions = 5;
    c
}

async fn drive(running: &Running, requests: &[Request]) {
    let client = reqwest::Client::new();
    for r in requests {
        client.get(format!("{}{}", running.proxy_url(), r.target())).send().await.unwrap();
    }
    let system = running.system.clone();
    assert!(tokio::task::spawn_blocking(move || system.wait_idle(Duration::from_secs(30)))
        .await
        .unwrap());
}

async fn json_get(url: &str) -> (u16, Value) {
    let r = reqwest::get(url).await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap())
}

async fn decide(base: &str, id: &str, decision: &str, token: Option<&str>) -> (u16, Value) {
    let mut rb = reqwest::Client::new()
        .post(format!("{base}/api/patches/{id}/decision"))
        .json(&json!({ "decision": decision, "actor": "dev" }));
    if let Some(t) = token {
        rb = rb.header("x-itzal-token", t);
    }
    let r = rb.send().await.unwrap();
    let status = r.status().as_u16();
    (status, r.json().await.unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fresh_system_has_no_patches() {
    let dir = tempfile::tempdir().unwrap();
    let running = Running::start(&config(dir.path())).await.unwrap();
    let base = running.reporting_url();
    assert_eq!(json_get(&format!("{base}/api/patches")).await, (200, json!([])));
    let (s, f) = json_get(&format!("{base}/api/failures")).await;
    assert_eq!((s, f["total"].clone()), (200, json!(0)));
    let (s, _) = json_get(&format!("{base}/api/patches/0000000000000000")).await;
    assert_eq!(s, 404);
    let (s, m) = json_get(&format!("{base}/api/metrics")).await;
    assert_eq!(s, 200);
    assert_eq!(m["shadower"]["patch_queue"]["capacity"], 1024);
    running.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn review_flow_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let running = Running::start(&cfg).await.unwrap();
    let base = running.reporting_url();
    let mut workload = vec![Request::get("/users?id=ghost-1")];
    workload.extend(gen_workload(3, 30, 0.0));
    drive(&running, &workload).await;

    let (_, patches) = json_get(&format!("{base}/api/patches")).await;
    let patches = patches.as_array().unwrap().clone();
    let states: Vec<&str> = patches.iter().map(|p| p["state"].as_str().unwrap()).collect();
    assert_eq!(states, ["Reported", "Reported", "Invalidated"], "{patches:#?}");
    assert_eq!(patches[0]["rank"], 1);
    assert_eq!(patches[1]["rank"], 2);
    assert!(patches[2]["rank"].is_null());
    assert!(patches[2]["mismatch"]["patched"].is_object());

    let (_, failures) = json_get(&format!("{base}/api/failures")).await;
    assert_eq!(failures["total"], 1);
    assert_eq!(failures["sites"][0]["count"], 1);
    assert_eq!(failures["sites"][0]["patches"].as_array().unwrap().len(), 3);

    let top = patches[0]["id"].as_str().unwrap().to_string();
    let second = patches[1]["id"].as_str().unwrap().to_string();
    let invalid = patches[2]["id"].as_str().unwrap().to_string();
    assert_eq!(decide(&base, &invalid, "approve", None).await.0, 409);
    assert_eq!(decide(&base, "ffffffffffffffff", "approve", None).await.0, 404);
    let (s, body) = decide(&base, &top, "approve", None).await;
    assert_eq!(s, 200);
    assert_eq!(body["state"], "Approved");
    assert_eq!(decide(&base, &top, "reject", None).await.0, 409);
    assert_eq!(decide(&base, &second, "reject", None).await.0, 200);
    let diff = std::fs::read_to_string(dir.path().join(format!("{top}.diff"))).unwrap();
    assert!(diff.starts_with("--- a/users\n+++ b/users\n"), "{diff}");
    assert!(!dir.path().join(format!("{second}.diff")).exists());
    running.shutdown();

    // Reported and decided records survive a restart.
    let again = Running::start(&cfg).await.unwrap();
    let (_, patches) = json_get(&format!("{}/api/patches/{top}", again.reporting_url())).await;
    assert_eq!(patches["state"], "Approved");
    assert_eq!(patches["decision"]["actor"], "dev");
    let (_, p2) = json_get(&format!("{}/api/patches/{second}", again.reporting_url())).await;
    assert_eq!(p2["state"], "Rejected");
    again.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn token_cors_and_bad_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.reporting.token = Some("s3cret".into());
    cfg.reporting.cors_origin = "http://dash.local".into();
    let running = Running::start(&cfg).await.unwrap();
    let base = running.reporting_url();
    assert_eq!(decide(&base, "abc", "approve", None).await.0, 401);
    assert_eq!(decide(&base, "abc", "approve", Some("wrong")).await.0, 401);
    assert_eq!(decide(&base, "abc", "approve", Some("s3cret")).await.0, 404);

    let client = reqwest::Client::new();
    let r = client
        .post(format!("{base}/api/patches/abc/decision"))
        .header("x-itzal-token", "s3cret")
        .header("content-type", "application/json")
        .body("{\"decision\": \"maybe\"}")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
    assert!(r.json::<Value>().await.unwrap()["error"].is_string());

    let pre = client
        .request(reqwest::Method::OPTIONS, format!("{base}/api/patches"))
        .send()
        .await
        .unwrap();
    assert_eq!(pre.status().as_u16(), 204);
    assert_eq!(pre.headers()["access-control-allow-origin"], "http://dash.local");
    let g = client.get(format!("{base}/api/patches")).send().await.unwrap();
    assert_eq!(g.headers()["access-control-allow-origin"], "http://dash.local");
    running.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn intake_endpoints_feed_the_services() {
    let dir = tempfile::tempdir().unwrap();
    let running = Running::start(&config(dir.path())).await.unwrap();
    let base = running.reporting_url();
    let client = reqwest::Client::new();

    // A failing request observed elsewhere, submitted for search.
    let app = itzal::sample::production_app();
    let mut req = Request::get("/users?id=ghost-9");
    req.request_id = "external-1".into();
    let (resp, outcome) = app.handle(&req);
    let verdict = itzal::oracle::RequestOracle::default().judge(&resp, &outcome);
    let mut env = itzal::envelope::ShadowEnvelope {
        kind: itzal::envelope::ShadowKind::ToPatchService,
        request: req,
        response: Some(resp),
        verdict,
        state_version: 0,
        snapshot: Some(std::sync::Arc::new(app.snapshot())),
        attempts: 0,
    };
    if let itzal::oracle::Verdict::Failure { context } = &mut env.verdict {
        context.request_id = "external-1".into();
    }
    let r = client.post(format!("{base}/itzal/patch-search")).json(&env).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 202);
    let system = running.system.clone();
    assert!(tokio::task::spawn_blocking(move || system.wait_idle(Duration::from_secs(30))).await.unwrap());
    let (_, patches) = json_get(&format!("{base}/api/patches")).await;
    let list = patches.as_array().unwrap();
    assert_eq!(list.len(), 3);
    assert!(list.iter().all(|p| p["request_id"] == "external-1"));

    // Candidates can also be posted directly; duplicates bump the fix count.
    let record = running.system.regression.records()[0].clone();
    let r = client
        .post(format!("{base}/itzal/candidates"))
        .json(&vec![record.candidate.clone()])
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 202);
    let (_, p) = json_get(&format!("{base}/api/patches/{}", record.id())).await;
    assert_eq!(p["fixes"], 2);

    let wrong = { let mut e = env.clone(); e.kind = itzal::envelope::ShadowKind::ToRegression; e };
    let r = client.post(format!("{base}/itzal/patch-search")).json(&wrong).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 400);
    running.shutdown();
}
