mod common;

use common::tiny_config;
use mentor::annotate::{self, ServiceOptions};
use mentor::env::{Env, EnvKind};
use mentor::prefs::Preference;
use mentor::trainer::{LabelerKind, Trainer};
use serde_json::{json, Value};

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(a: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = a.get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post(a: &ureq::Agent, url: &str, body: &str) -> (u16, Value) {
    let mut r = a.post(url).header("content-type", "application/json").send(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

/// What the annotation page sends for each key.
fn key_value(key: char) -> f64 {
    match key {
        '0' => 0.0,
        '1' => 1.0,
        '2' => 0.5,
        _ => unreachable!(),
    }
}

fn human_trainer(labeler: LabelerKind) -> (Trainer, annotate::ServiceHandle, annotate::Bridge) {
    let mut cfg = tiny_config(100);
    cfg.labeler = labeler;
    let mut t = Trainer::new(cfg).unwrap();
    let (h, b) = annotate::start("127.0.0.1:0".parse().unwrap(), t.env(), ServiceOptions::default()).unwrap();
    t.attach_bridge(b.clone());
    (t, h, b)
}

#[test]
fn keyed_labels_drain_the_queue_into_the_preference_buffer() {
    let (mut t, h, bridge) = human_trainer(LabelerKind::Human);
    let a = agent();
    while bridge.pending() == 0 {
        t.run_episode().unwrap();
    }
    let (code, body) = get(&a, &format!("{}/queries", h.url()));
    assert_eq!(code, 200);
    let queries = body["queries"].as_array().unwrap().clone();
    assert!(!queries.is_empty());
    assert_eq!(queries[0]["env"], "four-rooms");
    assert_eq!(queries[0]["left"]["g_sub"].as_array().unwrap().len(), 2);

    let keys = ['0', '1', '2'];
    let mut sent = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let id = q["id"].as_u64().unwrap();
        let v = key_value(keys[i % 3]);
        let (code, back) = post(&a, &format!("{}/queries/{id}/label", h.url()), &json!({ "v": v }).to_string());
        assert_eq!(code, 200, "{back}");
        assert_eq!(back["v"].as_f64().unwrap(), v);
        sent.push((id, v));
    }
    let (_, body) = get(&a, &format!("{}/queries", h.url()));
    assert!(body["queries"].as_array().unwrap().is_empty());

    let before = t.state().preferences.len();
    let freq = t.config().query_frequency;
    for _ in 0..freq {
        t.run_episode().unwrap();
    }
    let prefs: Vec<_> = t.state().preferences.iter().collect();
    assert!(prefs.len() >= before + sent.len());
    for (id, v) in sent {
        let rec = prefs.iter().find(|r| r.query.id == id).expect("label reached the buffer");
        assert_eq!(rec.label, Preference::from_value(v).unwrap());
    }

    let (code, status) = get(&a, &format!("{}/status", h.url()));
    assert_eq!(code, 200);
    assert!(status["status"]["episode"].as_u64().unwrap() > 0);
}

#[test]
fn label_errors_have_distinct_codes() {
    let (mut t, h, bridge) = human_trainer(LabelerKind::Human);
    let a = agent();
    while bridge.pending() == 0 {
        t.run_episode().unwrap();
    }
    let (_, body) = get(&a, &format!("{}/queries", h.url()));
    let id = body["queries"][0]["id"].as_u64().unwrap();
    let label = |path: &str, body: &str| post(&a, &format!("{}{path}", h.url()), body).0;

    assert_eq!(get(&a, &format!("{}/queries/{id}", h.url())).0, 200);
    assert_eq!(label(&format!("/queries/{id}/label"), r#"{"v": 0.3}"#), 422);
    assert_eq!(label(&format!("/queries/{id}/label"), r#"{"v": "left"}"#), 422);
    assert_eq!(label(&format!("/queries/{id}/label"), "not json"), 400);
    assert_eq!(label("/queries/abc/label", r#"{"v": 0}"#), 400);
    assert_eq!(label("/queries/999999/label", r#"{"v": 0}"#), 404);
    assert_eq!(label(&format!("/queries/{id}/label"), r#"{"v": 1}"#), 200);
    assert_eq!(label(&format!("/queries/{id}/label"), r#"{"v": 0}"#), 409);
    assert_eq!(get(&a, &format!("{}/queries/{id}", h.url())).0, 404);
    assert_eq!(get(&a, &format!("{}/no/such/page", h.url())).0, 404);
}

#[test]
fn geometry_describes_the_room() {
    let env = Env::new(EnvKind::FourRooms);
    let (h, _) = annotate::start("127.0.0.1:0".parse().unwrap(), &env, ServiceOptions::default()).unwrap();
    let (code, g) = get(&agent(), &format!("{}/geometry", h.url()));
    assert_eq!(code, 200);
    assert_eq!(g["walls"].as_array().unwrap().len(), env.wall_segments().len());
    assert_eq!(g["goal"], json!([0.25, 0.25]));
    assert_eq!(g["start"], json!([0.4, -0.4]));
}

#[test]
fn static_files_are_served_without_escaping_the_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
    let env = Env::new(EnvKind::FourRooms);
    let opts = ServiceOptions {
        spool: None,
        static_dir: Some(dir.path().to_path_buf()),
    };
    let (h, _) = annotate::start("127.0.0.1:0".parse().unwrap(), &env, opts).unwrap();
    let a = agent();
    let mut r = a.get(&format!("{}/", h.url())).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.body_mut().read_to_string().unwrap(), "<p>hi</p>");
    let r = a.get(&format!("{}/../Cargo.toml", h.url())).call().unwrap();
    assert_eq!(r.status().as_u16(), 404);
}

#[test]
fn fallback_labels_expired_queries_without_stalling() {
    let mut cfg = tiny_config(20);
    cfg.labeler = LabelerKind::Fallback;
    cfg.label_timeout_secs = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let (_h, bridge) = annotate::start("127.0.0.1:0".parse().unwrap(), t.env(), ServiceOptions::default()).unwrap();
    t.attach_bridge(bridge.clone());
    for _ in 0..20 {
        t.run_episode().unwrap();
    }
    assert!(t.state().labels_total > 0);
    assert_eq!(bridge.pending(), 0);
    assert!(t.state().outstanding.is_empty());
}
