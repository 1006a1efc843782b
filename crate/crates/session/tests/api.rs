use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use hapsy_core::stimulus::AsrSignal;
use hapsy_core::ExperimentConfig;
use hapsy_session::api::router;
use hapsy_session::{simulate_session, Input, Phase, SessionStore, Submission};

async fn call(
    app: &axum::Router,
    method: Method,
    uri: &str,
    token: Option<&str>,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value =
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn create(app: &axum::Router, body: Value) -> (String, String) {
    let (status, v) = call(app, Method::POST, "/sessions", None, Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    (v["session_id"].as_str().unwrap().into(), v["token"].as_str().unwrap().into())
}

fn app() -> axum::Router {
    router(Arc::new(SessionStore::in_memory()))
}

#[tokio::test]
async fn create_is_idempotent_per_client_token() {
    let app = app();
    let body = json!({"client_token": "pad-1", "seed": 4});
    let (id, token) = create(&app, body.clone()).await;
    let (status, v) = call(&app, Method::POST, "/sessions", None, Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["session_id"], id.as_str());
    assert_eq!(v["token"], token.as_str());
    assert_eq!(v["phase"], "ASR");
}

#[tokio::test]
async fn invalid_config_names_the_field() {
    let app = app();
    let (status, v) = call(
        &app,
        Method::POST,
        "/sessions",
        None,
        Some(json!({"config": {"device": {"actuator": {"stroke_mm": 0.0}}}})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "device.actuator.stroke_mm");
    let (status, v) = call(
        &app,
        Method::POST,
        "/sessions",
        None,
        Some(json!({"config_toml": "[staircase]\nstep_ratio_down_over_up = 2.0"})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "staircase.step_ratio_down_over_up");
}

#[tokio::test]
async fn session_routes_require_the_session_token() {
    let app = app();
    let (id, _) = create(&app, json!({})).await;
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), Some("wrong"), None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = call(&app, Method::GET, "/sessions/nope", Some("x"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pending_submit_and_protocol_errors() {
    let app = app();
    let (id, token) = create(&app, json!({"seed": 1})).await;
    let t = Some(token.as_str());
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{id}/pending"), t, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["phase"], "ASR");
    assert_eq!(v["pending"]["stimulus"]["kind"], "asr");
    let pid = v["pending"]["id"].as_u64().unwrap();

    let sub = json!({"token": "r1", "presentation_id": pid, "input": {"kind": "asr", "signal": "NOT_DETECTED"}});
    let (status, first) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), t, Some(sub.clone())).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["duplicate"], false);
    // Double click: same token, no second event.
    let (status, again) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), t, Some(sub)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["duplicate"], true);
    assert_eq!(again["last_seq"], first["last_seq"]);

    // Stale presentation id.
    let stale = json!({"token": "r2", "presentation_id": pid, "input": {"kind": "asr", "signal": "DETECTED"}});
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), t, Some(stale)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "stale_presentation");

    // Wrong kind of input for the phase.
    let cmp =
        json!({"token": "r3", "input": {"kind": "compare", "response": {"judgment": "EQUAL", "latency_ms": 700}}});
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), t, Some(cmp)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "wrong_input");

    // Abort, then anything else is refused.
    let (status, v) =
        call(&app, Method::POST, &format!("/sessions/{id}/abort"), t, Some(json!({"token": "op-1", "reason": "test"})))
            .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["phase"], "ABORTED");
    let late = json!({"token": "r4", "input": {"kind": "asr", "signal": "DETECTED"}});
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/responses"), t, Some(late)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "terminal");
}

#[tokio::test]
async fn full_session_over_http_matches_simulation() {
    let sim = simulate_session(&ExperimentConfig::default(), 21).unwrap();
    let app = app();
    let (id, token) = create(&app, json!({"seed": 21})).await;
    let t = Some(token.as_str());
    for sub in &sim.submissions {
        let (status, v) =
            call(&app, Method::POST, &format!("/sessions/{id}/responses"), t, Some(serde_json::to_value(sub).unwrap()))
                .await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}/summary"), t, None).await;
    assert_eq!(v["phase"], "DONE");
    assert_eq!(v, serde_json::to_value(&sim.summary).unwrap());
    // Exports and log replay.
    let req = Request::get(format!("/sessions/{id}/exports/one_site_trace.csv"))
        .header(header::AUTHORIZATION, format!("Bearer {token}"))
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/csv");
    let csv = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(csv, sim.exports.one_site_trace_csv.as_bytes());
    let req = Request::get(format!("/sessions/{id}/log?token={token}")).body(Body::empty()).unwrap();
    let log = app.clone().oneshot(req).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    let replayed = hapsy_session::replay_log(&log).unwrap();
    assert_eq!(replayed.engine.exports(), sim.exports);
}

#[tokio::test]
async fn event_stream_sends_snapshot_then_events() {
    let store = Arc::new(SessionStore::in_memory());
    let app = router(store.clone());
    let (id, token) = create(&app, json!({"seed": 2})).await;
    let req = Request::get(format!("/sessions/{id}/events?token={token}")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()[header::CONTENT_TYPE].to_str().unwrap().starts_with("text/event-stream"));
    let mut body = resp.into_body();

    let handle = store.get(&id).unwrap();
    handle
        .submit(&Submission {
            token: "a".into(),
            presentation_id: None,
            input: Input::Asr { signal: AsrSignal::NotDetected },
        })
        .unwrap();

    let mut text = String::new();
    while !text.contains("event: force") {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    let kinds: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("event: ")).collect();
    assert_eq!(kinds, ["snapshot", "input", "presented", "force"]);
    assert!(text.contains("id: 3\n"));
    assert_eq!(handle.snapshot().view.phase, Phase::Asr);
}

#[test]
fn store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_session(&ExperimentConfig::default(), 5).unwrap();
    let (id, token) = {
        let store = SessionStore::open(dir.path(), true).unwrap();
        let c = store.create(ExperimentConfig::default(), Some(5), Some("client".into())).unwrap();
        let h = store.get(&c.session_id).unwrap();
        for sub in &sim.submissions[..40] {
            h.submit(sub).unwrap();
        }
        (c.session_id, c.token)
    };
    let store = SessionStore::open(dir.path(), true).unwrap();
    let h = store.get(&id).unwrap();
    assert!(h.check_token(&token));
    assert_eq!(h.snapshot().view.inputs, 40);
    for sub in &sim.submissions[40..] {
        h.submit(sub).unwrap();
    }
    assert_eq!(h.exports(), sim.exports);
    // Client token is remembered across restarts.
    let again = store.create(ExperimentConfig::default(), None, Some("client".into())).unwrap();
    assert!(again.existing);
    assert_eq!(again.session_id, id);
}

#[test]
fn store_recovers_from_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_session(&ExperimentConfig::default(), 6).unwrap();
    let id = {
        let store = SessionStore::open(dir.path(), false).unwrap();
        let c = store.create(ExperimentConfig::default(), Some(6), None).unwrap();
        let h = store.get(&c.session_id).unwrap();
        for sub in &sim.submissions[..25] {
            h.submit(sub).unwrap();
        }
        c.session_id
    };
    // Simulate a crash mid-append.
    let path = dir.path().join(format!("{id}.ndjson"));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(b"{\"record\":\"event\",\"seq\":");
    std::fs::write(&path, &bytes).unwrap();
    let store = SessionStore::open(dir.path(), false).unwrap();
    let h = store.get(&id).unwrap();
    assert_eq!(h.snapshot().view.inputs, 25);
    for sub in &sim.submissions[25..] {
        h.submit(sub).unwrap();
    }
    assert_eq!(h.exports(), sim.exports);
    let replayed = hapsy_session::replay_log(&h.log_bytes().unwrap()).unwrap();
    assert_eq!(replayed.engine.exports(), sim.exports);
}
