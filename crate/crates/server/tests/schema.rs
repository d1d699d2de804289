//! Every document the service emits validates against the shared schema file
//! that clients build against.

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use bioptx::anatomy::{generate_synthetic, AnatomySpec};
use bioptx::env::EnvConfig;
use bioptx::harness::{CaseStore, SessionManager};
use bioptx_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn schema_file() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schemas/bioptx.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn validator(def: &str) -> jsonschema::Validator {
    let mut schema = schema_file();
    assert!(schema["$defs"].get(def).is_some(), "no definition {def}");
    schema["$ref"] = json!(format!("#/$defs/{def}"));
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(def: &str, doc: &Value) {
    let v = validator(def);
    let errors: Vec<String> = v
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{def}: {errors:#?}\n{doc}");
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 24).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn session_documents_match_the_schema() {
    let cases = Arc::new(CaseStore::from_volumes([(
        "case-000".to_string(),
        generate_synthetic(&AnatomySpec::default()).unwrap(),
    )]));
    let app = router(AppState::new(SessionManager::new(cases, EnvConfig::default(), None)));

    let (s, created) = call(&app, "POST", "/sessions", Some(json!({"case": "case-000", "seed": 3}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_valid("session_created", &created);
    let id = created["id"].as_str().unwrap().to_string();

    let moves = [(0, 0), (2, 1), (-1, 3), (0, 0), (4, -4)];
    let mut finished = false;
    let mut conflicts = 0;
    for k in 0..40 {
        let (di, dj) = if conflicts > 0 && k % 2 == 0 {
            (0, 0)
        } else {
            moves[k % moves.len()]
        };
        let (s, payload) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/step"),
            Some(json!({"di": di, "dj": dj})),
        )
        .await;
        if s == StatusCode::CONFLICT {
            assert_valid("api_error", &payload);
            conflicts += 1;
            continue;
        }
        assert_eq!(s, StatusCode::OK, "{payload}");
        assert_valid("step_payload", &payload);
        if payload["terminated"] == json!(true) {
            finished = true;
            break;
        }
    }
    assert!(finished);

    let (s, line) = call(&app, "GET", &format!("/sessions/{id}/log"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_valid("episode_line", &line);

    let (s, err) = call(&app, "GET", "/sessions/nope/log", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_valid("api_error", &err);
    let (s, err) = call(&app, "POST", "/sessions", Some(json!({"case": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_valid("api_error", &err);
}

#[test]
fn schema_rejects_drifted_documents() {
    let v = validator("episode_line");
    let corpus = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fuzz/corpus/episode_log_line/episode"
    );
    let good: Value = serde_json::from_str(&std::fs::read_to_string(corpus).unwrap()).unwrap();
    assert!(v.is_valid(&good));

    let mut extra = good.clone();
    extra["log"]["steps"][0]["info"]["note"] = json!("x");
    assert!(!v.is_valid(&extra));
    let mut schema = good.clone();
    schema["schema"] = json!("bioptx.episode/2");
    assert!(!v.is_valid(&schema));
    let mut hole = good;
    hole["log"]["start"]["i"] = json!(13);
    assert!(!v.is_valid(&hole));
}
