use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use trialmatch_cli::config::ServiceConfig;
use trialmatch_cli::providers::Providers;
use trialmatch_cli::server::{router, AppState};
use trialmatch_cli::snapshot::{MatchResponse, Snapshot, SpaceHit};

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/desk/corpus")
}

fn state(token: Option<&str>) -> Arc<AppState> {
    let config = ServiceConfig {
        corpus: Some(corpus_dir()),
        ..ServiceConfig::default()
    };
    let providers = Providers::build(&config, true).unwrap();
    let snapshot = Snapshot::load(&config, providers.embedder.clone(), providers.checker.clone()).unwrap();
    Arc::new(AppState::new(config, providers, Some(snapshot), token.map(str::to_string)))
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn first_patient() -> String {
    let line = std::fs::read_to_string(corpus_dir().join("summaries.jsonl")).unwrap();
    let v: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    v["patient_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_loaded_counts() {
    let s = state(None);
    let (status, body) = call(&s, "GET", "/v1/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["index_loaded"], true);
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(body["trials"], 20);
    assert_eq!(body["spaces"], 40);
    assert_eq!(body["patients"], 50);
}

#[tokio::test]
async fn patient_match_by_id() {
    let s = state(None);
    let pid = first_patient();
    let (status, body) = call(
        &s,
        "POST",
        "/v1/match/patient",
        Some(json!({"patient_id": pid, "show_filtered": true})),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let resp: MatchResponse<SpaceHit> = serde_json::from_value(body).unwrap();
    assert!(resp.n_candidates <= 10 && resp.n_candidates > 0);
    assert_eq!(resp.candidates.len(), resp.n_candidates);
    assert_eq!(resp.candidates.iter().filter(|c| c.passed).count(), resp.n_passed);
    for w in resp.candidates.windows(2) {
        assert!(w[0].rank < w[1].rank && w[0].cosine >= w[1].cosine);
    }

    let (_, body) = call(&s, "POST", "/v1/match/patient", Some(json!({"patient_id": pid, "threshold": 0.0})), None).await;
    let all: MatchResponse<SpaceHit> = serde_json::from_value(body).unwrap();
    assert_eq!(all.n_passed, all.n_candidates);

    let (_, body) = call(&s, "POST", "/v1/match/patient", Some(json!({"patient_id": pid, "k": 1, "show_filtered": true})), None).await;
    let top: MatchResponse<SpaceHit> = serde_json::from_value(body).unwrap();
    assert_eq!(top.candidates.len(), 1);
    assert_eq!(top.candidates[0].space_id, resp.candidates[0].space_id);
}

#[tokio::test]
async fn space_text_matches_space_id() {
    let s = state(None);
    let (_, space) = call(&s, "GET", "/v1/spaces/NCT90000001%231", None, None).await;
    let by_id = call(&s, "POST", "/v1/match/space", Some(json!({"space_id": space["space_id"], "show_filtered": true})), None).await;
    let by_text = call(
        &s,
        "POST",
        "/v1/match/space",
        Some(json!({"space_text": space["raw_text"], "nct_id": space["nct_id"], "show_filtered": true})),
        None,
    )
    .await;
    assert_eq!(by_id.0, StatusCode::OK);
    assert_eq!(by_id.1["candidates"], by_text.1["candidates"]);
    assert!(!by_id.1["candidates"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let s = state(None);
    assert_eq!(call(&s, "GET", "/v1/trials/NCT00000000", None, None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&s, "GET", "/v1/spaces/nope", None, None).await.0, StatusCode::NOT_FOUND);
    let bad = [
        json!({}),
        json!({"patient_id": "x", "summary_text": "y"}),
        json!({"summary_text": "lung cancer", "k": 0}),
        json!({"summary_text": "lung cancer", "threshold": 1.5}),
        json!({"summary_text": "lung cancer", "colour": "blue"}),
    ];
    for b in bad {
        let (status, body) = call(&s, "POST", "/v1/match/patient", Some(b.clone()), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{b}");
        assert!(body["error"].is_string());
    }
    assert_eq!(
        call(&s, "POST", "/v1/match/patient", Some(json!({"patient_id": "nobody"})), None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn trial_view_lists_its_spaces() {
    let s = state(None);
    let (status, body) = call(&s, "GET", "/v1/trials/NCT90000001", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["nct_id"], "NCT90000001");
    assert!(!body["spaces"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let s = state(Some("sesame"));
    assert_eq!(call(&s, "GET", "/v1/health", None, None).await.0, StatusCode::OK);
    assert_eq!(call(&s, "GET", "/v1/trials/NCT90000001", None, None).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&s, "GET", "/v1/trials/NCT90000001", None, Some("wrong")).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(&s, "GET", "/v1/trials/NCT90000001", None, Some("sesame")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn reload_swaps_in_a_fresh_snapshot() {
    let s = state(None);
    let (_, before) = call(&s, "GET", "/v1/health", None, None).await;
    let (status, after) = call(&s, "POST", "/v1/admin/reload", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after["spaces"], before["spaces"]);
    assert_ne!(after["loaded_at"], before["loaded_at"]);
}

#[tokio::test]
async fn unloaded_service_answers_health_and_conflict() {
    let config = ServiceConfig::default();
    let providers = Providers::build(&config, true).unwrap();
    let s = Arc::new(AppState::new(config, providers, None, None));
    let (status, body) = call(&s, "GET", "/v1/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["index_loaded"], false);
    let (status, _) = call(&s, "POST", "/v1/match/patient", Some(json!({"summary_text": "breast cancer"})), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn cli_json_equals_service_response() {
    let s = state(None);
    let pid = first_patient();
    let (_, body) = call(&s, "POST", "/v1/match/patient", Some(json!({"patient_id": pid, "show_filtered": true})), None).await;
    let out = Command::new(env!("CARGO_BIN_EXE_trialmatch"))
        .args(["--mock-providers", "match", "patient", "--corpus"])
        .arg(corpus_dir())
        .args(["--patient-id", &pid, "--json"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cli: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cli, body);
}
