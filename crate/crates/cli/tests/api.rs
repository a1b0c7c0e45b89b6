use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use logtalk::eval::{self, AnswerLabel, UnderstandingLabel};
use logtalk::orchestrator::Orchestrator;
use logtalk_cli::api::router;
use logtalk_cli::config::AppConfig;
use rust_decimal::Decimal;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn toy_log() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy_log.csv")
}

/// A fresh store in `dir` with the toy log ingested.
fn orchestrator(dir: &Path) -> Orchestrator {
    let mut config = AppConfig::load(&fixtures().join("logtalk.toml")).unwrap();
    config.store = dir.join("store.db");
    let o = config.open().unwrap();
    let mapping = logtalk::eventlog::ColumnMapping {
        resource: Some("org:resource".into()),
        ..logtalk::eventlog::ColumnMapping::xes()
    };
    o.event_log()
        .ingest_csv(toy_log(), &mapping, &Default::default())
        .unwrap();
    o
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value: Value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("{uri}: body is not JSON ({e}): {}", String::from_utf8_lossy(&bytes)));
    (status, value)
}

fn assert_error(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
}

#[tokio::test]
async fn ask_answers_with_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(orchestrator(dir.path()));
    let (status, body) = call(&app, Method::POST, "/ask", Some(json!({"question": "How many cases are there?"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "answered");
    assert_eq!(body["result"]["rows"], json!([[3]]));
    assert!(body["sql"].as_str().unwrap().contains("COUNT(DISTINCT case_concept_name)"));
    assert!(body["reasoning"].as_str().unwrap().starts_with("1."));
    assert_eq!(body["stage"], json!({"tier": "tier1", "shot_mode": "zero-shot"}));
}

#[tokio::test]
async fn clarification_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(orchestrator(dir.path()));
    let (status, body) =
        call(&app, Method::POST, "/ask", Some(json!({"question": "How many events happened in department A?"}))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    assert_eq!(body["status"], "needs_user_feedback");
    let sid = body["session_id"].as_str().unwrap().to_string();
    assert!(body["last_error"].as_str().unwrap().contains("dept"), "{body}");

    let (status, body) = call(
        &app,
        Method::POST,
        "/feedback",
        Some(json!({"session_id": sid, "text": "department A means org_unit = 'A'"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "answered");
    assert_eq!(body["session_id"], sid.as_str());
    assert_eq!(body["result"]["rows"], json!([[4]]));

    // The same session cannot be resumed twice.
    let (status, body) =
        call(&app, Method::POST, "/feedback", Some(json!({"session_id": sid, "text": "again"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&body, "session_not_awaiting");

    let (status, body) = call(&app, Method::GET, &format!("/transcripts/{sid}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let events: Vec<&str> = body["state"]["transcript"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["event"].as_str().unwrap())
        .collect();
    assert!(events.contains(&"user_feedback"), "{events:?}");
    assert_eq!(events.last(), Some(&"finished"));
}

#[tokio::test]
async fn feedback_for_unknown_session_is_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(orchestrator(dir.path()));
    let (status, body) =
        call(&app, Method::POST, "/feedback", Some(json!({"session_id": "nope", "text": "hello"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_session");
    let (status, body) = call(&app, Method::GET, "/transcripts/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_session");
}

#[tokio::test]
async fn request_errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(orchestrator(dir.path()));
    let (status, body) = call(&app, Method::POST, "/ask", Some(json!({"query": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");
    let (status, body) = call(&app, Method::POST, "/ask", Some(json!({"question": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "empty_question");
    let (status, body) = call(&app, Method::GET, "/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "not_found");
    let (status, body) = call(&app, Method::GET, "/ask", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_error(&body, "method_not_allowed");
    let (status, body) = call(&app, Method::POST, "/ontology/abc/review", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");
}

#[tokio::test]
async fn ask_without_event_log_is_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = AppConfig::load(&fixtures().join("logtalk.toml")).unwrap();
    config.store = dir.path().join("empty.db");
    let app = router(config.open().unwrap());
    let (status, body) = call(&app, Method::POST, "/ask", Some(json!({"question": "How many cases are there?"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&body, "no_event_log");
}

#[tokio::test]
async fn ingest_inline_and_from_path() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(orchestrator(dir.path()));
    let csv = std::fs::read_to_string(toy_log()).unwrap();
    let (status, body) = call(&app, Method::POST, "/ingest", Some(json!({"csv": csv}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["rows_loaded"], 8);
    assert_eq!(body["schema"]["row_count"], 8);
    let (status, body) = call(
        &app,
        Method::POST,
        "/ingest",
        Some(json!({"path": toy_log(), "resource_col": "org:resource"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let names: Vec<&str> = body["schema"]["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"resource"), "{names:?}");
    let (status, body) = call(&app, Method::POST, "/ingest", Some(json!({"csv": csv, "case_col": "missing"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "missing_role_mapping");
    let (status, body) = call(&app, Method::POST, "/ingest", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");
}

#[tokio::test]
async fn ontology_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let o = orchestrator(dir.path());
    let app = router(o.clone());
    let (status, body) = call(&app, Method::GET, "/ontology", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
    let entry = json!({
        "term": "department",
        "category": "Mapping",
        "definition": "The organisational unit of an event.",
        "data_mapping": "org_unit"
    });
    let (status, body) = call(&app, Method::POST, "/ontology", Some(entry)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["reviewed"], true);
    let (status, body) = call(
        &app,
        Method::POST,
        "/ontology",
        Some(json!({"term": "", "category": "Domain", "definition": "x"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_ontology_entry");

    let proposal = logtalk::ontology::OntologyEntry {
        reviewed: false,
        source: logtalk::ontology::EntrySource::LlmProposed,
        ..logtalk::ontology::OntologyEntry::expert("rework", logtalk::ontology::Category::ProcessMining, "A repeated activity.")
    };
    let id = o.ontology().upsert(&proposal).unwrap();
    let (status, body) = call(&app, Method::POST, &format!("/ontology/{id}/review"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["reviewed"], true);
    let (status, body) = call(&app, Method::POST, "/ontology/999/review", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_ontology_entry");
    let (_, body) = call(&app, Method::GET, "/ontology", None).await;
    assert_eq!(body.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn eval_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = orchestrator(dir.path());
    let app = router(o.clone());
    let questions = json!([
        {"id": "a", "text": "How many cases are there?"},
        {"id": "b", "text": "How many events happened in department A?"}
    ]);
    let (status, body) = call(&app, Method::POST, "/eval/runs", Some(json!({"questions": questions}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["run_id"], "run-1");
    assert_eq!(body["answered"], 1);
    assert_eq!(body["needs_user_feedback"], 1);

    let (status, body) = call(&app, Method::GET, "/eval/runs/run-1/report", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&body, "unlabeled_transcripts");
    let (status, body) = call(&app, Method::GET, "/eval/runs/zzz/report", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "unknown_run");

    eval::record_label(o.db(), "run-1", "a", AnswerLabel::FullyAnswered, UnderstandingLabel::Understood, "t", "").unwrap();
    eval::record_label(o.db(), "run-1", "b", AnswerLabel::Wrong, UnderstandingLabel::PartiallyUnderstood, "t", "").unwrap();
    let (status, body) = call(&app, Method::GET, "/eval/runs/run-1/report", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["ratios"]["total"], 2);
    assert_eq!(body["ratios"]["answer"][0], json!({"label": "FullyAnswered", "count": 1, "percent": 50}));

    // Session ids of corpus questions contain a slash.
    let (status, body) = call(&app, Method::GET, "/transcripts/run-1/a", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["state"]["session_id"], "run-1/a");

    let (status, body) = call(&app, Method::POST, "/eval/runs", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_request");
}

fn dec(v: &Value) -> Decimal {
    v.as_str().unwrap().parse().unwrap()
}

#[tokio::test]
async fn costs_total_matches_recorded_calls() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(orchestrator(dir.path()));
    call(&app, Method::POST, "/ask", Some(json!({"question": "How many cases are there?"}))).await;
    let (status, body) =
        call(&app, Method::POST, "/ask", Some(json!({"question": "How many events happened in department A?"}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);

    let (status, ledger) = call(&app, Method::GET, "/costs", None).await;
    assert_eq!(status, StatusCode::OK);
    let lines = ledger["lines"].as_object().unwrap();
    let line_sum: Decimal = lines.values().map(|l| dec(&l["cost"])).sum();
    assert_eq!(line_sum, dec(&ledger["total_cost"]));

    // Two context calls (50/10) and the first question (100/20) on tier1;
    // the second question makes three tier1 calls then two tier2 calls,
    // all at 200/20. Prices per 1K: tier1 0.001/0.002, tier2 0.03/0.06.
    let k = Decimal::from(1000);
    let p = |tokens: u64, price: &str| Decimal::from(tokens) * price.parse::<Decimal>().unwrap() / k;
    let tier1 = p(2 * 50 + 100 + 3 * 200, "0.001") + p(2 * 10 + 20 + 3 * 20, "0.002");
    let tier2 = p(2 * 200, "0.03") + p(2 * 20, "0.06");
    assert_eq!(dec(&lines["tier1"]["cost"]), tier1, "{ledger}");
    assert_eq!(dec(&lines["tier2"]["cost"]), tier2, "{ledger}");
    assert_eq!(dec(&ledger["total_cost"]), tier1 + tier2);
    assert_eq!(lines["tier1"]["call_count"], 6);
    assert_eq!(body["attempts_used"], 5);
}
