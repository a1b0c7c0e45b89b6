use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use logtalk_cli::api::router;
use logtalk_cli::cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use logtalk_cli::config::AppConfig;
use serde_json::Value;
use tower::ServiceExt;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn toy_log() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy_log.csv")
}

struct Output {
    code: i32,
    out: String,
    err: String,
}

/// Runs the CLI against the fixture config with the store in `dir`.
fn logtalk(dir: &Path, args: &[&str], stdin: &str) -> Output {
    let config = fixture("logtalk.toml");
    let store = dir.join("store.db");
    let mut argv: Vec<String> = vec![
        "logtalk".into(),
        "--config".into(),
        config.display().to_string(),
        "--store".into(),
        store.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut stdin.as_bytes(), &mut out, &mut err);
    Output {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn ingested() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let log = toy_log();
    let o = logtalk(
        dir.path(),
        &["ingest", log.to_str().unwrap(), "--resource-col", "org:resource"],
        "",
    );
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    dir
}

#[test]
fn usage_errors_exit_2() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(["logtalk", "frobnicate"], &mut "".as_bytes(), &mut out, &mut err);
    assert_eq!(code, EXIT_USAGE);
    assert!(String::from_utf8(err).unwrap().contains("Usage"));
    let code = run(["logtalk", "ask"], &mut "".as_bytes(), &mut Vec::new(), &mut Vec::new());
    assert_eq!(code, EXIT_USAGE);
    let mut out = Vec::new();
    let code = run(["logtalk", "--help"], &mut "".as_bytes(), &mut out, &mut Vec::new());
    assert_eq!(code, EXIT_OK);
    let help = String::from_utf8(out).unwrap();
    for cmd in ["ingest", "ask", "serve", "ontology", "eval", "costs"] {
        assert!(help.contains(cmd), "{help}");
    }
}

#[test]
fn ingest_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = toy_log();
    let o = logtalk(
        dir.path(),
        &["ingest", log.to_str().unwrap(), "--case-col", "case:concept:name"],
        "",
    );
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.contains("loaded 8 rows, rejected 0"), "{}", o.out);
    assert!(o.out.contains("timestamp timestamp"), "{}", o.out);
    assert!(o.out.contains("activity text"), "{}", o.out);
    let o = logtalk(dir.path(), &["ingest", "/no/such/file.csv"], "");
    assert_eq!(o.code, EXIT_FAILURE);
    assert!(o.err.starts_with("error: "), "{}", o.err);
}

#[test]
fn ask_prints_table_sql_and_reasoning() {
    let dir = ingested();
    let o = logtalk(dir.path(), &["ask", "How many cases are there?"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.starts_with("Answered at tier1 zero-shot after 1 attempt(s)"), "{}", o.out);
    assert!(o.out.contains("cases"), "{}", o.out);
    assert!(o.out.contains("\nSQL:\nSELECT COUNT(DISTINCT case_concept_name)"), "{}", o.out);
    assert!(o.out.contains("\nReasoning:\n1. Read the event log table."), "{}", o.out);
}

#[test]
fn interactive_ask_asks_for_clarification() {
    let dir = ingested();
    let o = logtalk(
        dir.path(),
        &["ask", "-i", "How many events happened in department A?"],
        "department A means org_unit = 'A'\n",
    );
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.contains("needs clarification"), "{}", o.out);
    assert!(o.out.contains("clarification> "), "{}", o.out);
    assert!(o.out.contains("Answered at tier2 few-shot"), "{}", o.out);
    assert!(o.out.contains("org_unit = 'A'"), "{}", o.out);
}

#[test]
fn feedback_resumes_a_stored_session() {
    let dir = ingested();
    let o = logtalk(dir.path(), &["ask", "How many events happened in department A?"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.contains("Resume with: logtalk feedback session-1"), "{}", o.out);
    assert!(o.out.contains("Last error: "), "{}", o.out);
    // A new process picks the paused session up from the store.
    let o = logtalk(dir.path(), &["feedback", "session-1", "department A means org_unit = 'A'", "--json"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let v: Value = serde_json::from_str(&o.out).unwrap();
    assert_eq!(v["status"], "answered");
    let o = logtalk(dir.path(), &["feedback", "nope", "text"], "");
    assert_eq!(o.code, EXIT_FAILURE);
    assert!(o.err.contains("no session `nope`"), "{}", o.err);
    let o = logtalk(dir.path(), &["transcript", "session-1"], "");
    assert_eq!(o.code, EXIT_OK);
    assert!(o.out.contains("\"user_feedback\""), "{}", o.out);
}

#[tokio::test]
async fn cli_and_http_ask_agree() {
    let cli_dir = ingested();
    let o = logtalk(cli_dir.path(), &["ask", "--json", "How many cases are there?"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let from_cli: Value = serde_json::from_str(&o.out).unwrap();

    let http_dir = ingested();
    let mut config = AppConfig::load(&fixture("logtalk.toml")).unwrap();
    config.store = http_dir.path().join("store.db");
    let app = router(config.open().unwrap());
    let req = Request::post("/ask")
        .header("content-type", "application/json")
        .body(Body::from(r#"{"question": "How many cases are there?"}"#))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let from_http: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(from_cli, from_http);
}

#[test]
fn ontology_commands() {
    let dir = ingested();
    let o = logtalk(
        dir.path(),
        &[
            "ontology",
            "add",
            "--term",
            "department",
            "--category",
            "mapping",
            "--definition",
            "Organisational unit of an event.",
            "--mapping",
            "org_unit",
        ],
        "",
    );
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert_eq!(o.out.trim(), "stored entry 1");
    let o = logtalk(dir.path(), &["ontology", "bootstrap"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.contains("proposed org_unit (Dataset)"), "{}", o.out);
    let o = logtalk(dir.path(), &["ontology", "list"], "");
    assert!(o.out.contains("mapping: org_unit"), "{}", o.out);
    assert!(o.out.contains("org_unit [pending review]"), "{}", o.out);
    let o = logtalk(dir.path(), &["ontology", "review", "2"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let o = logtalk(dir.path(), &["ontology", "list", "--json"], "");
    let v: Value = serde_json::from_str(&o.out).unwrap();
    assert!(v.as_array().unwrap().iter().all(|e| e["reviewed"] == true));
    let export = dir.path().join("ontology.json");
    let o = logtalk(dir.path(), &["ontology", "export", export.to_str().unwrap()], "");
    assert_eq!(o.code, EXIT_OK);
    let o = logtalk(dir.path(), &["ontology", "delete", "1"], "");
    assert_eq!(o.code, EXIT_OK);
    let o = logtalk(dir.path(), &["ontology", "delete", "1"], "");
    assert_eq!(o.code, EXIT_FAILURE);
    let o = logtalk(dir.path(), &["ontology", "import", export.to_str().unwrap()], "");
    assert_eq!(o.out.trim(), "imported 2 entries");
    let o = logtalk(dir.path(), &["ontology", "add", "--term", "x", "--category", "nonsense", "--definition", "y"], "");
    assert_eq!(o.code, EXIT_USAGE);
}

#[test]
fn eval_commands() {
    let dir = ingested();
    let corpus = dir.path().join("corpus.csv");
    std::fs::write(
        &corpus,
        "id,text\na,How many cases are there in 2019?\nb,How many events happened in department A?\n",
    )
    .unwrap();
    let c = corpus.to_str().unwrap();
    let o = logtalk(dir.path(), &["eval", "run", c, "--run-id", "r1", "--rewrite-year", "2024"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.starts_with("run r1: 1 answered, 1 need clarification, 0 failed (2 run now, 0 already done)"), "{}", o.out);
    let o = logtalk(dir.path(), &["eval", "run", c, "--run-id", "r1"], "");
    assert!(o.out.contains("(0 run now, 2 already done)"), "{}", o.out);

    let o = logtalk(dir.path(), &["eval", "report", "r1"], "");
    assert_eq!(o.code, EXIT_FAILURE);
    assert!(o.err.contains("2 transcript(s) are not labeled yet"), "{}", o.err);
    let o = logtalk(dir.path(), &["eval", "label", "r1", "a", "fully-answered", "understood", "--labeler", "kim"], "");
    assert_eq!(o.out.trim(), "label version 1 recorded for r1/a");
    let o = logtalk(dir.path(), &["eval", "label", "r1", "b", "wrong", "not understood"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let o = logtalk(dir.path(), &["eval", "label", "r1", "b", "maybe", "understood"], "");
    assert_eq!(o.code, EXIT_FAILURE);

    let o = logtalk(dir.path(), &["eval", "report", "r1"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.contains("FullyAnswered"), "{}", o.out);
    assert!(o.out.contains("50%"), "{}", o.out);
    assert!(o.out.contains("Sum (partially and fully answered)"), "{}", o.out);
    let o = logtalk(dir.path(), &["eval", "report", "r1", "--format", "csv"], "");
    assert!(o.out.starts_with("group,label,count,percent\n"), "{}", o.out);
    let o = logtalk(dir.path(), &["eval", "report", "r1", "--format", "json"], "");
    let v: Value = serde_json::from_str(&o.out).unwrap();
    assert_eq!(v["ratios"]["total"], 2);
    let o = logtalk(dir.path(), &["eval", "runs"], "");
    assert_eq!(o.out.trim(), "r1");
    let o = logtalk(dir.path(), &["transcript", "r1/a"], "");
    assert!(o.out.contains("in 2024?"), "{}", o.out);
}

#[test]
fn costs_are_persisted_across_processes() {
    let dir = ingested();
    logtalk(dir.path(), &["ask", "How many cases are there?"], "");
    logtalk(dir.path(), &["ask", "How many cases are there in total?"], "");
    let o = logtalk(dir.path(), &["costs", "--json"], "");
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let v: Value = serde_json::from_str(&o.out).unwrap();
    let calls = v["lines"]["tier1"]["call_count"].as_u64().unwrap();
    assert!(calls >= 3, "{v}");
    let o = logtalk(dir.path(), &["costs"], "");
    assert!(o.out.contains("tier1"), "{}", o.out);
}

#[test]
fn bad_config_is_an_operation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[orchestrator]\ntier1_attempts = \"three\"\n").unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(
        ["logtalk", "--config", cfg.to_str().unwrap(), "costs"],
        &mut "".as_bytes(),
        &mut out,
        &mut err,
    );
    assert_eq!(code, EXIT_FAILURE);
    assert!(String::from_utf8(err).unwrap().contains("invalid config"));
}

#[test]
fn guide_config_example_parses() {
    let guide = include_str!("../../../book/src/cli.md");
    let start = guide.find("```toml\n").unwrap() + "```toml\n".len();
    let len = guide[start..].find("```").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logtalk.toml");
    std::fs::write(&path, &guide[start..start + len]).unwrap();
    let config = AppConfig::load(&path).unwrap();
    config.validate().unwrap();
    assert_eq!(config.store, dir.path().join("logtalk.db"));
    assert_eq!(config.orchestrator.tier1_attempts, 3);
}
