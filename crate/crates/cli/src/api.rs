//! JSON over HTTP. Every response body, errors included, is JSON; error
//! bodies carry `code` and `message`.

use std::path::PathBuf;

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use logtalk::eval::{self, Question, RatioTable, RunOptions, StageTable};
use logtalk::eventlog::{ColumnMapping, IngestReport, TimestampFormat};
use logtalk::llm::{self, CostLedger};
use logtalk::ontology::{Category, EntrySource, OntologyEntry};
use logtalk::orchestrator::{AnswerOutcome, AnswerStatus, Orchestrator};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub question: String,
    /// Chosen by the caller; generated when absent.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub session_id: String,
    pub text: String,
}

/// A CSV file on the server (`path`) or inline (`csv`), and the columns
/// holding the case id, activity and timestamp.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestRequest {
    pub path: Option<PathBuf>,
    pub csv: Option<String>,
    pub case_col: Option<String>,
    pub activity_col: Option<String>,
    pub timestamp_col: Option<String>,
    pub resource_col: Option<String>,
    pub timestamp_format: Option<String>,
}

impl IngestRequest {
    pub fn mapping(&self) -> ColumnMapping {
        let xes = ColumnMapping::xes();
        ColumnMapping {
            case_id: self.case_col.clone().unwrap_or(xes.case_id),
            activity: self.activity_col.clone().unwrap_or(xes.activity),
            timestamp: self.timestamp_col.clone().unwrap_or(xes.timestamp),
            resource: self.resource_col.clone(),
        }
    }

    pub fn format(&self) -> TimestampFormat {
        self.timestamp_format.clone().map(TimestampFormat).unwrap_or_default()
    }
}

/// An entry written by an expert: reviewed unless stated otherwise.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewEntry {
    pub term: String,
    pub category: Category,
    pub definition: String,
    #[serde(default)]
    pub data_mapping: Option<String>,
    #[serde(default)]
    pub reviewed: Option<bool>,
}

impl NewEntry {
    fn into_entry(self) -> OntologyEntry {
        OntologyEntry {
            id: None,
            term: self.term,
            category: self.category,
            definition: self.definition,
            data_mapping: self.data_mapping,
            reviewed: self.reviewed.unwrap_or(true),
            source: EntrySource::Expert,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunRequest {
    /// Inline questions; `corpus_path` names a CSV or JSONL file instead.
    pub questions: Option<Vec<Question>>,
    pub corpus_path: Option<PathBuf>,
    pub run_id: Option<String>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub ratios: RatioTable,
    pub stages: StageTable,
    pub ledger: CostLedger,
}

/// 202 while the session waits for clarification, 200 otherwise.
pub fn outcome_status(outcome: &AnswerOutcome) -> StatusCode {
    match outcome.status {
        AnswerStatus::NeedsUserFeedback => StatusCode::ACCEPTED,
        AnswerStatus::Answered | AnswerStatus::Failed => StatusCode::OK,
    }
}

pub fn router(orch: Orchestrator) -> Router {
    Router::new()
        .route("/ask", post(ask))
        .route("/feedback", post(feedback))
        .route("/ingest", post(ingest))
        .route("/ontology", get(list_ontology).post(add_ontology))
        .route("/ontology/{id}/review", post(review_ontology))
        .route("/eval/runs", post(run_eval))
        .route("/eval/runs/{id}/report", get(eval_report))
        .route("/transcripts/{*session_id}", get(transcript))
        .route("/costs", get(costs))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this endpoint")
        })
        .with_state(orch)
}

/// Library calls block on SQLite and the provider; keep them off the
/// async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("request handler failed: {e}")))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::invalid_request(e.body_text()))
}

fn answer_response(outcome: AnswerOutcome) -> Response {
    (outcome_status(&outcome), Json(outcome)).into_response()
}

async fn ask(State(o): State<Orchestrator>, payload: Result<Json<AskRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let req = body(payload)?;
    let outcome = blocking(move || {
        let out = match &req.session_id {
            Some(id) => o.answer_as(id, &req.question),
            None => o.answer(&req.question),
        };
        out.map_err(ApiError::from)
    })
    .await?;
    Ok(answer_response(outcome))
}

async fn feedback(
    State(o): State<Orchestrator>,
    payload: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let req = body(payload)?;
    let outcome = blocking(move || o.resume_with_feedback(&req.session_id, &req.text).map_err(ApiError::from)).await?;
    Ok(answer_response(outcome))
}

pub fn ingest_with(o: &Orchestrator, req: &IngestRequest) -> Result<IngestReport, ApiError> {
    let (mapping, format) = (req.mapping(), req.format());
    let report = match (&req.path, &req.csv) {
        (Some(path), None) => o.event_log().ingest_csv(path, &mapping, &format)?,
        (None, Some(csv)) => o.event_log().ingest_csv_bytes(csv.as_bytes(), &mapping, &format)?,
        _ => return Err(ApiError::invalid_request("give exactly one of `path` and `csv`")),
    };
    Ok(report)
}

async fn ingest(
    State(o): State<Orchestrator>,
    payload: Result<Json<IngestRequest>, JsonRejection>,
) -> Result<Json<IngestReport>, ApiError> {
    let req = body(payload)?;
    blocking(move || ingest_with(&o, &req)).await.map(Json)
}

async fn list_ontology(State(o): State<Orchestrator>) -> Result<Json<Vec<OntologyEntry>>, ApiError> {
    blocking(move || o.ontology().list().map_err(ApiError::from)).await.map(Json)
}

async fn add_ontology(
    State(o): State<Orchestrator>,
    payload: Result<Json<NewEntry>, JsonRejection>,
) -> Result<(StatusCode, Json<OntologyEntry>), ApiError> {
    let entry = body(payload)?.into_entry();
    let stored = blocking(move || {
        let id = o.ontology().upsert(&entry)?;
        o.ontology()
            .get(id)?
            .ok_or_else(|| ApiError::internal("stored entry vanished"))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn review_ontology(
    State(o): State<Orchestrator>,
    id: Result<Path<i64>, PathRejection>,
) -> Result<Json<OntologyEntry>, ApiError> {
    let Path(id) = id.map_err(|e| ApiError::invalid_request(e.body_text()))?;
    blocking(move || o.ontology().review(id).map_err(ApiError::from)).await.map(Json)
}

pub fn run_eval_with(o: &Orchestrator, req: &EvalRunRequest) -> Result<eval::RunSummary, ApiError> {
    let questions = match (&req.questions, &req.corpus_path) {
        (Some(q), None) => q.clone(),
        (None, Some(path)) => eval::load_corpus(path).map_err(eval::EvalError::from)?,
        _ => return Err(ApiError::invalid_request("give exactly one of `questions` and `corpus_path`")),
    };
    let opts = RunOptions {
        run_id: req.run_id.clone(),
        parallelism: req.parallelism.unwrap_or(1),
    };
    Ok(eval::run_corpus(o, &questions, &opts)?)
}

async fn run_eval(
    State(o): State<Orchestrator>,
    payload: Result<Json<EvalRunRequest>, JsonRejection>,
) -> Result<Json<eval::RunSummary>, ApiError> {
    let req = body(payload)?;
    blocking(move || run_eval_with(&o, &req)).await.map(Json)
}

pub fn report_with(o: &Orchestrator, run_id: &str) -> Result<EvalReport, ApiError> {
    Ok(EvalReport {
        run_id: run_id.to_string(),
        ratios: eval::summarize(o.db(), run_id)?,
        stages: eval::summarize_by_stage(o.db(), run_id)?,
        ledger: eval::run_ledger(o.db(), run_id)?,
    })
}

async fn eval_report(State(o): State<Orchestrator>, Path(run_id): Path<String>) -> Result<Json<EvalReport>, ApiError> {
    blocking(move || report_with(&o, &run_id)).await.map(Json)
}

async fn transcript(State(o): State<Orchestrator>, Path(session_id): Path<String>) -> Result<Response, ApiError> {
    let rec = blocking(move || {
        o.session(&session_id)?
            .ok_or_else(|| ApiError::from(logtalk::orchestrator::OrchestratorError::UnknownSession(session_id)))
    })
    .await?;
    Ok(Json(rec).into_response())
}

async fn costs(State(o): State<Orchestrator>) -> Result<Json<CostLedger>, ApiError> {
    blocking(move || llm::stored_ledger(o.db()).map_err(ApiError::from)).await.map(Json)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Serves until Ctrl-C. In-flight requests finish before returning;
/// sessions awaiting feedback are already persisted and stay resumable.
pub async fn serve(orch: Orchestrator, addr: &str) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServeError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(orch))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
