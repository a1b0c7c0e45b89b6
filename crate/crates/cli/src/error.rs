//! Errors as the HTTP service reports them: a stable machine code, a
//! human message and a status. Each library error variant maps to one code.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use logtalk::db::DbError;
use logtalk::eval::{EvalError, LabelParseError};
use logtalk::eventlog::IngestError;
use logtalk::ontology::OntologyError;
use logtalk::orchestrator::OrchestratorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.code)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

fn from_db(e: &DbError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store_error", e.to_string())
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError as E;
        use StatusCode as S;
        let (status, code) = match &e {
            E::EmptyQuestion => (S::BAD_REQUEST, "empty_question"),
            E::EmptyFeedback => (S::BAD_REQUEST, "empty_feedback"),
            E::NoEventLog => (S::CONFLICT, "no_event_log"),
            E::Config(_) => (S::BAD_REQUEST, "invalid_config"),
            E::UnknownSession(_) => (S::NOT_FOUND, "unknown_session"),
            E::SessionNotAwaiting { .. } => (S::CONFLICT, "session_not_awaiting"),
            E::SessionExpired(_) => (S::GONE, "session_expired"),
            E::SessionExists(_) => (S::CONFLICT, "session_exists"),
            E::IllegalTransition(_) => (S::CONFLICT, "illegal_transition"),
            E::Cache(_) => (S::INTERNAL_SERVER_ERROR, "cache_error"),
            E::Ontology(o) => ontology_code(o),
            E::Db(d) => return from_db(d),
        };
        ApiError::new(status, code, e.to_string())
    }
}

fn ontology_code(e: &OntologyError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        OntologyError::InvalidEntry(_) => (S::BAD_REQUEST, "invalid_ontology_entry"),
        OntologyError::UnknownEntry(_) => (S::NOT_FOUND, "unknown_ontology_entry"),
        OntologyError::Import(_) => (S::BAD_REQUEST, "invalid_ontology_import"),
        OntologyError::Gateway(_) => (S::BAD_GATEWAY, "provider_error"),
        OntologyError::Db(_) => (S::INTERNAL_SERVER_ERROR, "store_error"),
    }
}

impl From<OntologyError> for ApiError {
    fn from(e: OntologyError) -> Self {
        let (status, code) = ontology_code(&e);
        ApiError::new(status, code, e.to_string())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        use StatusCode as S;
        let (status, code) = match e {
            EvalError::Orchestrator(o) => return o.into(),
            EvalError::Db(ref d) => return from_db(d),
            EvalError::Corpus(_) => (S::BAD_REQUEST, "invalid_corpus"),
            EvalError::UnknownRun(_) => (S::NOT_FOUND, "unknown_run"),
            EvalError::UnknownTranscript { .. } => (S::NOT_FOUND, "unknown_transcript"),
            EvalError::UnlabeledTranscripts { .. } => (S::CONFLICT, "unlabeled_transcripts"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let code = match &e {
            IngestError::MissingRoleMapping { .. } => "missing_role_mapping",
            IngestError::FileUnreadable { .. } => "file_unreadable",
            IngestError::AllRowsRejected { .. } => "all_rows_rejected",
            IngestError::ColumnCollision { .. } => "column_collision",
            IngestError::InvalidHeader(_) => "invalid_header",
            IngestError::Csv(_) => "malformed_csv",
            IngestError::Db(d) => return from_db(d),
        };
        ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string())
    }
}

impl From<DbError> for ApiError {
    fn from(e: DbError) -> Self {
        from_db(&e)
    }
}

impl From<LabelParseError> for ApiError {
    fn from(e: LabelParseError) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_label", e.to_string())
    }
}
