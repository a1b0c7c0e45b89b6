//! Durable sessions: one row per session holding its full record as JSON.

use chrono::{DateTime, Utc};
use rusqlite::{params, ErrorCode, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::{AnswerOutcome, OrchestrationState, Phase};
use crate::cache::Vector;
use crate::db::{Db, DbError};
use crate::eventlog::ResultTable;
use crate::llm::CostLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub state: OrchestrationState,
    /// Question embedding; `None` when embedding failed and the cache was
    /// bypassed.
    pub embedding: Option<Vector>,
    /// Every call made on behalf of this session.
    pub ledger: CostLedger,
    pub result: Option<ResultTable>,
    pub outcome: Option<AnswerOutcome>,
    pub created_at: DateTime<Utc>,
    pub awaiting_since: Option<DateTime<Utc>>,
}

pub(super) enum Created {
    Id(String),
    Exists,
}

/// Reserves a session row. With no id given, the next `session-<n>` is
/// assigned.
pub(super) fn create(db: &Db, id: Option<&str>, question: &str, at: DateTime<Utc>) -> Result<Created, DbError> {
    let at = at.to_rfc3339();
    let r = db.write(|c| {
        let res = match id {
            Some(id) => c.query_row(
                "INSERT INTO sessions (id, question, phase, record, updated_at) VALUES (?1, ?2, 'Received', '{}', ?3) RETURNING id",
                params![id, question, at],
                |r| r.get::<_, String>(0),
            ),
            None => c.query_row(
                "INSERT INTO sessions (id, question, phase, record, updated_at) \
                 VALUES ('session-' || (SELECT COALESCE(MAX(seq), 0) + 1 FROM sessions), ?1, 'Received', '{}', ?2) RETURNING id",
                params![question, at],
                |r| r.get::<_, String>(0),
            ),
        };
        match res {
            Ok(id) => Ok(Created::Id(id)),
            Err(rusqlite::Error::SqliteFailure(e, _)) if e.code == ErrorCode::ConstraintViolation => Ok(Created::Exists),
            Err(e) => Err(e),
        }
    })?;
    Ok(r)
}

pub(super) fn save(db: &Db, rec: &SessionRecord, at: DateTime<Utc>) -> Result<(), DbError> {
    let json = serde_json::to_string(rec).map_err(|e| DbError::Corrupt(e.to_string()))?;
    db.write(|c| {
        c.execute(
            "UPDATE sessions SET phase = ?2, record = ?3, updated_at = ?4 WHERE id = ?1",
            params![rec.state.session_id, rec.state.phase.as_str(), json, at.to_rfc3339()],
        )
    })?;
    Ok(())
}

pub(super) fn load(db: &Db, id: &str) -> Result<Option<SessionRecord>, DbError> {
    let json: Option<String> = db.write(|c| {
        c.query_row("SELECT record FROM sessions WHERE id = ?1", [id], |r| r.get(0))
            .optional()
    })?;
    match json {
        None => Ok(None),
        // A reserved row whose first save has not happened yet.
        Some(j) if j == "{}" => Ok(None),
        Some(j) => serde_json::from_str(&j)
            .map(Some)
            .map_err(|e| DbError::Corrupt(format!("session {id}: {e}"))),
    }
}

/// Atomically moves an awaiting session to `Prompting`; false when it was
/// not awaiting, so two resumptions of one session cannot both run.
pub(super) fn claim_awaiting(db: &Db, id: &str) -> Result<bool, DbError> {
    let n = db.write(|c| {
        c.execute(
            "UPDATE sessions SET phase = ?2 WHERE id = ?1 AND phase = ?3",
            params![id, Phase::Prompting.as_str(), Phase::AwaitingUserFeedback.as_str()],
        )
    })?;
    Ok(n == 1)
}

/// Session ids, oldest first.
pub(super) fn list(db: &Db) -> Result<Vec<(String, Phase)>, DbError> {
    let rows: Vec<(String, String)> = db.write(|c| {
        let mut stmt = c.prepare("SELECT id, phase FROM sessions ORDER BY seq")?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?;
        rows.collect()
    })?;
    rows.into_iter()
        .map(|(id, p)| {
            let phase = serde_json::from_value(serde_json::Value::String(p.clone()))
                .map_err(|_| DbError::Corrupt(format!("session {id} has phase `{p}`")))?;
            Ok((id, phase))
        })
        .collect()
}
