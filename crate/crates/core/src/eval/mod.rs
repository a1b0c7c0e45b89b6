//! Running question corpora, collecting human labels and summarising them.
//!
//! Every question of a run gets the session id `<run_id>/<question_id>`,
//! so reruns of the same run skip finished questions and scripted
//! providers see stable conversation ids.

mod corpus;
mod report;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::db::{Db, DbError};
use crate::llm::CostLedger;
use crate::orchestrator::{AnswerOutcome, AnswerStatus, Orchestrator, OrchestratorError, Stage, StepRecord};

pub use corpus::{load_corpus, parse_corpus, rewrite_years, CorpusError, Question};
pub use report::{percent_half_up, RatioRow, RatioTable, StageCell, StageTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerLabel {
    FullyAnswered,
    PartiallyAnswered,
    Wrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnderstandingLabel {
    Understood,
    PartiallyUnderstood,
    NotUnderstood,
}

impl AnswerLabel {
    pub const ALL: [AnswerLabel; 3] = [AnswerLabel::FullyAnswered, AnswerLabel::PartiallyAnswered, AnswerLabel::Wrong];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerLabel::FullyAnswered => "FullyAnswered",
            AnswerLabel::PartiallyAnswered => "PartiallyAnswered",
            AnswerLabel::Wrong => "Wrong",
        }
    }
}

impl UnderstandingLabel {
    pub const ALL: [UnderstandingLabel; 3] = [
        UnderstandingLabel::Understood,
        UnderstandingLabel::PartiallyUnderstood,
        UnderstandingLabel::NotUnderstood,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnderstandingLabel::Understood => "Understood",
            UnderstandingLabel::PartiallyUnderstood => "PartiallyUnderstood",
            UnderstandingLabel::NotUnderstood => "NotUnderstood",
        }
    }
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}`")]
pub struct LabelParseError(pub String);

/// Case, spaces, dashes and underscores are ignored; `answered` means
/// fully answered.
impl FromStr for AnswerLabel {
    type Err = LabelParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize(s).as_str() {
            "fullyanswered" | "fully" | "answered" => Ok(AnswerLabel::FullyAnswered),
            "partiallyanswered" | "partially" | "partial" => Ok(AnswerLabel::PartiallyAnswered),
            "wrong" => Ok(AnswerLabel::Wrong),
            _ => Err(LabelParseError(s.to_string())),
        }
    }
}

impl FromStr for UnderstandingLabel {
    type Err = LabelParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize(s).as_str() {
            "understood" => Ok(UnderstandingLabel::Understood),
            "partiallyunderstood" | "partially" | "partial" => Ok(UnderstandingLabel::PartiallyUnderstood),
            "notunderstood" | "not" => Ok(UnderstandingLabel::NotUnderstood),
            _ => Err(LabelParseError(s.to_string())),
        }
    }
}

impl fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for UnderstandingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("no evaluation run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` has no transcript for question `{question_id}`")]
    UnknownTranscript { run_id: String, question_id: String },
    #[error("{count} transcript(s) are not labeled yet")]
    UnlabeledTranscripts { count: usize },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<rusqlite::Error> for EvalError {
    fn from(e: rusqlite::Error) -> Self {
        EvalError::Db(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Reuse (and resume) this run; a fresh `run-<n>` when `None`.
    pub run_id: Option<String>,
    /// Questions answered at the same time. Transcripts are only
    /// byte-reproducible with 1, since sessions share the clock.
    pub parallelism: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            run_id: None,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    /// Questions answered by this call.
    pub executed: usize,
    /// Questions already finished by an earlier call.
    pub skipped: usize,
    pub answered: usize,
    pub needs_user_feedback: usize,
    pub failed: usize,
    /// Sum of the session ledgers of every question in the run.
    pub ledger: CostLedger,
}

/// One question's stored result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub question_id: String,
    pub position: usize,
    pub question: String,
    pub category: Option<String>,
    pub outcome: AnswerOutcome,
    pub transcript: Vec<StepRecord>,
    pub ledger: CostLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTranscript {
    pub question_id: String,
    pub question: String,
    pub outcome: AnswerOutcome,
    pub answer_label: AnswerLabel,
    pub understanding_label: UnderstandingLabel,
    /// Copied from the outcome.
    pub stage: Option<Stage>,
    pub labeler: String,
    pub notes: String,
    pub version: u32,
}

/// Runs every question not yet finished in the run. Per-question failures
/// are stored as outcomes; only store failures abort.
pub fn run_corpus(orch: &Orchestrator, corpus: &[Question], opts: &RunOptions) -> Result<RunSummary, EvalError> {
    let db = orch.db();
    let run_id = open_run(orch, opts.run_id.as_deref())?;
    let done: std::collections::HashSet<String> = results(db, &run_id)?.into_iter().map(|r| r.question_id).collect();
    let pending: Vec<(usize, &Question)> = corpus
        .iter()
        .enumerate()
        .filter(|(_, q)| !done.contains(&q.id))
        .collect();
    let skipped = corpus.len() - pending.len();

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<EvalError>> = Mutex::new(None);
    let workers = opts.parallelism.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((pos, q)) = pending.get(i) else {
                        break;
                    };
                    if let Err(e) = run_one(orch, &run_id, *pos, q) {
                        stop.store(true, Ordering::SeqCst);
                        failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                    }
                }
            });
        }
    });
    let ledger = run_ledger(db, &run_id)?;
    let snapshot = serde_json::to_string(&ledger).expect("ledger serializes");
    db.write(|c| c.execute("UPDATE eval_runs SET ledger = ?2 WHERE run_id = ?1", params![run_id, snapshot]))?;
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    let all = results(db, &run_id)?;
    let count = |s: AnswerStatus| all.iter().filter(|r| r.outcome.status == s).count();
    Ok(RunSummary {
        run_id,
        executed: pending.len(),
        skipped,
        answered: count(AnswerStatus::Answered),
        needs_user_feedback: count(AnswerStatus::NeedsUserFeedback),
        failed: count(AnswerStatus::Failed),
        ledger,
    })
}

fn open_run(orch: &Orchestrator, run_id: Option<&str>) -> Result<String, EvalError> {
    let at = orch.now().to_rfc3339();
    let id = orch.db().write(|c| match run_id {
        Some(id) => {
            c.execute(
                "INSERT INTO eval_runs (run_id, created_at) VALUES (?1, ?2) ON CONFLICT (run_id) DO NOTHING",
                params![id, at],
            )?;
            Ok(id.to_string())
        }
        None => {
            let n: i64 = c.query_row("SELECT COUNT(*) FROM eval_runs", [], |r| r.get(0))?;
            let mut k = n + 1;
            loop {
                let id = format!("run-{k}");
                let inserted = c.execute(
                    "INSERT INTO eval_runs (run_id, created_at) VALUES (?1, ?2) ON CONFLICT (run_id) DO NOTHING",
                    params![id, at],
                )?;
                if inserted == 1 {
                    return Ok(id);
                }
                k += 1;
            }
        }
    })?;
    Ok(id)
}

fn run_one(orch: &Orchestrator, run_id: &str, position: usize, q: &Question) -> Result<(), EvalError> {
    let session_id = format!("{run_id}/{}", q.id);
    let failed = |reason: String| AnswerOutcome {
        status: AnswerStatus::Failed,
        result: None,
        sql: None,
        reasoning: None,
        stage: None,
        attempts_used: 0,
        cache_hit: false,
        session_id: session_id.clone(),
        last_error: Some(reason),
    };
    let outcome = match orch.answer_as(&session_id, &q.text) {
        Ok(o) => o,
        // Interrupted after the session was created: keep what it reached.
        Err(OrchestratorError::SessionExists(_)) => match orch.session(&session_id)?.and_then(|r| r.outcome) {
            Some(o) => o,
            None => failed("the session was interrupted".into()),
        },
        Err(e @ (OrchestratorError::EmptyQuestion | OrchestratorError::IllegalTransition(_))) => failed(e.to_string()),
        Err(e) => return Err(e.into()),
    };
    let (transcript, ledger) = match orch.session(&session_id)? {
        Some(rec) => (rec.state.transcript, rec.ledger),
        None => (Vec::new(), CostLedger::default()),
    };
    orch.db().write(|c| {
        c.execute(
            "INSERT OR REPLACE INTO eval_results (run_id, question_id, position, question_text, category, outcome, transcript, ledger) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                run_id,
                q.id,
                position as i64,
                q.text,
                q.category,
                enc(&outcome),
                enc(&transcript),
                enc(&ledger)
            ],
        )
    })?;
    Ok(())
}

fn enc<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("stored values serialize")
}

fn ensure_run(db: &Db, run_id: &str) -> Result<(), EvalError> {
    let exists: bool = db.write(|c| {
        c.query_row("SELECT COUNT(*) > 0 FROM eval_runs WHERE run_id = ?1", [run_id], |r| r.get(0))
    })?;
    if exists {
        Ok(())
    } else {
        Err(EvalError::UnknownRun(run_id.to_string()))
    }
}

/// Run ids, oldest first.
pub fn runs(db: &Db) -> Result<Vec<String>, EvalError> {
    let ids = db.write(|c| {
        let mut stmt = c.prepare("SELECT run_id FROM eval_runs ORDER BY created_at, run_id")?;
        let rows = stmt.query_map([], |r| r.get(0))?;
        rows.collect::<rusqlite::Result<Vec<String>>>()
    })?;
    Ok(ids)
}

/// Stored results in corpus order.
pub fn results(db: &Db, run_id: &str) -> Result<Vec<RunResult>, EvalError> {
    ensure_run(db, run_id)?;
    type Row = (String, i64, String, Option<String>, String, String, String);
    let rows: Vec<Row> = db.write(|c| {
        let mut stmt = c.prepare(
            "SELECT question_id, position, question_text, category, outcome, transcript, ledger \
             FROM eval_results WHERE run_id = ?1 ORDER BY position",
        )?;
        let rows = stmt.query_map([run_id], |r| {
            Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?))
        })?;
        rows.collect()
    })?;
    rows.into_iter()
        .map(|(question_id, position, question, category, outcome, transcript, ledger)| {
            let corrupt = |e: serde_json::Error| DbError::Corrupt(format!("result {run_id}/{question_id}: {e}"));
            Ok(RunResult {
                outcome: serde_json::from_str(&outcome).map_err(corrupt)?,
                transcript: serde_json::from_str(&transcript).map_err(corrupt)?,
                ledger: serde_json::from_str(&ledger).map_err(corrupt)?,
                question_id,
                position: position as usize,
                question,
                category,
            })
        })
        .collect()
}

/// Sum of the session ledgers of the run's questions.
pub fn run_ledger(db: &Db, run_id: &str) -> Result<CostLedger, EvalError> {
    let mut total = CostLedger::default();
    for r in results(db, run_id)? {
        total.merge(&r.ledger);
    }
    Ok(total)
}

/// The ledger snapshot stored when the run last finished a call.
pub fn stored_run_ledger(db: &Db, run_id: &str) -> Result<Option<CostLedger>, EvalError> {
    ensure_run(db, run_id)?;
    let json: Option<String> = db.write(|c| {
        c.query_row("SELECT ledger FROM eval_runs WHERE run_id = ?1", [run_id], |r| r.get(0))
    })?;
    json.map(|j| serde_json::from_str(&j).map_err(|e| DbError::Corrupt(format!("run {run_id} ledger: {e}")).into()))
        .transpose()
}

/// Appends a label version; the latest version is the one summarised.
pub fn record_label(
    db: &Db,
    run_id: &str,
    question_id: &str,
    answer: AnswerLabel,
    understanding: UnderstandingLabel,
    labeler: &str,
    notes: &str,
) -> Result<u32, EvalError> {
    let version = db.write(|c| {
        let tx = c.transaction()?;
        let exists: bool = tx.query_row(
            "SELECT COUNT(*) > 0 FROM eval_results WHERE run_id = ?1 AND question_id = ?2",
            params![run_id, question_id],
            |r| r.get(0),
        )?;
        if !exists {
            return Ok(None);
        }
        let v: i64 = tx.query_row(
            "SELECT COALESCE(MAX(version), 0) + 1 FROM eval_labels WHERE run_id = ?1 AND question_id = ?2",
            params![run_id, question_id],
            |r| r.get(0),
        )?;
        tx.execute(
            "INSERT INTO eval_labels (run_id, question_id, version, answer_label, understanding_label, labeler, notes) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![run_id, question_id, v, answer.as_str(), understanding.as_str(), labeler, notes],
        )?;
        tx.commit()?;
        Ok(Some(v as u32))
    })?;
    version.ok_or_else(|| EvalError::UnknownTranscript {
        run_id: run_id.to_string(),
        question_id: question_id.to_string(),
    })
}

/// The latest label of every result; results without one are skipped.
pub fn latest_labels(db: &Db, run_id: &str) -> Result<Vec<LabeledTranscript>, EvalError> {
    let results = results(db, run_id)?;
    let mut out = Vec::new();
    for r in results {
        let row: Option<(i64, String, String, String, String)> = db.write(|c| {
            c.query_row(
                "SELECT version, answer_label, understanding_label, labeler, notes FROM eval_labels \
                 WHERE run_id = ?1 AND question_id = ?2 ORDER BY version DESC LIMIT 1",
                params![run_id, r.question_id],
                |x| Ok((x.get(0)?, x.get(1)?, x.get(2)?, x.get(3)?, x.get(4)?)),
            )
            .optional()
        })?;
        let Some((version, a, u, labeler, notes)) = row else {
            continue;
        };
        let corrupt = |e: LabelParseError| DbError::Corrupt(format!("label of {run_id}/{}: {e}", r.question_id));
        out.push(LabeledTranscript {
            answer_label: a.parse().map_err(corrupt)?,
            understanding_label: u.parse().map_err(corrupt)?,
            stage: r.outcome.stage,
            question_id: r.question_id,
            question: r.question,
            outcome: r.outcome,
            labeler,
            notes,
            version: version as u32,
        });
    }
    Ok(out)
}

/// Latest labels of a fully labeled run.
pub fn labeled_transcripts(db: &Db, run_id: &str) -> Result<Vec<LabeledTranscript>, EvalError> {
    let total = results(db, run_id)?.len();
    let labeled = latest_labels(db, run_id)?;
    if labeled.len() < total {
        return Err(EvalError::UnlabeledTranscripts {
            count: total - labeled.len(),
        });
    }
    Ok(labeled)
}

pub fn summarize(db: &Db, run_id: &str) -> Result<RatioTable, EvalError> {
    let labeled = labeled_transcripts(db, run_id)?;
    Ok(RatioTable::from_labels(labeled.iter().map(|l| (l.answer_label, l.understanding_label))))
}

pub fn summarize_by_stage(db: &Db, run_id: &str) -> Result<StageTable, EvalError> {
    let labeled = labeled_transcripts(db, run_id)?;
    Ok(StageTable::from_labels(labeled.iter().map(|l| (l.stage, l.answer_label))))
}
