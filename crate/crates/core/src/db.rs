//! Shared embedded store.
//!
//! One SQLite database holds the event table together with the ontology,
//! question cache, sessions, evaluation runs and the call ledger. Writes go
//! through a single writer connection; event-table queries run on pooled
//! connections that are switched to `query_only` so they cannot mutate
//! anything, whatever SQL reaches them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rusqlite::{Connection, OpenFlags};

static MEMORY_DB_SEQ: AtomicU64 = AtomicU64::new(0);

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS meta_columns (
    position INTEGER NOT NULL,
    name TEXT NOT NULL PRIMARY KEY,
    datatype TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS ontology (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    term TEXT NOT NULL,
    category TEXT NOT NULL,
    definition TEXT NOT NULL,
    data_mapping TEXT,
    reviewed INTEGER NOT NULL,
    source TEXT NOT NULL,
    UNIQUE (term COLLATE NOCASE, category)
);
CREATE TABLE IF NOT EXISTS question_cache (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    question_text TEXT NOT NULL,
    embedding TEXT NOT NULL,
    sql_text TEXT,
    success INTEGER NOT NULL,
    answer_summary TEXT,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    id TEXT NOT NULL UNIQUE,
    question TEXT NOT NULL,
    phase TEXT NOT NULL,
    record TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS llm_calls (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    line TEXT NOT NULL,
    model_id TEXT NOT NULL,
    prompt_tokens INTEGER NOT NULL,
    completion_tokens INTEGER NOT NULL,
    cost TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS eval_runs (
    run_id TEXT PRIMARY KEY,
    created_at TEXT NOT NULL,
    ledger TEXT
);
CREATE TABLE IF NOT EXISTS eval_results (
    run_id TEXT NOT NULL,
    question_id TEXT NOT NULL,
    position INTEGER NOT NULL,
    question_text TEXT NOT NULL,
    category TEXT,
    outcome TEXT NOT NULL,
    transcript TEXT NOT NULL,
    ledger TEXT NOT NULL DEFAULT '{}',
    PRIMARY KEY (run_id, question_id)
);
CREATE TABLE IF NOT EXISTS eval_labels (
    run_id TEXT NOT NULL,
    question_id TEXT NOT NULL,
    version INTEGER NOT NULL,
    answer_label TEXT NOT NULL,
    understanding_label TEXT NOT NULL,
    labeler TEXT NOT NULL,
    notes TEXT NOT NULL,
    PRIMARY KEY (run_id, question_id, version)
);
"#;

/// Errors raised by the storage layer itself.
#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("cannot open store at {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: rusqlite::Error,
    },
    #[error("store error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("corrupt stored record: {0}")]
    Corrupt(String),
}

struct Inner {
    uri: String,
    location: Option<PathBuf>,
    writer: Mutex<Connection>,
    readers: Mutex<Vec<Connection>>,
    // Held shared by event-table readers, exclusively by ingest.
    event_gate: RwLock<()>,
}

/// Cloneable handle to the embedded store.
#[derive(Clone)]
pub struct Db {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Db").field("uri", &self.inner.uri).finish()
    }
}

impl Db {
    /// Opens (creating if needed) a file-backed store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DbError> {
        let path = path.as_ref();
        let uri = format!("file:{}", path.display());
        let db = Self::with_uri(uri, Some(path.to_path_buf()))?;
        db.write(|c| c.execute_batch("PRAGMA journal_mode=WAL;"))?;
        Ok(db)
    }

    /// A private in-memory store, alive as long as any clone of the handle.
    pub fn in_memory() -> Result<Self, DbError> {
        let n = MEMORY_DB_SEQ.fetch_add(1, Ordering::Relaxed);
        let uri = format!(
            "file:logtalk-mem-{}-{n}?mode=memory&cache=shared",
            std::process::id()
        );
        Self::with_uri(uri, None)
    }

    fn with_uri(uri: String, location: Option<PathBuf>) -> Result<Self, DbError> {
        let writer = open_conn(&uri)?;
        writer.busy_timeout(std::time::Duration::from_secs(5))?;
        writer.execute_batch(SCHEMA)?;
        Ok(Self {
            inner: Arc::new(Inner {
                uri,
                location,
                writer: Mutex::new(writer),
                readers: Mutex::new(Vec::new()),
                event_gate: RwLock::new(()),
            }),
        })
    }

    /// File location, `None` for in-memory stores.
    pub fn location(&self) -> Option<&Path> {
        self.inner.location.as_deref()
    }

    /// Runs `f` on the writer connection.
    pub(crate) fn write<T>(
        &self,
        f: impl FnOnce(&mut Connection) -> rusqlite::Result<T>,
    ) -> Result<T, DbError> {
        let mut conn = self.inner.writer.lock().unwrap_or_else(|p| p.into_inner());
        Ok(f(&mut conn)?)
    }

    /// Like [`Db::write`] but with the event-table gate held exclusively.
    pub(crate) fn write_events<T, E: From<DbError>>(
        &self,
        f: impl FnOnce(&mut Connection) -> Result<T, E>,
    ) -> Result<T, E> {
        let _gate = self.inner.event_gate.write().unwrap_or_else(|p| p.into_inner());
        let mut conn = self.inner.writer.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut conn)
    }

    /// Runs `f` on a pooled `query_only` connection.
    pub(crate) fn read_events<T, E: From<DbError>>(
        &self,
        f: impl FnOnce(&Connection) -> Result<T, E>,
    ) -> Result<T, E> {
        let _gate = self.inner.event_gate.read().unwrap_or_else(|p| p.into_inner());
        let conn = self.checkout()?;
        let out = f(&conn);
        self.checkin(conn);
        out
    }

    fn checkout(&self) -> Result<Connection, DbError> {
        if let Some(c) = self.inner.readers.lock().unwrap_or_else(|p| p.into_inner()).pop() {
            return Ok(c);
        }
        let conn = open_conn(&self.inner.uri)?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch("PRAGMA query_only = ON;")?;
        Ok(conn)
    }

    fn checkin(&self, conn: Connection) {
        let mut pool = self.inner.readers.lock().unwrap_or_else(|p| p.into_inner());
        if pool.len() < 8 {
            pool.push(conn);
        }
    }
}

fn open_conn(uri: &str) -> Result<Connection, DbError> {
    Connection::open_with_flags(
        uri,
        OpenFlags::SQLITE_OPEN_READ_WRITE
            | OpenFlags::SQLITE_OPEN_CREATE
            | OpenFlags::SQLITE_OPEN_URI
            | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|source| DbError::Open {
        path: uri.to_string(),
        source,
    })
}
