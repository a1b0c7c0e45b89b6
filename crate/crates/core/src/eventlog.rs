//! Event-log ingestion, schema context derivation, and read-only execution.
//!
//! A log is stored as one flat table (default name `eventlog`). The three
//! role columns are always called `case_concept_name`, `activity` and
//! `timestamp`; the timestamp is kept as ISO-8601 UTC text next to a numeric
//! `timestamp_epoch` (seconds) column so durations are plain subtraction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use rusqlite::types::ValueRef;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::db::{Db, DbError};
use crate::guard::ValidatedSql;

pub const DEFAULT_TABLE: &str = "eventlog";
pub const DEFAULT_ROW_CAP: usize = 10_000;

pub const CASE_COLUMN: &str = "case_concept_name";
pub const ACTIVITY_COLUMN: &str = "activity";
pub const TIMESTAMP_COLUMN: &str = "timestamp";
pub const EPOCH_COLUMN: &str = "timestamp_epoch";
pub const RESOURCE_COLUMN: &str = "resource";

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("mapping does not assign the {role} role{}", column.as_ref().map(|c| format!(" (column `{c}` not in header)")).unwrap_or_default())]
    MissingRoleMapping {
        role: &'static str,
        column: Option<String>,
    },
    #[error("cannot read {path}: {message}")]
    FileUnreadable { path: String, message: String },
    #[error("all {rejected} rows were rejected; check the timestamp format")]
    AllRowsRejected { rejected: usize },
    #[error("columns `{first}` and `{second}` both sanitize to `{name}`")]
    ColumnCollision {
        first: String,
        second: String,
        name: String,
    },
    #[error("header `{0}` cannot be turned into a column name")]
    InvalidHeader(String),
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<rusqlite::Error> for IngestError {
    fn from(e: rusqlite::Error) -> Self {
        IngestError::Db(DbError::Sqlite(e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("no event log has been ingested")]
    NoTableIngested,
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<rusqlite::Error> for SchemaError {
    fn from(e: rusqlite::Error) -> Self {
        SchemaError::Db(DbError::Sqlite(e))
    }
}

/// Execution failure. `message` is the engine's text, untouched, because it
/// is what gets fed back to the model.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct ExecError {
    pub message: String,
    pub offending_statement: String,
}

impl From<DbError> for ExecError {
    fn from(e: DbError) -> Self {
        ExecError {
            message: e.to_string(),
            offending_statement: String::new(),
        }
    }
}

/// Which source columns play the case, activity, timestamp and resource roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub case_id: String,
    pub activity: String,
    pub timestamp: String,
    #[serde(default)]
    pub resource: Option<String>,
}

impl ColumnMapping {
    /// Mapping for XES-style CSV exports.
    pub fn xes() -> Self {
        Self {
            case_id: "case:concept:name".into(),
            activity: "concept:name".into(),
            timestamp: "time:timestamp".into(),
            resource: None,
        }
    }
}

/// Timestamp parsing rule: `iso8601` (RFC 3339, or a naive
/// `YYYY-MM-DD[T ]HH:MM:SS[.f]` read as UTC) or any chrono strftime pattern.
/// Patterns without an offset are read as UTC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimestampFormat(pub String);

impl Default for TimestampFormat {
    fn default() -> Self {
        Self("iso8601".into())
    }
}

impl TimestampFormat {
    pub fn new(f: impl Into<String>) -> Self {
        Self(f.into())
    }

    pub fn parse(&self, raw: &str) -> Option<DateTime<Utc>> {
        let raw = raw.trim();
        if raw.is_empty() {
            return None;
        }
        let fmt = self.0.as_str();
        if fmt.eq_ignore_ascii_case("iso8601") || fmt.eq_ignore_ascii_case("rfc3339") {
            if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
                return Some(dt.with_timezone(&Utc));
            }
            for f in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
                if let Ok(n) = NaiveDateTime::parse_from_str(raw, f) {
                    return Some(n.and_utc());
                }
            }
            return None;
        }
        if fmt.contains("%z") || fmt.contains("%:z") || fmt.contains("%#z") {
            return DateTime::parse_from_str(raw, fmt)
                .ok()
                .map(|d| d.with_timezone(&Utc));
        }
        if let Ok(n) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(n.and_utc());
        }
        NaiveDate::parse_from_str(raw, fmt)
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(|n| n.and_utc())
    }
}

/// Canonical text form stored in the `timestamp` column.
pub fn canonical_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

fn epoch_seconds(t: &DateTime<Utc>) -> f64 {
    t.timestamp() as f64 + f64::from(t.timestamp_subsec_nanos()) / 1e9
}

/// Lowercases and replaces everything outside `[a-z0-9_]` with `_`;
/// a leading digit gets a `c_` prefix.
pub fn sanitize_column_name(raw: &str) -> Result<String, IngestError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(IngestError::InvalidHeader(raw.to_string()));
    }
    let mut out: String = trimmed
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    if out.starts_with(|c: char| c.is_ascii_digit()) {
        out.insert_str(0, "c_");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Text,
    Integer,
    Real,
    Timestamp,
}

impl DataType {
    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Text => "text",
            DataType::Integer => "integer",
            DataType::Real => "real",
            DataType::Timestamp => "timestamp",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "text" => DataType::Text,
            "integer" => DataType::Integer,
            "real" => DataType::Real,
            "timestamp" => DataType::Timestamp,
            _ => return None,
        })
    }

    fn sql_type(self) -> &'static str {
        match self {
            DataType::Text | DataType::Timestamp => "TEXT",
            DataType::Integer => "INTEGER",
            DataType::Real => "REAL",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub datatype: DataType,
    #[serde(default)]
    pub sample_values: Vec<String>,
}

/// What the model is told about the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaContext {
    pub table_name: String,
    pub columns: Vec<ColumnInfo>,
    pub row_count: u64,
}

impl SchemaContext {
    pub fn column(&self, name: &str) -> Option<&ColumnInfo> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// One event as loaded from a source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub case_id: String,
    pub activity: String,
    pub timestamp: DateTime<Utc>,
    pub resource: Option<String>,
    pub extra_attributes: BTreeMap<String, AttributeValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Integer(i64),
    Real(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_loaded: usize,
    pub rows_rejected: usize,
    pub schema: SchemaContext,
}

/// A single SQL value in a result set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(r) => Value::Real(r),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Integer(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(s) => f.write_str(s),
            Value::Blob(b) => write!(f, "<{} bytes>", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub truncated: bool,
}

impl ResultTable {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(ToString::to_string).collect())
            .collect();
        let mut widths: Vec<usize> = self.column_names.iter().map(|c| c.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.column_names);
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("-+-"),
        );
        for row in &cells {
            out.push('\n');
            out.push_str(&line(row));
        }
        if self.truncated {
            out.push_str(&format!("\n(truncated to {} rows)", self.rows.len()));
        }
        out
    }

    /// Short one-line description kept alongside cached questions.
    pub fn summary(&self) -> String {
        let head: Vec<String> = self
            .rows
            .iter()
            .take(3)
            .map(|r| {
                r.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .collect();
        format!(
            "{} row(s){} [{}]: {}",
            self.rows.len(),
            if self.truncated { "+" } else { "" },
            self.column_names.join(", "),
            head.join("; ")
        )
    }
}

/// Handle on the event table inside a [`Db`].
#[derive(Debug, Clone)]
pub struct EventLog {
    db: Db,
    table: String,
}

impl EventLog {
    pub fn new(db: Db) -> Self {
        Self {
            db,
            table: DEFAULT_TABLE.to_string(),
        }
    }

    pub fn table_name(&self) -> &str {
        &self.table
    }

    pub fn db(&self) -> &Db {
        &self.db
    }

    /// Loads a CSV file, replacing any previously ingested log.
    pub fn ingest_csv(
        &self,
        path: impl AsRef<Path>,
        mapping: &ColumnMapping,
        format: &TimestampFormat,
    ) -> Result<IngestReport, IngestError> {
        let path = path.as_ref();
        let open = || {
            std::fs::File::open(path)
                .map(std::io::BufReader::new)
                .map_err(|e| IngestError::FileUnreadable {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
        };
        self.ingest_with(open, mapping, format)
    }

    /// Same as [`EventLog::ingest_csv`] for CSV text already in memory.
    pub fn ingest_csv_bytes(
        &self,
        data: &[u8],
        mapping: &ColumnMapping,
        format: &TimestampFormat,
    ) -> Result<IngestReport, IngestError> {
        self.ingest_with(
            || Ok(std::io::Cursor::new(data)),
            mapping,
            format,
        )
    }

    fn ingest_with<R: Read>(
        &self,
        open: impl Fn() -> Result<R, IngestError>,
        mapping: &ColumnMapping,
        format: &TimestampFormat,
    ) -> Result<IngestReport, IngestError> {
        let mut reader = csv_reader(open()?);
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| IngestError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let layout = Layout::resolve(&headers, mapping)?;

        // First pass: decide which rows survive and infer extra column types.
        let mut kinds = vec![Inferred::Empty; layout.extras.len()];
        let mut accepted = 0usize;
        let mut rejected = 0usize;
        for rec in reader.records() {
            let rec = rec.map_err(|e| IngestError::Csv(e.to_string()))?;
            match layout.parse_row(&rec, format) {
                Some(_) => {
                    accepted += 1;
                    for (k, (_, idx)) in kinds.iter_mut().zip(&layout.extras) {
                        k.observe(rec.get(*idx).unwrap_or(""));
                    }
                }
                None => rejected += 1,
            }
        }
        if accepted == 0 && rejected > 0 {
            return Err(IngestError::AllRowsRejected { rejected });
        }
        let extra_types: Vec<DataType> = kinds.iter().map(|k| k.datatype()).collect();

        let mut columns: Vec<(String, DataType)> = vec![
            (CASE_COLUMN.into(), DataType::Text),
            (ACTIVITY_COLUMN.into(), DataType::Text),
            (TIMESTAMP_COLUMN.into(), DataType::Timestamp),
            (EPOCH_COLUMN.into(), DataType::Real),
        ];
        if layout.resource.is_some() {
            columns.push((RESOURCE_COLUMN.into(), DataType::Text));
        }
        for ((name, _), dt) in layout.extras.iter().zip(&extra_types) {
            columns.push((name.clone(), *dt));
        }

        let table = self.table.clone();
        self.db.write_events(|conn| -> Result<(), IngestError> {
            let tx = conn.transaction()?;
            tx.execute_batch(&format!("DROP TABLE IF EXISTS {table}; DELETE FROM meta_columns;"))?;
            let ddl = columns
                .iter()
                .map(|(n, t)| format!("{n} {}", t.sql_type()))
                .collect::<Vec<_>>()
                .join(", ");
            tx.execute_batch(&format!("CREATE TABLE {table} ({ddl});"))?;
            for (pos, (n, t)) in columns.iter().enumerate() {
                tx.execute(
                    "INSERT INTO meta_columns (position, name, datatype) VALUES (?1, ?2, ?3)",
                    rusqlite::params![pos as i64, n, t.as_str()],
                )?;
            }
            {
                let placeholders = (1..=columns.len())
                    .map(|i| format!("?{i}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                let mut insert =
                    tx.prepare(&format!("INSERT INTO {table} VALUES ({placeholders})"))?;
                let mut reader = csv_reader(open()?);
                for rec in reader.records() {
                    let rec = rec.map_err(|e| IngestError::Csv(e.to_string()))?;
                    let Some(row) = layout.parse_row(&rec, format) else {
                        continue;
                    };
                    let mut values: Vec<rusqlite::types::Value> = vec![
                        row.case_id.into(),
                        row.activity.into(),
                        canonical_timestamp(&row.timestamp).into(),
                        epoch_seconds(&row.timestamp).into(),
                    ];
                    if layout.resource.is_some() {
                        values.push(match row.resource {
                            Some(r) => r.into(),
                            None => rusqlite::types::Value::Null,
                        });
                    }
                    for ((_, idx), dt) in layout.extras.iter().zip(&extra_types) {
                        values.push(typed_value(rec.get(*idx).unwrap_or(""), *dt));
                    }
                    insert.execute(rusqlite::params_from_iter(values))?;
                }
            }
            tx.commit()?;
            Ok(())
        })?;

        let schema = self.derive_schema_context(5).map_err(|e| match e {
            SchemaError::Db(d) => IngestError::Db(d),
            SchemaError::NoTableIngested => IngestError::Csv("table vanished after ingest".into()),
        })?;
        Ok(IngestReport {
            rows_loaded: accepted,
            rows_rejected: rejected,
            schema,
        })
    }

    /// Current column list, datatypes, row count and up to `sample_k`
    /// distinct sample values per column in lexicographic order.
    pub fn derive_schema_context(&self, sample_k: usize) -> Result<SchemaContext, SchemaError> {
        let table = self.table.clone();
        self.db.read_events(|conn| -> Result<SchemaContext, SchemaError> {
            let exists: bool = conn.query_row(
                "SELECT COUNT(*) > 0 FROM sqlite_master WHERE type = 'table' AND name = ?1",
                [&table],
                |r| r.get(0),
            )?;
            if !exists {
                return Err(SchemaError::NoTableIngested);
            }
            let mut stmt =
                conn.prepare("SELECT name, datatype FROM meta_columns ORDER BY position")?;
            let meta: Vec<(String, String)> = stmt
                .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
                .collect::<Result<_, _>>()?;
            let row_count: i64 =
                conn.query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| r.get(0))?;
            let mut columns = Vec::with_capacity(meta.len());
            for (name, dt) in meta {
                let datatype = DataType::parse(&dt).unwrap_or(DataType::Text);
                let sample_values = samples(conn, &table, &name, sample_k)?;
                columns.push(ColumnInfo {
                    name,
                    datatype,
                    sample_values,
                });
            }
            Ok(SchemaContext {
                table_name: table.clone(),
                columns,
                row_count: row_count as u64,
            })
        })
    }

    /// Runs guard-approved SQL. Every statement is executed in order; the
    /// final statement's rows are returned, at most `row_cap` of them.
    pub fn execute_readonly(
        &self,
        sql: &ValidatedSql,
        row_cap: usize,
    ) -> Result<ResultTable, ExecError> {
        self.db.read_events(|conn| {
            let stmts = sql.statements();
            let mut last = None;
            for (i, text) in stmts.iter().enumerate() {
                let table = run_statement(conn, text, row_cap).map_err(|e| ExecError {
                    message: engine_message(&e),
                    offending_statement: text.clone(),
                })?;
                if i + 1 == stmts.len() {
                    last = Some(table);
                }
            }
            Ok(last.unwrap_or(ResultTable {
                column_names: vec![],
                rows: vec![],
                truncated: false,
            }))
        })
    }

    pub fn row_count(&self) -> Result<u64, SchemaError> {
        let table = self.table.clone();
        self.db.read_events(|conn| {
            conn.query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| {
                r.get::<_, i64>(0)
            })
            .map(|n| n as u64)
            .map_err(|e| match &e {
                rusqlite::Error::SqliteFailure(_, Some(m)) if m.starts_with("no such table") => {
                    SchemaError::NoTableIngested
                }
                _ => SchemaError::from(e),
            })
        })
    }
}

fn run_statement(conn: &Connection, sql: &str, row_cap: usize) -> rusqlite::Result<ResultTable> {
    let mut stmt = conn.prepare(sql)?;
    let column_names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
    let width = column_names.len();
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    let mut truncated = false;
    while let Some(row) = rows.next()? {
        if out.len() == row_cap {
            truncated = true;
            break;
        }
        let mut vals = Vec::with_capacity(width);
        for i in 0..width {
            vals.push(Value::from_ref(row.get_ref(i)?));
        }
        out.push(vals);
    }
    Ok(ResultTable {
        column_names,
        rows: out,
        truncated,
    })
}

fn engine_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(m)) => m.clone(),
        other => other.to_string(),
    }
}

fn samples(conn: &Connection, table: &str, col: &str, k: usize) -> rusqlite::Result<Vec<String>> {
    if k == 0 {
        return Ok(vec![]);
    }
    let mut stmt = conn.prepare(&format!(
        "SELECT DISTINCT CAST({col} AS TEXT) AS v FROM {table} WHERE {col} IS NOT NULL ORDER BY v LIMIT ?1"
    ))?;
    let vals = stmt
        .query_map([k as i64], |r| r.get::<_, String>(0))?
        .collect::<Result<Vec<_>, _>>()?;
    Ok(vals)
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r)
}

fn typed_value(raw: &str, dt: DataType) -> rusqlite::types::Value {
    use rusqlite::types::Value as V;
    let raw = raw.trim();
    if raw.is_empty() {
        return V::Null;
    }
    match dt {
        DataType::Integer => raw.parse::<i64>().map(V::Integer).unwrap_or(V::Null),
        DataType::Real => raw.parse::<f64>().map(V::Real).unwrap_or(V::Null),
        DataType::Text | DataType::Timestamp => V::Text(raw.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Inferred {
    Empty,
    Integer,
    Real,
    Text,
}

impl Inferred {
    fn observe(&mut self, raw: &str) {
        let raw = raw.trim();
        if raw.is_empty() {
            return;
        }
        let this = if raw.parse::<i64>().is_ok() {
            Inferred::Integer
        } else if raw.parse::<f64>().map(f64::is_finite).unwrap_or(false) {
            Inferred::Real
        } else {
            Inferred::Text
        };
        *self = match (*self, this) {
            (Inferred::Empty, t) => t,
            (Inferred::Text, _) | (_, Inferred::Text) => Inferred::Text,
            (Inferred::Real, _) | (_, Inferred::Real) => Inferred::Real,
            _ => Inferred::Integer,
        };
    }

    fn datatype(self) -> DataType {
        match self {
            Inferred::Integer => DataType::Integer,
            Inferred::Real => DataType::Real,
            Inferred::Empty | Inferred::Text => DataType::Text,
        }
    }
}

struct Layout {
    width: usize,
    case_id: usize,
    activity: usize,
    timestamp: usize,
    resource: Option<usize>,
    /// (sanitized name, source index)
    extras: Vec<(String, usize)>,
}

struct ParsedRow {
    case_id: String,
    activity: String,
    timestamp: DateTime<Utc>,
    resource: Option<String>,
}

impl Layout {
    fn resolve(headers: &[String], mapping: &ColumnMapping) -> Result<Self, IngestError> {
        let sanitized: Vec<String> = headers
            .iter()
            .map(|h| sanitize_column_name(h))
            .collect::<Result<_, _>>()?;
        let find = |role: &'static str, col: &str| -> Result<usize, IngestError> {
            if col.trim().is_empty() {
                return Err(IngestError::MissingRoleMapping { role, column: None });
            }
            headers
                .iter()
                .position(|h| h == col)
                .or_else(|| {
                    let want = sanitize_column_name(col).ok()?;
                    sanitized.iter().position(|s| *s == want)
                })
                .ok_or_else(|| IngestError::MissingRoleMapping {
                    role,
                    column: Some(col.to_string()),
                })
        };
        let case_id = find("case_id", &mapping.case_id)?;
        let activity = find("activity", &mapping.activity)?;
        let timestamp = find("timestamp", &mapping.timestamp)?;
        let resource = match &mapping.resource {
            Some(r) if !r.trim().is_empty() => Some(find("resource", r)?),
            _ => None,
        };

        let mut taken: BTreeMap<String, String> = BTreeMap::new();
        for (name, role_idx) in [
            (CASE_COLUMN, Some(case_id)),
            (ACTIVITY_COLUMN, Some(activity)),
            (TIMESTAMP_COLUMN, Some(timestamp)),
            (EPOCH_COLUMN, None),
            (RESOURCE_COLUMN, resource),
        ] {
            if name == RESOURCE_COLUMN && resource.is_none() {
                continue;
            }
            let origin = role_idx
                .map(|i| headers[i].clone())
                .unwrap_or_else(|| format!("<derived {name}>"));
            taken.insert(name.to_string(), origin);
        }
        let roles = [Some(case_id), Some(activity), Some(timestamp), resource];
        let mut extras = Vec::new();
        for (i, name) in sanitized.iter().enumerate() {
            if roles.contains(&Some(i)) {
                continue;
            }
            if let Some(first) = taken.get(name) {
                return Err(IngestError::ColumnCollision {
                    first: first.clone(),
                    second: headers[i].clone(),
                    name: name.clone(),
                });
            }
            taken.insert(name.clone(), headers[i].clone());
            extras.push((name.clone(), i));
        }
        Ok(Self {
            width: headers.len(),
            case_id,
            activity,
            timestamp,
            resource,
            extras,
        })
    }

    fn parse_row(&self, rec: &csv::StringRecord, format: &TimestampFormat) -> Option<ParsedRow> {
        if rec.len() != self.width {
            return None;
        }
        let case_id = rec.get(self.case_id)?.trim();
        let activity = rec.get(self.activity)?.trim();
        if case_id.is_empty() || activity.is_empty() {
            return None;
        }
        let timestamp = format.parse(rec.get(self.timestamp)?)?;
        let resource = self
            .resource
            .and_then(|i| rec.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        Some(ParsedRow {
            case_id: case_id.to_string(),
            activity: activity.to_string(),
            timestamp,
            resource,
        })
    }
}
