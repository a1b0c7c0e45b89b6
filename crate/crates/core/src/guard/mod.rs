//! Pre-execution checks on generated SQL.
//!
//! Only `SELECT`, `WITH ... SELECT` and `EXPLAIN` are admitted, and every
//! identifier has to resolve against the event table, a CTE, a derived
//! table or a select-list alias. The only way to obtain a [`ValidatedSql`]
//! is through [`validate`], and [`crate::eventlog::EventLog::execute_readonly`]
//! accepts nothing else.

mod resolve;
mod suggest;

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use sqlparser::ast::Statement;
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use crate::eventlog::SchemaContext;
use crate::prompt::{split_statements, GeneratedSql};

pub use suggest::suggest_column;

/// A column of the event table referenced by a query.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            column: column.into(),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidatedSql {
    statements: Vec<String>,
    referenced_columns: BTreeSet<ColumnRef>,
    read_only: bool,
}

impl ValidatedSql {
    pub fn statements(&self) -> &[String] {
        &self.statements
    }

    pub fn referenced_columns(&self) -> &BTreeSet<ColumnRef> {
        &self.referenced_columns
    }

    pub fn read_only(&self) -> bool {
        self.read_only
    }

    /// All statements joined into one script.
    pub fn sql_text(&self) -> String {
        self.statements.join(";\n")
    }

    #[cfg(test)]
    pub(crate) fn unchecked(statements: Vec<String>) -> Self {
        Self {
            statements,
            referenced_columns: BTreeSet::new(),
            read_only: true,
        }
    }
}

/// Why a candidate was refused. The `Display` text is sent back to the
/// model as feedback. Statement indexes are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GuardError {
    #[error("no SQL statement to validate")]
    NoStatements,
    #[error("statement {statement_index}: SQL parse error: {message}")]
    ParseError {
        statement_index: usize,
        message: String,
    },
    #[error("statement {statement_index}: {kind} is not allowed; only read-only SELECT, WITH ... SELECT or EXPLAIN statements may be used")]
    WriteStatement { statement_index: usize, kind: String },
    #[error("statement {statement_index}: unknown column `{name}`{}", did_you_mean.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default())]
    UnknownColumn {
        statement_index: usize,
        name: String,
        did_you_mean: Option<String>,
    },
    #[error("statement {statement_index}: unknown table `{name}`; the event log is in table `{expected}`")]
    UnknownTable {
        statement_index: usize,
        name: String,
        expected: String,
    },
    #[error("statement {statement_index}: unsupported construct: {construct}")]
    Unsupported {
        statement_index: usize,
        construct: String,
    },
}

pub fn validate(candidate: &GeneratedSql, schema: &SchemaContext) -> Result<ValidatedSql, GuardError> {
    validate_statements(&candidate.statements, schema)
}

/// Validates already-split statement texts. A text holding several
/// statements is split further.
pub fn validate_statements<S: AsRef<str>>(
    statements: &[S],
    schema: &SchemaContext,
) -> Result<ValidatedSql, GuardError> {
    let pieces: Vec<String> = statements
        .iter()
        .flat_map(|s| split_statements(s.as_ref()))
        .collect();
    if pieces.is_empty() {
        return Err(GuardError::NoStatements);
    }
    let mut refs = BTreeSet::new();
    for (i, text) in pieces.iter().enumerate() {
        let index = i + 1;
        let stmt = parse_one(text, index)?;
        check_statement(&stmt, schema, index, &mut refs)?;
    }
    Ok(ValidatedSql {
        statements: pieces,
        referenced_columns: refs,
        read_only: true,
    })
}

/// Event-table columns a query touches, with aliases followed and `*`
/// expanded.
pub fn list_referenced_columns(
    sql: &str,
    schema: &SchemaContext,
) -> Result<BTreeSet<ColumnRef>, GuardError> {
    validate_statements(&[sql], schema).map(|v| v.referenced_columns)
}

fn parse_one(text: &str, index: usize) -> Result<Statement, GuardError> {
    let mut parsed = Parser::parse_sql(&SQLiteDialect {}, text).map_err(|e| GuardError::ParseError {
        statement_index: index,
        message: e.to_string().trim_start_matches("sql parser error: ").to_string(),
    })?;
    match parsed.len() {
        1 => Ok(parsed.remove(0)),
        0 => Err(GuardError::ParseError {
            statement_index: index,
            message: "empty statement".into(),
        }),
        _ => Err(GuardError::ParseError {
            statement_index: index,
            message: "expected a single statement".into(),
        }),
    }
}

fn check_statement(
    stmt: &Statement,
    schema: &SchemaContext,
    index: usize,
    refs: &mut BTreeSet<ColumnRef>,
) -> Result<(), GuardError> {
    match stmt {
        Statement::Query(q) => resolve::Analyzer::new(schema, index, refs).check_query(q),
        Statement::Explain { statement, .. } => match statement.as_ref() {
            Statement::Query(_) => check_statement(statement, schema, index, refs),
            other => Err(GuardError::WriteStatement {
                statement_index: index,
                kind: statement_kind(other),
            }),
        },
        other => Err(GuardError::WriteStatement {
            statement_index: index,
            kind: statement_kind(other),
        }),
    }
}

/// Leading keyword(s) of a statement, e.g. `DELETE` or `CREATE TABLE`.
pub(crate) fn statement_kind(stmt: &Statement) -> String {
    let text = stmt.to_string();
    let mut words = text.split_whitespace().map(|w| w.to_ascii_uppercase());
    let first = words.next().unwrap_or_default();
    match first.as_str() {
        "CREATE" | "DROP" | "ALTER" => {
            let second = words
                .find(|w| !matches!(w.as_str(), "OR" | "REPLACE" | "TEMP" | "TEMPORARY" | "UNIQUE" | "VIRTUAL"))
                .unwrap_or_default();
            format!("{first} {second}").trim().to_string()
        }
        _ => first,
    }
}
