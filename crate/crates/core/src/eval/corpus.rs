//! Question corpora: CSV with an `id,text,category` header, or JSON lines.

use std::collections::HashSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {message}")]
    Io { path: String, message: String },
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
}

impl CorpusError {
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Parse { line, .. } | CorpusError::DuplicateId { line, .. } => Some(*line),
            CorpusError::Io { .. } => None,
        }
    }
}

/// Loads every question as written; flawed or off-topic questions are kept.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Question>, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_corpus(&text)
}

/// JSON lines when the first non-blank character is `{`, CSV otherwise.
pub fn parse_corpus(text: &str) -> Result<Vec<Question>, CorpusError> {
    let questions = if text.trim_start().starts_with('{') {
        parse_jsonl(text)?
    } else {
        parse_csv(text)?
    };
    let mut seen = HashSet::new();
    for (line, q) in &questions {
        if q.id.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: *line,
                message: "empty id".into(),
            });
        }
        if !seen.insert(q.id.as_str()) {
            return Err(CorpusError::DuplicateId {
                line: *line,
                id: q.id.clone(),
            });
        }
    }
    Ok(questions.into_iter().map(|(_, q)| q).collect())
}

fn parse_jsonl(text: &str) -> Result<Vec<(usize, Question)>, CorpusError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        id: serde_json::Value,
        text: String,
        #[serde(default)]
        category: Option<String>,
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    message: format!("id must be a string or a number, found {other}"),
                })
            }
        };
        out.push((
            i + 1,
            Question {
                id,
                text: raw.text,
                category: raw.category.filter(|c| !c.trim().is_empty()),
            },
        ));
    }
    Ok(out)
}

fn parse_csv(text: &str) -> Result<Vec<(usize, Question)>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CorpusError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let index = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(id_col), Some(text_col)) = (index("id"), index("text")) else {
        return Err(CorpusError::Parse {
            line: 1,
            message: "the header must name `id` and `text` columns".into(),
        });
    };
    let cat_col = index("category");
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CorpusError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).map(str::to_string);
        let (Some(id), Some(text)) = (field(id_col), field(text_col)) else {
            return Err(CorpusError::Parse {
                line,
                message: "missing id or text field".into(),
            });
        };
        let category = cat_col.and_then(field).filter(|c| !c.trim().is_empty());
        out.push((
            line,
            Question {
                id: id.trim().to_string(),
                text,
                category,
            },
        ));
    }
    Ok(out)
}

static YEAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(19|20)\d{2}\b").expect("valid pattern"));

/// Replaces every four-digit year from 1900 to 2099 with `year`, so
/// year-specific questions match the period the log covers.
pub fn rewrite_years(questions: &[Question], year: i32) -> Vec<Question> {
    let y = year.to_string();
    questions
        .iter()
        .map(|q| Question {
            text: YEAR.replace_all(&q.text, y.as_str()).into_owned(),
            ..q.clone()
        })
        .collect()
}
