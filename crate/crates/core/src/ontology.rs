//! The context ontology: domain, process-mining, dataset and mapping
//! knowledge injected into prompts.
//!
//! Entries proposed by the model are stored unreviewed and stay out of
//! every prompt until an expert reviews them.

use std::collections::BTreeSet;
use std::fmt;

use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::cache::{cosine, embed};
use crate::db::{Db, DbError};
use crate::eventlog::SchemaContext;
use crate::guard::{self, GuardError};
use crate::llm::{Gateway, GatewayError, Tier};
use crate::prompt::Templates;

pub const DEFAULT_LIMIT: usize = 8;
const TERM_WEIGHT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Domain,
    ProcessMining,
    Dataset,
    Mapping,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Domain => "Domain",
            Category::ProcessMining => "ProcessMining",
            Category::Dataset => "Dataset",
            Category::Mapping => "Mapping",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Domain" => Category::Domain,
            "ProcessMining" => Category::ProcessMining,
            "Dataset" => Category::Dataset,
            "Mapping" => Category::Mapping,
            _ => return None,
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntrySource {
    Expert,
    LlmProposed,
}

impl EntrySource {
    fn as_str(self) -> &'static str {
        match self {
            EntrySource::Expert => "Expert",
            EntrySource::LlmProposed => "LlmProposed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyEntry {
    /// Assigned by the store; ignored on upsert.
    #[serde(default)]
    pub id: Option<i64>,
    pub term: String,
    pub category: Category,
    pub definition: String,
    #[serde(default)]
    pub data_mapping: Option<String>,
    pub reviewed: bool,
    pub source: EntrySource,
}

impl OntologyEntry {
    /// A reviewed expert entry.
    pub fn expert(term: impl Into<String>, category: Category, definition: impl Into<String>) -> Self {
        Self {
            id: None,
            term: term.into(),
            category,
            definition: definition.into(),
            data_mapping: None,
            reviewed: true,
            source: EntrySource::Expert,
        }
    }

    pub fn with_mapping(mut self, mapping: impl Into<String>) -> Self {
        self.data_mapping = Some(mapping.into());
        self
    }
}

/// Import format: like [`OntologyEntry`] but `reviewed` defaults to true for
/// expert entries and `source` defaults to `Expert`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportEntry {
    #[serde(default)]
    id: Option<i64>,
    term: String,
    category: Category,
    definition: String,
    #[serde(default)]
    data_mapping: Option<String>,
    reviewed: Option<bool>,
    source: Option<EntrySource>,
}

#[derive(Debug, thiserror::Error)]
pub enum OntologyError {
    #[error("invalid ontology entry: {0}")]
    InvalidEntry(String),
    #[error("no ontology entry with id {0}")]
    UnknownEntry(i64),
    #[error("cannot import ontology: {0}")]
    Import(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<rusqlite::Error> for OntologyError {
    fn from(e: rusqlite::Error) -> Self {
        OntologyError::Db(e.into())
    }
}

/// A model reply that could not be turned into proposals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub stored: Vec<OntologyEntry>,
    pub warnings: Vec<ParseWarning>,
}

/// How candidate entries are ranked.
#[derive(Clone, Debug, Default)]
pub enum Relevance {
    /// Token overlap with term and definition.
    #[default]
    TokenOverlap,
    /// Token overlap, then cosine similarity of embeddings; entries without
    /// token overlap qualify when their similarity reaches `min_similarity`.
    Embedding { gateway: Gateway, min_similarity: f64 },
}

#[derive(Clone)]
pub struct Ontology {
    db: Db,
}

const COLUMNS: &str = "id, term, category, definition, data_mapping, reviewed, source";

impl Ontology {
    pub fn new(db: Db) -> Self {
        Self { db }
    }

    /// Inserts or replaces the entry with the same term (case-insensitive)
    /// and category. A replaced entry keeps its id.
    pub fn upsert(&self, entry: &OntologyEntry) -> Result<i64, OntologyError> {
        let term = entry.term.trim();
        if term.is_empty() {
            return Err(OntologyError::InvalidEntry("term is empty".into()));
        }
        let mapping = entry.data_mapping.as_deref().map(str::trim).filter(|m| !m.is_empty());
        let id = self.db.write(|c| {
            c.execute(
                "INSERT INTO ontology (term, category, definition, data_mapping, reviewed, source) \
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6) \
                 ON CONFLICT (term COLLATE NOCASE, category) DO UPDATE SET \
                 term = excluded.term, definition = excluded.definition, data_mapping = excluded.data_mapping, \
                 reviewed = excluded.reviewed, source = excluded.source",
                params![
                    term,
                    entry.category.as_str(),
                    entry.definition.trim(),
                    mapping,
                    entry.reviewed,
                    entry.source.as_str()
                ],
            )?;
            c.query_row(
                "SELECT id FROM ontology WHERE term = ?1 COLLATE NOCASE AND category = ?2",
                params![term, entry.category.as_str()],
                |r| r.get(0),
            )
        })?;
        Ok(id)
    }

    pub fn get(&self, id: i64) -> Result<Option<OntologyEntry>, OntologyError> {
        let row = self.db.write(|c| {
            c.query_row(&format!("SELECT {COLUMNS} FROM ontology WHERE id = ?1"), [id], raw_row)
                .optional()
        })?;
        row.map(decode).transpose()
    }

    pub fn find(&self, term: &str, category: Category) -> Result<Option<OntologyEntry>, OntologyError> {
        let row = self.db.write(|c| {
            c.query_row(
                &format!("SELECT {COLUMNS} FROM ontology WHERE term = ?1 COLLATE NOCASE AND category = ?2"),
                params![term.trim(), category.as_str()],
                raw_row,
            )
            .optional()
        })?;
        row.map(decode).transpose()
    }

    /// All entries ordered by category, then term.
    pub fn list(&self) -> Result<Vec<OntologyEntry>, OntologyError> {
        let rows = self.db.write(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {COLUMNS} FROM ontology ORDER BY category, term COLLATE NOCASE, id"
            ))?;
            let rows = stmt.query_map([], raw_row)?;
            rows.collect::<rusqlite::Result<Vec<_>>>()
        })?;
        rows.into_iter().map(decode).collect()
    }

    pub fn delete(&self, id: i64) -> Result<bool, OntologyError> {
        let n = self.db.write(|c| c.execute("DELETE FROM ontology WHERE id = ?1", [id]))?;
        Ok(n > 0)
    }

    /// Marks an entry reviewed, making it eligible for prompts.
    pub fn review(&self, id: i64) -> Result<OntologyEntry, OntologyError> {
        let n = self
            .db
            .write(|c| c.execute("UPDATE ontology SET reviewed = 1 WHERE id = ?1", [id]))?;
        if n == 0 {
            return Err(OntologyError::UnknownEntry(id));
        }
        self.get(id)?.ok_or(OntologyError::UnknownEntry(id))
    }

    pub fn export_json(&self) -> Result<String, OntologyError> {
        Ok(serde_json::to_string_pretty(&self.list()?).expect("entries serialize"))
    }

    /// Upserts every entry of a JSON array; nothing is written if any
    /// entry is invalid.
    pub fn import_json(&self, json: &str) -> Result<usize, OntologyError> {
        let raw: Vec<ImportEntry> = serde_json::from_str(json).map_err(|e| OntologyError::Import(e.to_string()))?;
        let entries: Vec<OntologyEntry> = raw
            .into_iter()
            .map(|r| {
                let source = r.source.unwrap_or(EntrySource::Expert);
                OntologyEntry {
                    id: r.id,
                    term: r.term,
                    category: r.category,
                    definition: r.definition,
                    data_mapping: r.data_mapping,
                    reviewed: r.reviewed.unwrap_or(source == EntrySource::Expert),
                    source,
                }
            })
            .collect();
        if let Some(i) = entries.iter().position(|e| e.term.trim().is_empty()) {
            return Err(OntologyError::Import(format!("entry {} has an empty term", i + 1)));
        }
        for e in &entries {
            self.upsert(e)?;
        }
        Ok(entries.len())
    }

    /// Up to `limit` reviewed entries for `question`, best first (score
    /// descending, then term). Dataset entries are always candidates;
    /// entries whose mapping names columns the schema lacks are skipped.
    pub fn select_relevant(
        &self,
        question: &str,
        schema: &SchemaContext,
        limit: usize,
    ) -> Result<Vec<OntologyEntry>, OntologyError> {
        self.select_relevant_with(question, schema, limit, &Relevance::TokenOverlap)
    }

    pub fn select_relevant_with(
        &self,
        question: &str,
        schema: &SchemaContext,
        limit: usize,
        relevance: &Relevance,
    ) -> Result<Vec<OntologyEntry>, OntologyError> {
        let q = content_tokens(question);
        let question_vec = match relevance {
            Relevance::Embedding { gateway, .. } if !question.trim().is_empty() => {
                Some((embed(question, gateway).map_err(embed_error)?, gateway))
            }
            _ => None,
        };
        let mut scored = Vec::new();
        for e in self.list()? {
            if !e.reviewed || mapping_is_stale(&e, schema) {
                continue;
            }
            let score = overlap_score(&q, &e);
            let sim = match &question_vec {
                Some((qv, gateway)) => {
                    let ev = embed(&format!("{}: {}", e.term, e.definition), gateway).map_err(embed_error)?;
                    cosine(qv, &ev).unwrap_or(0.0)
                }
                None => 0.0,
            };
            let similar = match relevance {
                Relevance::Embedding { min_similarity, .. } => sim >= *min_similarity,
                Relevance::TokenOverlap => false,
            };
            if score > 0 || similar || e.category == Category::Dataset {
                scored.push((score, sim, e));
            }
        }
        scored.sort_by(|(s1, c1, e1), (s2, c2, e2)| {
            s2.cmp(s1)
                .then_with(|| c2.total_cmp(c1))
                .then_with(|| e1.term.to_lowercase().cmp(&e2.term.to_lowercase()))
                .then_with(|| e1.category.cmp(&e2.category))
        });
        Ok(scored.into_iter().take(limit).map(|(_, _, e)| e).collect())
    }

    /// Asks the model for Dataset entries describing `schema` and stores
    /// them unreviewed. Existing (term, category) pairs are never
    /// overwritten. A malformed reply stores nothing and yields a warning.
    pub fn bootstrap_proposals(
        &self,
        schema: &SchemaContext,
        gateway: &Gateway,
        templates: &Templates,
    ) -> Result<BootstrapReport, OntologyError> {
        let bundle = templates.domain_expert(schema);
        let ex = gateway.complete("ontology-bootstrap", bundle.render(), Tier::Tier1)?;
        let mut report = BootstrapReport {
            stored: Vec::new(),
            warnings: Vec::new(),
        };
        let proposals = match parse_proposals(&ex.response.text) {
            Ok(p) => p,
            Err(message) => {
                tracing::warn!(%message, "ontology bootstrap reply rejected");
                report.warnings.push(ParseWarning { message });
                return Ok(report);
            }
        };
        for p in proposals {
            if self.find(&p.term, p.category)?.is_some() {
                report.warnings.push(ParseWarning {
                    message: format!("`{}` ({}) already exists; proposal skipped", p.term, p.category),
                });
                continue;
            }
            let id = self.upsert(&p)?;
            report.stored.push(OntologyEntry { id: Some(id), ..p });
        }
        Ok(report)
    }
}

fn embed_error(e: crate::cache::EmbedError) -> OntologyError {
    match e {
        crate::cache::EmbedError::Gateway(g) => OntologyError::Gateway(g),
        crate::cache::EmbedError::EmptyText => OntologyError::InvalidEntry("empty text cannot be embedded".into()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Proposal {
    term: String,
    #[serde(default)]
    category: Option<Category>,
    definition: String,
    #[serde(default)]
    data_mapping: Option<String>,
}

fn parse_proposals(reply: &str) -> Result<Vec<OntologyEntry>, String> {
    let body = json_block(reply).ok_or_else(|| "reply contains no JSON array".to_string())?;
    let raw: Vec<Proposal> = serde_json::from_str(body).map_err(|e| format!("malformed proposal list: {e}"))?;
    let mut out = Vec::new();
    for (i, p) in raw.into_iter().enumerate() {
        if p.term.trim().is_empty() || p.definition.trim().is_empty() {
            return Err(format!("malformed proposal list: proposal {} lacks a term or definition", i + 1));
        }
        out.push(OntologyEntry {
            id: None,
            term: p.term.trim().to_string(),
            category: p.category.unwrap_or(Category::Dataset),
            definition: p.definition.trim().to_string(),
            data_mapping: p.data_mapping,
            reviewed: false,
            source: EntrySource::LlmProposed,
        });
    }
    Ok(out)
}

/// A fenced `json` block, else the span from the first `[` to the last `]`.
fn json_block(reply: &str) -> Option<&str> {
    if let Some(start) = reply.find("```json") {
        let rest = &reply[start + 7..];
        let end = rest.find("```").unwrap_or(rest.len());
        return Some(rest[..end].trim());
    }
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    (end > start).then(|| &reply[start..=end])
}

/// A mapping is stale when it names a column or table the schema lacks.
/// Mappings that are neither a query nor a predicate are kept.
fn mapping_is_stale(e: &OntologyEntry, schema: &SchemaContext) -> bool {
    let Some(m) = e.data_mapping.as_deref() else {
        return false;
    };
    let verdict = match guard::validate_statements(&[m], schema) {
        Err(GuardError::ParseError { .. }) | Err(GuardError::WriteStatement { .. }) => {
            let predicate = format!("SELECT 1 FROM {} WHERE {m}", schema.table_name);
            guard::validate_statements(&[predicate], schema)
        }
        other => other,
    };
    matches!(
        verdict,
        Err(GuardError::UnknownColumn { .. }) | Err(GuardError::UnknownTable { .. })
    )
}

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "an", "and", "any", "are", "as", "at", "be", "by", "can", "do", "does", "for",
    "from", "has", "have", "how", "i", "if", "in", "is", "it", "its", "me", "my", "of", "on", "or",
    "our", "per", "show", "that", "the", "their", "there", "this", "to", "was", "we", "were", "what",
    "when", "where", "which", "who", "why", "with",
];

/// Lowercase alphanumeric tokens minus common English function words.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

/// For each distinct question token: 3 if it occurs in the term, plus 1 if
/// it occurs in the definition.
pub fn overlap_score(question_tokens: &BTreeSet<String>, entry: &OntologyEntry) -> u32 {
    let term = content_tokens(&entry.term);
    let def = content_tokens(&entry.definition);
    question_tokens
        .iter()
        .map(|t| TERM_WEIGHT * u32::from(term.contains(t)) + u32::from(def.contains(t)))
        .sum()
}

type RawRow = (i64, String, String, String, Option<String>, bool, String);

fn raw_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<RawRow> {
    Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?))
}

fn decode((id, term, category, definition, data_mapping, reviewed, source): RawRow) -> Result<OntologyEntry, OntologyError> {
    let category = Category::parse(&category)
        .ok_or_else(|| DbError::Corrupt(format!("ontology entry {id} has category `{category}`")))?;
    let source = match source.as_str() {
        "Expert" => EntrySource::Expert,
        "LlmProposed" => EntrySource::LlmProposed,
        other => return Err(DbError::Corrupt(format!("ontology entry {id} has source `{other}`")).into()),
    };
    Ok(OntologyEntry {
        id: Some(id),
        term,
        category,
        definition,
        data_mapping,
        reviewed,
        source,
    })
}
