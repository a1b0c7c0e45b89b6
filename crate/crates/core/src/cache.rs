//! Past questions with their embeddings, SQL and outcome.
//!
//! Lookups are a linear cosine scan. Records are kept for failed questions
//! as well; only successful ones may short-circuit a new question.

use std::hash::Hasher;
use std::io::{BufRead, Write};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::db::{Db, DbError};
use crate::llm::{EmbeddingUsage, Gateway, GatewayError};

pub const FALLBACK_DIMENSION: usize = 256;
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.9;

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VectorError {
    #[error("vector has no components")]
    Empty,
    #[error("vector component {index} is not finite")]
    NonFinite { index: usize },
}

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = VectorError;

    fn try_from(v: Vec<f64>) -> Result<Self, VectorError> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CosineError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine is undefined for an all-zero vector")]
    ZeroVector,
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]` against rounding.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64, CosineError> {
    if a.dimension() != b.dimension() {
        return Err(CosineError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(CosineError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Feature-hashed bag of words: lowercase alphanumeric tokens counted into
/// 256 FNV buckets, L2-normalized. Text without alphanumerics is hashed as
/// one token so the result is never all-zero.
pub fn fallback_embedding(text: &str) -> Vector {
    let lowered = text.trim().to_lowercase();
    let mut tokens: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        tokens.push(&lowered);
    }
    let mut buckets = vec![0.0; FALLBACK_DIMENSION];
    for t in tokens {
        let mut h = fnv::FnvHasher::default();
        h.write(t.as_bytes());
        buckets[(h.finish() % FALLBACK_DIMENSION as u64) as usize] += 1.0;
    }
    let norm = buckets.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    for b in &mut buckets {
        *b /= norm;
    }
    Vector(buckets)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Provider embedding when the gateway has one, the local fallback
/// otherwise.
pub fn embed(text: &str, gateway: &Gateway) -> Result<Vector, EmbedError> {
    embed_metered(text, gateway).map(|(v, _)| v)
}

/// [`embed`] with the provider usage; `None` for the local fallback.
pub fn embed_metered(text: &str, gateway: &Gateway) -> Result<(Vector, Option<EmbeddingUsage>), EmbedError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    match gateway.embed_metered(text) {
        Ok((v, usage)) => Ok((v, Some(usage))),
        Err(GatewayError::ProviderUnavailable) => Ok((fallback_embedding(text), None)),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedQuestion {
    pub id: i64,
    pub question_text: String,
    pub embedding: Vector,
    pub sql: Option<String>,
    pub success: bool,
    pub answer_summary: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("invalid cache record: {0}")]
    InvalidRecord(String),
    #[error("cached question {id} has dimension {found}, the query has {expected}; the embedding provider changed, export and rebuild the cache")]
    DimensionMismatch { id: i64, expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<rusqlite::Error> for CacheError {
    fn from(e: rusqlite::Error) -> Self {
        CacheError::Db(e.into())
    }
}

#[derive(Clone)]
pub struct QuestionCache {
    db: Db,
    clock: Arc<dyn Clock>,
}

impl QuestionCache {
    pub fn new(db: Db, clock: Arc<dyn Clock>) -> Self {
        Self { db, clock }
    }

    pub fn store(
        &self,
        question_text: &str,
        embedding: &Vector,
        sql: Option<&str>,
        success: bool,
        answer_summary: Option<&str>,
    ) -> Result<i64, CacheError> {
        let at = self.clock.now();
        self.insert(question_text, embedding, sql, success, answer_summary, at)
    }

    fn insert(
        &self,
        question_text: &str,
        embedding: &Vector,
        sql: Option<&str>,
        success: bool,
        answer_summary: Option<&str>,
        at: DateTime<Utc>,
    ) -> Result<i64, CacheError> {
        if question_text.trim().is_empty() {
            return Err(CacheError::InvalidRecord("question text is empty".into()));
        }
        if success && sql.is_none_or(|s| s.trim().is_empty()) {
            return Err(CacheError::InvalidRecord("a successful record needs its SQL".into()));
        }
        let emb = serde_json::to_string(embedding).expect("finite floats serialize");
        let id = self.db.write(|c| {
            c.execute(
                "INSERT INTO question_cache (question_text, embedding, sql_text, success, answer_summary, created_at) \
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![question_text, emb, sql, success, answer_summary, at.to_rfc3339()],
            )?;
            Ok(c.last_insert_rowid())
        })?;
        Ok(id)
    }

    pub fn get(&self, id: i64) -> Result<Option<CachedQuestion>, CacheError> {
        let row = self.db.write(|c| {
            c.query_row(
                "SELECT id, question_text, embedding, sql_text, success, answer_summary, created_at FROM question_cache WHERE id = ?1",
                [id],
                raw_row,
            )
            .optional()
        })?;
        row.map(decode).transpose()
    }

    pub fn all(&self) -> Result<Vec<CachedQuestion>, CacheError> {
        let rows = self.db.write(|c| {
            let mut stmt = c.prepare(
                "SELECT id, question_text, embedding, sql_text, success, answer_summary, created_at FROM question_cache ORDER BY id",
            )?;
            let rows = stmt.query_map([], raw_row)?;
            rows.collect::<rusqlite::Result<Vec<_>>>()
        })?;
        rows.into_iter().map(decode).collect()
    }

    pub fn len(&self) -> Result<usize, CacheError> {
        let n: i64 = self
            .db
            .write(|c| c.query_row("SELECT COUNT(*) FROM question_cache", [], |r| r.get(0)))?;
        Ok(n as usize)
    }

    pub fn is_empty(&self) -> Result<bool, CacheError> {
        Ok(self.len()? == 0)
    }

    /// Top `k` records by cosine similarity, most similar first; ties go
    /// to the newest record.
    pub fn nearest(&self, embedding: &Vector, k: usize) -> Result<Vec<(CachedQuestion, f64)>, CacheError> {
        self.nearest_where(embedding, k, |_| true)
    }

    /// [`QuestionCache::nearest`] restricted to records accepted by `keep`.
    pub fn nearest_where(
        &self,
        embedding: &Vector,
        k: usize,
        keep: impl Fn(&CachedQuestion) -> bool,
    ) -> Result<Vec<(CachedQuestion, f64)>, CacheError> {
        let mut scored = Vec::new();
        for q in self.all()? {
            if !keep(&q) {
                continue;
            }
            let sim = cosine(embedding, &q.embedding).map_err(|e| match e {
                CosineError::DimensionMismatch { left, right } => CacheError::DimensionMismatch {
                    id: q.id,
                    expected: left,
                    found: right,
                },
                CosineError::ZeroVector => CacheError::InvalidRecord(format!("record {} or the query is all-zero", q.id)),
            })?;
            scored.push((q, sim));
        }
        scored.sort_by(|(a, x), (b, y)| {
            y.total_cmp(x)
                .then_with(|| b.created_at.cmp(&a.created_at))
                .then_with(|| b.id.cmp(&a.id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// One JSON object per line, oldest first.
    pub fn export_jsonl(&self, mut out: impl Write) -> Result<usize, CacheError> {
        let all = self.all()?;
        for q in &all {
            serde_json::to_writer(&mut out, q).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(all.len())
    }

    /// Appends every line as a new record, keeping its `created_at`.
    /// Nothing is stored if any line is invalid.
    pub fn import_jsonl(&self, input: impl BufRead) -> Result<usize, CacheError> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let q: CachedQuestion = serde_json::from_str(&line).map_err(|e| CacheError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if q.success && q.sql.as_deref().is_none_or(|s| s.trim().is_empty()) {
                return Err(CacheError::Parse {
                    line: i + 1,
                    message: "a successful record needs its SQL".into(),
                });
            }
            records.push(q);
        }
        for q in &records {
            self.insert(
                &q.question_text,
                &q.embedding,
                q.sql.as_deref(),
                q.success,
                q.answer_summary.as_deref(),
                q.created_at,
            )?;
        }
        Ok(records.len())
    }
}

type RawRow = (i64, String, String, Option<String>, bool, Option<String>, String);

fn raw_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<RawRow> {
    Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?))
}

fn decode((id, question_text, emb, sql, success, answer_summary, at): RawRow) -> Result<CachedQuestion, CacheError> {
    let embedding: Vector = serde_json::from_str(&emb)
        .map_err(|e| DbError::Corrupt(format!("embedding of cached question {id}: {e}")))?;
    let created_at = DateTime::parse_from_rfc3339(&at)
        .map_err(|e| DbError::Corrupt(format!("created_at of cached question {id}: {e}")))?
        .with_timezone(&Utc);
    Ok(CachedQuestion {
        id,
        question_text,
        embedding,
        sql,
        success,
        answer_summary,
        created_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::StepClock;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn cache() -> QuestionCache {
        QuestionCache::new(Db::in_memory().unwrap(), Arc::new(StepClock::default()))
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1., 2., 2.]), &v(&[1., 2., 2.])).unwrap(), 1.0);
        assert_eq!(cosine(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        // 8 / (3 * 3)
        assert!((cosine(&v(&[1., 2., 2.]), &v(&[2., 1., 2.])).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(
            cosine(&v(&[1., 0.]), &v(&[1., 0., 0.])),
            Err(CosineError::DimensionMismatch { left: 2, right: 3 })
        );
        assert_eq!(cosine(&v(&[0., 0.]), &v(&[1., 0.])), Err(CosineError::ZeroVector));
    }

    #[test]
    fn vectors_reject_empty_and_non_finite() {
        assert_eq!(Vector::new(vec![]), Err(VectorError::Empty));
        assert_eq!(Vector::new(vec![1.0, f64::NAN]), Err(VectorError::NonFinite { index: 1 }));
    }

    #[test]
    fn fallback_is_trim_and_case_insensitive() {
        assert_eq!(fallback_embedding("abc"), fallback_embedding("abc "));
        assert_eq!(fallback_embedding("How many Cases?"), fallback_embedding("how many cases"));
        assert_eq!(fallback_embedding("???").dimension(), FALLBACK_DIMENSION);
        assert!((fallback_embedding("one two two").norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fallback_of_token_disjoint_sentences_is_dissimilar() {
        let a = fallback_embedding("How many cases are in the log?");
        let b = fallback_embedding("Which resource performs approvals fastest");
        assert!(cosine(&a, &b).unwrap() < 0.9);
    }

    #[test]
    fn success_requires_sql() {
        let c = cache();
        let e = v(&[1.0]);
        assert!(c.store("q", &e, Some("SELECT 1"), true, None).is_ok());
        assert!(matches!(c.store("q", &e, None, true, None), Err(CacheError::InvalidRecord(_))));
        assert!(matches!(c.store("q", &e, Some("  "), true, None), Err(CacheError::InvalidRecord(_))));
        let failed = c.store("q", &e, None, false, None).unwrap();
        assert!(!c.get(failed).unwrap().unwrap().success);
    }

    #[test]
    fn nearest_orders_and_breaks_ties_by_recency() {
        let c = cache();
        assert!(c.nearest(&v(&[1., 0.]), 3).unwrap().is_empty());
        let old = c.store("old", &v(&[1., 1.]), Some("SELECT 1"), true, None).unwrap();
        let new = c.store("new", &v(&[2., 2.]), Some("SELECT 2"), true, None).unwrap();
        let far = c.store("far", &v(&[0., 1.]), None, false, None).unwrap();
        let got: Vec<i64> = c
            .nearest(&v(&[1., 1.]), 3)
            .unwrap()
            .iter()
            .map(|(q, _)| q.id)
            .collect();
        assert_eq!(got, [new, old, far]);
        let own = c.nearest(&v(&[0., 1.]), 1).unwrap();
        assert_eq!(own[0].0.id, far);
        assert_eq!(own[0].1, 1.0);
    }

    #[test]
    fn mixed_dimensions_are_an_error() {
        let c = cache();
        c.store("q", &v(&[1., 0.]), None, false, None).unwrap();
        assert!(matches!(
            c.nearest(&v(&[1., 0., 0.]), 1),
            Err(CacheError::DimensionMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let a = cache();
        a.store("first", &v(&[0.1, 0.2, 0.30000000000000004]), Some("SELECT 1"), true, Some("1 row"))
            .unwrap();
        a.store("second", &v(&[1e-300, 2.0, 3.0]), None, false, None).unwrap();
        let mut buf = Vec::new();
        assert_eq!(a.export_jsonl(&mut buf).unwrap(), 2);
        let b = cache();
        assert_eq!(b.import_jsonl(buf.as_slice()).unwrap(), 2);
        assert_eq!(a.all().unwrap(), b.all().unwrap());
        let bad = b"{\"nope\": 1}\n";
        assert!(matches!(b.import_jsonl(&bad[..]), Err(CacheError::Parse { line: 1, .. })));
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(-100.0f64..100.0, n),
                proptest::collection::vec(-100.0f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_bounded_and_scale_invariant((a, b) in vec_pair(), c in 0.01f64..1000.0) {
            let (va, vb) = (v(&a), v(&b));
            prop_assume!(va.norm() > 1e-6 && vb.norm() > 1e-6);
            let ab = cosine(&va, &vb).unwrap();
            prop_assert_eq!(ab, cosine(&vb, &va).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = v(&a.iter().map(|x| x * c).collect::<Vec<_>>());
            prop_assert!((cosine(&scaled, &vb).unwrap() - ab).abs() < 1e-9);
        }

        #[test]
        fn nearest_is_sorted_and_bounded(vs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..12), q in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let q = v(&q);
            prop_assume!(q.norm() > 1e-6);
            let c = cache();
            for x in &vs {
                let x = v(x);
                prop_assume!(x.norm() > 1e-6);
                c.store("q", &x, None, false, None).unwrap();
            }
            let got = c.nearest(&q, vs.len()).unwrap();
            prop_assert_eq!(got.len(), vs.len());
            for w in got.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
            prop_assert!(got.iter().all(|(_, s)| (-1.0..=1.0).contains(s)));
        }
    }
}
