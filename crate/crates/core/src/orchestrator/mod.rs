//! Answering a question: cache shortcut, prompt assembly, then generate,
//! validate and execute in a loop that feeds every error back, escalates
//! from Tier1 to Tier2, adds few-shot examples and finally asks the user.

mod session;
mod state;

use std::sync::Arc;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::cache::{embed_metered, CacheError, QuestionCache, DEFAULT_SIMILARITY_THRESHOLD};
use crate::clock::{Clock, SystemClock};
use crate::db::{Db, DbError};
use crate::eventlog::{EventLog, ResultTable, SchemaContext, SchemaError, DEFAULT_ROW_CAP};
use crate::guard;
use crate::llm::{CostLedger, Gateway, Tier};
use crate::ontology::{Ontology, OntologyError, DEFAULT_LIMIT};
use crate::prompt::{extract_sql, FewShot, PromptBundle, Templates};

pub use session::SessionRecord;
pub use state::{step, IllegalTransition, OrchestrationState, Phase, ShotMode, Stage, StepEvent, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    /// A cached success is reused only above this cosine similarity.
    pub similarity_threshold: f64,
    /// Tier1 attempts: the first prompt plus its feedback loops.
    pub tier1_attempts: u32,
    /// Tier1 attempts with few-shot examples, after the zero-shot ones.
    pub tier1_few_shot_attempts: u32,
    /// Tier2 attempts sent the whole conversation so far.
    pub tier2_attempts: u32,
    /// Tier2 attempts with few-shot examples added.
    pub tier2_few_shot_attempts: u32,
    /// Attempts granted by each round of user feedback.
    pub resume_attempts: u32,
    pub few_shot_count: usize,
    pub row_cap: usize,
    /// Distinct sample values shown per column.
    pub sample_values: usize,
    pub ontology_limit: usize,
    /// Ask for the information a question needs before writing SQL.
    pub context_gathering: bool,
    /// Prompts are shrunk towards this many characters.
    pub prompt_budget_chars: usize,
    pub session_expiry_hours: i64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            tier1_attempts: 3,
            tier1_few_shot_attempts: 0,
            tier2_attempts: 1,
            tier2_few_shot_attempts: 1,
            resume_attempts: 2,
            few_shot_count: 2,
            row_cap: DEFAULT_ROW_CAP,
            sample_values: 3,
            ontology_limit: DEFAULT_LIMIT,
            context_gathering: true,
            prompt_budget_chars: 24_000,
            session_expiry_hours: 24,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return bad("similarity_threshold must lie in [-1, 1]");
        }
        if self.loop_limit() == 0 {
            return bad("the attempt schedule is empty");
        }
        if self.resume_attempts == 0 {
            return bad("resume_attempts must be at least 1");
        }
        if self.row_cap == 0 {
            return bad("row_cap must be at least 1");
        }
        if self.session_expiry_hours <= 0 {
            return bad("session_expiry_hours must be positive");
        }
        Ok(())
    }

    pub fn loop_limit(&self) -> u32 {
        self.tier1_attempts + self.tier1_few_shot_attempts + self.tier2_attempts + self.tier2_few_shot_attempts
    }

    /// Stage of each attempt. Stages never move backwards, so a few-shot
    /// Tier1 phase makes the Tier2 attempts few-shot as well.
    pub fn plan(&self) -> Vec<Stage> {
        use ShotMode::*;
        let groups = [
            (Stage::new(Tier::Tier1, ZeroShot), self.tier1_attempts),
            (Stage::new(Tier::Tier1, FewShot), self.tier1_few_shot_attempts),
            (Stage::new(Tier::Tier2, ZeroShot), self.tier2_attempts),
            (Stage::new(Tier::Tier2, FewShot), self.tier2_few_shot_attempts),
        ];
        let mut plan: Vec<Stage> = Vec::new();
        for (s, n) in groups {
            for _ in 0..n {
                let s = match plan.last() {
                    Some(p) => Stage::new(s.tier.max(p.tier), s.shot_mode.max(p.shot_mode)),
                    None => s,
                };
                plan.push(s);
            }
        }
        plan
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStatus {
    Answered,
    NeedsUserFeedback,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub status: AnswerStatus,
    pub result: Option<ResultTable>,
    pub sql: Option<String>,
    pub reasoning: Option<String>,
    /// Stage of the successful attempt; `None` for cache hits and
    /// unanswered questions.
    pub stage: Option<Stage>,
    pub attempts_used: u32,
    pub cache_hit: bool,
    pub session_id: String,
    pub last_error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("the question is empty")]
    EmptyQuestion,
    #[error("the feedback is empty")]
    EmptyFeedback,
    #[error("no event log has been ingested")]
    NoEventLog,
    #[error("invalid orchestrator configuration: {0}")]
    Config(String),
    #[error("no session `{0}`")]
    UnknownSession(String),
    #[error("session `{session_id}` is {phase}, not awaiting feedback")]
    SessionNotAwaiting { session_id: String, phase: Phase },
    #[error("session `{0}` expired while awaiting feedback")]
    SessionExpired(String),
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Db(#[from] DbError),
}

impl From<SchemaError> for OrchestratorError {
    fn from(e: SchemaError) -> Self {
        match e {
            SchemaError::NoTableIngested => OrchestratorError::NoEventLog,
            SchemaError::Db(d) => OrchestratorError::Db(d),
        }
    }
}

/// Everything a session needs, over one shared store.
#[derive(Clone)]
pub struct Orchestrator {
    db: Db,
    log: EventLog,
    cache: QuestionCache,
    ontology: Ontology,
    gateway: Gateway,
    templates: Arc<Templates>,
    clock: Arc<dyn Clock>,
    config: OrchestratorConfig,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("db", &self.db)
            .field("config", &self.config)
            .finish()
    }
}

impl Orchestrator {
    pub fn new(db: Db, gateway: Gateway, config: OrchestratorConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        Ok(Self {
            log: EventLog::new(db.clone()),
            cache: QuestionCache::new(db.clone(), clock.clone()),
            ontology: Ontology::new(db.clone()),
            db,
            gateway,
            templates: Arc::new(Templates::builtin()),
            clock,
            config,
        })
    }

    /// Replaces the clock used for transcripts, cache records and expiry.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.cache = QuestionCache::new(self.db.clone(), clock.clone());
        self.clock = clock;
        self
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn db(&self) -> &Db {
        &self.db
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    pub fn cache(&self) -> &QuestionCache {
        &self.cache
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn now(&self) -> chrono::DateTime<chrono::Utc> {
        self.clock.now()
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    /// Answers `question` in a new session named `session-<n>`.
    pub fn answer(&self, question: &str) -> Result<AnswerOutcome, OrchestratorError> {
        self.start(None, question)
    }

    /// Answers `question` in a new session with the given id. The id is
    /// also the provider conversation id.
    pub fn answer_as(&self, session_id: &str, question: &str) -> Result<AnswerOutcome, OrchestratorError> {
        self.start(Some(session_id), question)
    }

    fn start(&self, id: Option<&str>, question: &str) -> Result<AnswerOutcome, OrchestratorError> {
        let question = question.trim();
        if question.is_empty() {
            return Err(OrchestratorError::EmptyQuestion);
        }
        let schema = self.schema()?;
        let now = self.clock.now();
        let session_id = match session::create(&self.db, id, question, now)? {
            session::Created::Id(id) => id,
            session::Created::Exists => return Err(OrchestratorError::SessionExists(id.unwrap_or_default().to_string())),
        };
        let state = OrchestrationState::new(&session_id, question, self.config.plan(), self.config.resume_attempts);
        let mut rec = SessionRecord {
            state,
            embedding: None,
            ledger: CostLedger::default(),
            result: None,
            outcome: None,
            created_at: now,
            awaiting_since: None,
        };
        self.check_cache(&mut rec, &schema)?;
        if rec.state.phase == Phase::Prompting {
            self.prepare_prompt(&mut rec, &schema)?;
        }
        self.drive(&mut rec, &schema)
    }

    /// Continues a session paused for the user: the feedback becomes the
    /// highest-priority section of the prompt and a fresh attempt budget
    /// at Tier2 few-shot is granted.
    pub fn resume_with_feedback(&self, session_id: &str, feedback: &str) -> Result<AnswerOutcome, OrchestratorError> {
        let feedback = feedback.trim();
        if feedback.is_empty() {
            return Err(OrchestratorError::EmptyFeedback);
        }
        let mut rec = session::load(&self.db, session_id)?
            .ok_or_else(|| OrchestratorError::UnknownSession(session_id.to_string()))?;
        let not_awaiting = |phase| OrchestratorError::SessionNotAwaiting {
            session_id: session_id.to_string(),
            phase,
        };
        if rec.state.phase != Phase::AwaitingUserFeedback {
            return Err(not_awaiting(rec.state.phase));
        }
        let now = self.clock.now();
        let since = rec.awaiting_since.unwrap_or(rec.created_at);
        if now - since > Duration::hours(self.config.session_expiry_hours) {
            self.advance(&mut rec, StepEvent::Abort {
                reason: "session expired while awaiting feedback".into(),
            })?;
            rec.outcome = Some(outcome(&rec));
            session::save(&self.db, &rec, self.clock.now())?;
            return Err(OrchestratorError::SessionExpired(session_id.to_string()));
        }
        if !session::claim_awaiting(&self.db, session_id)? {
            return Err(not_awaiting(Phase::Prompting));
        }
        let schema = self.schema()?;
        rec.awaiting_since = None;
        self.advance(&mut rec, StepEvent::UserFeedback { text: feedback.into() })?;
        self.drive(&mut rec, &schema)
    }

    pub fn session(&self, session_id: &str) -> Result<Option<SessionRecord>, OrchestratorError> {
        Ok(session::load(&self.db, session_id)?)
    }

    /// Ids and phases of all sessions, oldest first.
    pub fn sessions(&self) -> Result<Vec<(String, Phase)>, OrchestratorError> {
        Ok(session::list(&self.db)?)
    }

    fn schema(&self) -> Result<SchemaContext, OrchestratorError> {
        let schema = self.log.derive_schema_context(self.config.sample_values)?;
        if schema.is_empty() {
            return Err(OrchestratorError::NoEventLog);
        }
        Ok(schema)
    }

    fn advance(&self, rec: &mut SessionRecord, event: StepEvent) -> Result<(), OrchestratorError> {
        rec.state = step(rec.state.clone(), event, self.clock.now())?;
        Ok(())
    }

    fn note(&self, rec: &mut SessionRecord, text: String) -> Result<(), OrchestratorError> {
        self.advance(rec, StepEvent::Note { text })
    }

    fn check_cache(&self, rec: &mut SessionRecord, schema: &SchemaContext) -> Result<(), OrchestratorError> {
        let question = rec.state.question.clone();
        match embed_metered(&question, &self.gateway) {
            Ok((v, usage)) => {
                if let Some(u) = usage {
                    u.charge(&mut rec.ledger);
                }
                rec.embedding = Some(v);
            }
            Err(e) => self.note(rec, format!("embedding failed, cache bypassed: {e}"))?,
        }
        let Some(emb) = rec.embedding.clone() else {
            return self.advance(rec, StepEvent::CacheMiss { best_similarity: None });
        };
        let best = self
            .cache
            .nearest_where(&emb, 1, |q| q.embedding.dimension() == emb.dimension())?
            .into_iter()
            .next();
        let (hit, sim) = match best {
            Some((q, sim)) if sim > self.config.similarity_threshold && q.success => (q, sim),
            other => {
                return self.advance(rec, StepEvent::CacheMiss {
                    best_similarity: other.map(|(_, s)| s),
                })
            }
        };
        let sql = hit.sql.clone().unwrap_or_default();
        self.advance(rec, StepEvent::CacheHit {
            cached_id: hit.id,
            similarity: sim,
            sql: sql.clone(),
        })?;
        let validated = match guard::validate_statements(&[&sql], schema) {
            Ok(v) => v,
            Err(e) => return self.advance(rec, StepEvent::ValidationFailed { error: e.to_string() }),
        };
        match self.log.execute_readonly(&validated, self.config.row_cap) {
            Ok(table) => {
                let summary = table.summary();
                rec.result = Some(table);
                rec.state.reasoning = hit.answer_summary.map(|s| format!("Reused the answer to \"{}\" ({s}).", hit.question_text));
                self.advance(rec, StepEvent::Executed { summary })
            }
            Err(e) => self.advance(rec, StepEvent::ExecFailed { error: e.message }),
        }
    }

    fn prepare_prompt(&self, rec: &mut SessionRecord, schema: &SchemaContext) -> Result<(), OrchestratorError> {
        let question = rec.state.question.clone();
        let ontology = self.ontology.select_relevant(&question, schema, self.config.ontology_limit)?;
        let mut bundle = self
            .templates
            .data_engineer(&question, schema, &ontology, &[], &[])
            .map_err(|_| OrchestratorError::NoEventLog)?;
        if self.config.context_gathering {
            let ctx = self.templates.context_gathering(&question, schema);
            let conversation = format!("{}/context", rec.state.session_id);
            match self.gateway.complete(&conversation, ctx.render(), Tier::Tier1) {
                Ok(ex) => {
                    rec.ledger.add_exchange(&ex);
                    bundle = bundle.with_analysis(ex.response.text.clone());
                    self.note(rec, format!("required information: {}", ex.response.text.trim()))?;
                }
                Err(e) => self.note(rec, format!("context gathering skipped: {e}"))?,
            }
        }
        if !ontology.is_empty() {
            let terms: Vec<&str> = ontology.iter().map(|e| e.term.as_str()).collect();
            self.note(rec, format!("ontology entries: {}", terms.join(", ")))?;
        }
        rec.state.bundle = Some(bundle);
        Ok(())
    }

    /// Most similar cached successes, least similar first so the closest
    /// example sits nearest the question and is the last to be trimmed.
    fn few_shots(&self, rec: &SessionRecord) -> Result<Vec<FewShot>, OrchestratorError> {
        let Some(emb) = &rec.embedding else {
            return Ok(Vec::new());
        };
        let mut shots: Vec<FewShot> = self
            .cache
            .nearest_where(emb, self.config.few_shot_count, |q| {
                q.success && q.sql.is_some() && q.embedding.dimension() == emb.dimension()
            })?
            .into_iter()
            .map(|(q, _)| FewShot {
                question: q.question_text,
                sql: q.sql.unwrap_or_default(),
            })
            .collect();
        shots.reverse();
        Ok(shots)
    }

    fn drive(&self, rec: &mut SessionRecord, schema: &SchemaContext) -> Result<AnswerOutcome, OrchestratorError> {
        while rec.state.phase == Phase::Prompting {
            self.attempt(rec, schema)?;
            session::save(&self.db, rec, self.clock.now())?;
        }
        if rec.state.phase == Phase::Executed {
            self.advance(rec, StepEvent::Finished)?;
        }
        self.remember(rec)?;
        let out = outcome(rec);
        rec.outcome = Some(out.clone());
        session::save(&self.db, rec, self.clock.now())?;
        Ok(out)
    }

    /// One generation: prompt, reply, extraction, validation, execution.
    fn attempt(&self, rec: &mut SessionRecord, schema: &SchemaContext) -> Result<(), OrchestratorError> {
        let stage = rec.state.stage();
        let needs_shots = stage.shot_mode == ShotMode::FewShot
            && rec.state.bundle.as_ref().is_some_and(|b| b.few_shot_examples.is_empty());
        if needs_shots {
            let shots = self.few_shots(rec)?;
            let text = format!("{} few-shot example(s) from similar answered questions", shots.len());
            if let Some(b) = &mut rec.state.bundle {
                b.few_shot_examples = shots;
            }
            self.note(rec, text)?;
        }
        let bundle: PromptBundle = match &rec.state.bundle {
            Some(b) => b.clone().fit_to(self.config.prompt_budget_chars),
            None => return Err(OrchestratorError::NoEventLog),
        };
        let prompt = match stage.tier {
            Tier::Tier1 => bundle.render(),
            Tier::Tier2 => bundle.render_conversation(),
        };
        let model_id = self.gateway.config().model(stage.tier).model_id.clone();
        let session_id = rec.state.session_id.clone();
        let ex = match self.gateway.complete(&session_id, prompt.clone(), stage.tier) {
            Ok(ex) => ex,
            Err(e) => {
                return self.advance(rec, StepEvent::GenerationFailed {
                    model_id,
                    prompt,
                    response: None,
                    error: format!("provider error: {e}"),
                })
            }
        };
        rec.ledger.add_exchange(&ex);
        let text = ex.response.text;
        let generated = match extract_sql(&text) {
            Ok(g) => g,
            Err(e) => {
                return self.advance(rec, StepEvent::GenerationFailed {
                    model_id,
                    prompt,
                    response: Some(text),
                    error: e.to_string(),
                })
            }
        };
        self.advance(rec, StepEvent::Generated {
            model_id,
            prompt,
            response: text,
            statements: generated.statements.clone(),
            reasoning: generated.reasoning.clone(),
        })?;
        let validated = match guard::validate(&generated, schema) {
            Ok(v) => v,
            Err(e) => return self.advance(rec, StepEvent::ValidationFailed { error: e.to_string() }),
        };
        self.advance(rec, StepEvent::Validated)?;
        match self.log.execute_readonly(&validated, self.config.row_cap) {
            Ok(table) => {
                let summary = table.summary();
                rec.result = Some(table);
                self.advance(rec, StepEvent::Executed { summary })
            }
            Err(e) => self.advance(rec, StepEvent::ExecFailed { error: e.message }),
        }
    }

    /// Caches the question once the session settles: a success with its
    /// SQL, or a failure awaiting the user. Cache hits are not re-stored.
    fn remember(&self, rec: &mut SessionRecord) -> Result<(), OrchestratorError> {
        let Some(emb) = rec.embedding.clone() else {
            return Ok(());
        };
        let s = &rec.state;
        match s.phase {
            Phase::Done if !s.cache_hit => {
                let summary = rec.result.as_ref().map(ResultTable::summary);
                self.cache
                    .store(&s.question, &emb, s.sql.as_deref(), true, summary.as_deref())?;
            }
            Phase::AwaitingUserFeedback => {
                self.cache.store(&s.question, &emb, s.sql.as_deref(), false, None)?;
                rec.awaiting_since = Some(self.clock.now());
            }
            _ => {}
        }
        Ok(())
    }
}

fn outcome(rec: &SessionRecord) -> AnswerOutcome {
    let s = &rec.state;
    let status = match s.phase {
        Phase::Done => AnswerStatus::Answered,
        Phase::AwaitingUserFeedback => AnswerStatus::NeedsUserFeedback,
        _ => AnswerStatus::Failed,
    };
    let answered = status == AnswerStatus::Answered;
    AnswerOutcome {
        status,
        result: if answered { rec.result.clone() } else { None },
        sql: if answered { s.sql.clone() } else { None },
        reasoning: if answered { s.reasoning.clone() } else { None },
        stage: (answered && !s.cache_hit).then(|| s.stage()),
        attempts_used: s.attempt,
        cache_hit: s.cache_hit,
        session_id: s.session_id.clone(),
        last_error: s.last_error.clone(),
    }
}
