//! The pure answering state machine.
//!
//! [`step`] decides every transition: attempt counting, tier escalation,
//! few-shot switching and feedback accumulation. The driver in the parent
//! module only performs the side effects an event reports.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::llm::{ChatMessage, Tier};
use crate::prompt::{Feedback, PromptBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Received,
    CacheChecked,
    Prompting,
    Generated,
    Validated,
    Executed,
    AwaitingUserFeedback,
    Done,
    Failed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Received => "Received",
            Phase::CacheChecked => "CacheChecked",
            Phase::Prompting => "Prompting",
            Phase::Generated => "Generated",
            Phase::Validated => "Validated",
            Phase::Executed => "Executed",
            Phase::AwaitingUserFeedback => "AwaitingUserFeedback",
            Phase::Done => "Done",
            Phase::Failed => "Failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered: a session only ever moves from zero-shot to few-shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotMode {
    ZeroShot,
    FewShot,
}

impl ShotMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShotMode::ZeroShot => "zero-shot",
            ShotMode::FewShot => "few-shot",
        }
    }
}

impl fmt::Display for ShotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The (model tier, shot mode) an attempt runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stage {
    pub tier: Tier,
    pub shot_mode: ShotMode,
}

impl Stage {
    pub const fn new(tier: Tier, shot_mode: ShotMode) -> Self {
        Self { tier, shot_mode }
    }

    /// Componentwise maximum, so stages never move backwards.
    fn at_least(self, other: Stage) -> Stage {
        Stage::new(self.tier.max(other.tier), self.shot_mode.max(other.shot_mode))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.tier, self.shot_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StepEvent {
    /// A cached successful question is similar enough to reuse its SQL.
    CacheHit { cached_id: i64, similarity: f64, sql: String },
    CacheMiss { best_similarity: Option<f64> },
    Generated {
        model_id: String,
        prompt: Vec<ChatMessage>,
        response: String,
        statements: Vec<String>,
        reasoning: String,
    },
    /// The provider failed or the reply held no SQL.
    GenerationFailed {
        model_id: String,
        prompt: Vec<ChatMessage>,
        response: Option<String>,
        error: String,
    },
    Validated,
    ValidationFailed { error: String },
    Executed { summary: String },
    ExecFailed { error: String },
    Finished,
    UserFeedback { text: String },
    Abort { reason: String },
    /// Transcript-only record; never changes the phase.
    Note { text: String },
}

impl StepEvent {
    pub fn name(&self) -> &'static str {
        match self {
            StepEvent::CacheHit { .. } => "CacheHit",
            StepEvent::CacheMiss { .. } => "CacheMiss",
            StepEvent::Generated { .. } => "Generated",
            StepEvent::GenerationFailed { .. } => "GenerationFailed",
            StepEvent::Validated => "Validated",
            StepEvent::ValidationFailed { .. } => "ValidationFailed",
            StepEvent::Executed { .. } => "Executed",
            StepEvent::ExecFailed { .. } => "ExecFailed",
            StepEvent::Finished => "Finished",
            StepEvent::UserFeedback { .. } => "UserFeedback",
            StepEvent::Abort { .. } => "Abort",
            StepEvent::Note { .. } => "Note",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Phase entered by this step.
    pub phase: Phase,
    pub at: DateTime<Utc>,
    pub attempt: u32,
    pub tier: Tier,
    pub shot_mode: ShotMode,
    #[serde(flatten)]
    pub event: StepEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("event {event} is not allowed in phase {phase}")]
pub struct IllegalTransition {
    pub phase: Phase,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationState {
    pub session_id: String,
    pub question: String,
    pub phase: Phase,
    /// Generation attempts made so far.
    pub attempt: u32,
    pub tier: Tier,
    pub shot_mode: ShotMode,
    /// Stage of each attempt; its length is the loop limit.
    pub plan: Vec<Stage>,
    /// Attempts granted by each round of user feedback, at Tier2 few-shot.
    pub resume_attempts: u32,
    pub bundle: Option<PromptBundle>,
    /// Append-only.
    pub transcript: Vec<StepRecord>,
    pub cache_hit: bool,
    /// SQL of the latest generation, or of the cache hit.
    pub sql: Option<String>,
    pub reasoning: Option<String>,
    pub response: Option<String>,
    pub last_error: Option<String>,
}

impl OrchestrationState {
    pub fn new(session_id: impl Into<String>, question: impl Into<String>, plan: Vec<Stage>, resume_attempts: u32) -> Self {
        let first = plan.first().copied().unwrap_or(Stage::new(Tier::Tier1, ShotMode::ZeroShot));
        Self {
            session_id: session_id.into(),
            question: question.into(),
            phase: Phase::Received,
            attempt: 0,
            tier: first.tier,
            shot_mode: first.shot_mode,
            plan,
            resume_attempts,
            bundle: None,
            transcript: Vec::new(),
            cache_hit: false,
            sql: None,
            reasoning: None,
            response: None,
            last_error: None,
        }
    }

    pub fn stage(&self) -> Stage {
        Stage::new(self.tier, self.shot_mode)
    }

    pub fn loop_limit(&self) -> u32 {
        self.plan.len() as u32
    }

    /// Routes a failed attempt: feedback goes into the bundle, then either
    /// the next planned stage or a pause for the user.
    fn fail(&mut self, sql: String, error: &str, response: Option<String>) -> Phase {
        self.last_error = Some(error.to_string());
        if let Some(b) = &mut self.bundle {
            b.feedback_history.push(Feedback {
                sql,
                error: error.to_string(),
                response,
            });
        }
        match self.plan.get(self.attempt as usize) {
            Some(next) => {
                let s = self.stage().at_least(*next);
                self.tier = s.tier;
                self.shot_mode = s.shot_mode;
                Phase::Prompting
            }
            None => Phase::AwaitingUserFeedback,
        }
    }
}

/// Applies `event` to `state`, appending one transcript record stamped
/// `at`. Terminal phases accept nothing; generation is refused once the
/// plan is used up.
pub fn step(mut state: OrchestrationState, event: StepEvent, at: DateTime<Utc>) -> Result<OrchestrationState, IllegalTransition> {
    use Phase::*;
    use StepEvent as E;
    let illegal = |s: &OrchestrationState, e: &StepEvent| IllegalTransition {
        phase: s.phase,
        event: e.name().to_string(),
    };
    let next = match (state.phase, &event) {
        (Done | Failed, _) => return Err(illegal(&state, &event)),
        (p, E::Note { .. }) => p,
        (_, E::Abort { reason }) => {
            state.last_error = Some(reason.clone());
            Failed
        }
        (Received, E::CacheHit { sql, .. }) => {
            state.cache_hit = true;
            state.sql = Some(sql.clone());
            CacheChecked
        }
        (Received, E::CacheMiss { .. }) => Prompting,
        (CacheChecked, E::Executed { .. }) => Executed,
        (CacheChecked, E::ValidationFailed { .. } | E::ExecFailed { .. }) => {
            state.cache_hit = false;
            state.sql = None;
            Prompting
        }
        (Prompting, E::Generated { .. } | E::GenerationFailed { .. }) if state.attempt >= state.loop_limit() => {
            return Err(illegal(&state, &event))
        }
        (
            Prompting,
            E::Generated {
                response,
                statements,
                reasoning,
                ..
            },
        ) => {
            state.attempt += 1;
            state.sql = Some(statements.join(";\n"));
            state.reasoning = Some(reasoning.clone());
            state.response = Some(response.clone());
            Generated
        }
        (Prompting, E::GenerationFailed { response, error, .. }) => {
            state.attempt += 1;
            state.sql = None;
            state.reasoning = None;
            state.response = response.clone();
            state.fail(String::new(), error, response.clone())
        }
        (Generated, E::Validated) => Validated,
        (Generated, E::ValidationFailed { error }) | (Validated, E::ExecFailed { error }) => {
            let sql = state.sql.clone().unwrap_or_default();
            let response = state.response.clone();
            state.fail(sql, error, response)
        }
        (Validated, E::Executed { .. }) => Executed,
        (Executed, E::Finished) => Done,
        (AwaitingUserFeedback, E::UserFeedback { text }) => {
            let s = Stage::new(Tier::Tier2, ShotMode::FewShot);
            state.plan.extend(std::iter::repeat_n(s, state.resume_attempts as usize));
            state.tier = s.tier;
            state.shot_mode = s.shot_mode;
            if let Some(b) = &mut state.bundle {
                b.clarifications.push(text.clone());
            }
            if state.resume_attempts == 0 {
                AwaitingUserFeedback
            } else {
                Prompting
            }
        }
        _ => return Err(illegal(&state, &event)),
    };
    state.phase = next;
    state.transcript.push(StepRecord {
        phase: next,
        at,
        attempt: state.attempt,
        tier: state.tier,
        shot_mode: state.shot_mode,
        event,
    });
    Ok(state)
}
