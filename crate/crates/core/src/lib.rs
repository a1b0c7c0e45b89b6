pub mod cache;
pub mod clock;
pub mod db;
pub mod eval;
pub mod eventlog;
pub mod guard;
pub mod llm;
pub mod ontology;
pub mod orchestrator;
pub mod prompt;

// The guide's chapters, compiled so their examples run as doctests.
#[doc = include_str!("../../../book/src/introduction.md")]
#[cfg(doctest)]
pub mod guide_introduction {}
#[doc = include_str!("../../../book/src/event-log.md")]
#[cfg(doctest)]
pub mod guide_event_log {}
#[doc = include_str!("../../../book/src/sql-guard.md")]
#[cfg(doctest)]
pub mod guide_sql_guard {}
#[doc = include_str!("../../../book/src/providers.md")]
#[cfg(doctest)]
pub mod guide_providers {}
#[doc = include_str!("../../../book/src/question-cache.md")]
#[cfg(doctest)]
pub mod guide_question_cache {}
#[doc = include_str!("../../../book/src/ontology.md")]
#[cfg(doctest)]
pub mod guide_ontology {}
#[doc = include_str!("../../../book/src/orchestration.md")]
#[cfg(doctest)]
pub mod guide_orchestration {}
#[doc = include_str!("../../../book/src/evaluation.md")]
#[cfg(doctest)]
pub mod guide_evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
#[cfg(doctest)]
pub mod guide_cli {}
