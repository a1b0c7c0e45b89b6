//! Role prompts and the context assembled around a question.
//!
//! A [`PromptBundle`] keeps the pieces of a prompt (question, schema,
//! ontology, examples, feedback) separately and renders them through a
//! text template, so rendering is a pure function of the bundle.

mod extract;
mod template;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eventlog::SchemaContext;
use crate::llm::ChatMessage;
use crate::ontology::OntologyEntry;

pub use extract::{extract_sql, split_statements, ExtractError, GeneratedSql};
pub use template::{TemplateError, Templates};

/// Phrase every feedback section carries.
pub const FEEDBACK_INSTRUCTION: &str = "correct the SQL; do not repeat the failed statement";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    DataEngineer,
    ProcessAnalyst,
    DomainExpert,
}

/// A worked (question, SQL) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub question: String,
    pub sql: String,
}

/// A failed attempt fed back to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub sql: String,
    pub error: String,
    /// The model's full reply, when the attempt produced one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("the schema has no columns; ingest an event log first")]
    EmptySchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role: Role,
    pub system_text: String,
    pub question: String,
    pub schema: Option<SchemaContext>,
    pub ontology: Vec<OntologyEntry>,
    pub few_shot_examples: Vec<FewShot>,
    pub feedback_history: Vec<Feedback>,
    /// User clarifications; rendered right after the question.
    pub clarifications: Vec<String>,
    /// What a context-gathering pass said the answer needs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<String>,
    user_template: String,
    format_instructions: String,
}

impl PromptBundle {
    /// The assembled user message.
    pub fn user_text(&self) -> String {
        template::substitute(&self.user_template, |name| match name {
            "question" => Some(self.question.clone()),
            "clarifications" => Some(self.clarifications_section()),
            "schema" => Some(self.schema.as_ref().map(schema_section).unwrap_or_default()),
            "ontology" => Some(ontology_section(&self.ontology)),
            "analysis" => Some(self.analysis.as_deref().map(analysis_section).unwrap_or_default()),
            "few_shots" => Some(few_shot_section(&self.few_shot_examples)),
            "feedback" => Some(feedback_section(&self.feedback_history)),
            "format_instructions" => Some(self.format_instructions.clone()),
            _ => None,
        })
    }

    /// System message followed by one user message holding everything.
    pub fn render(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(&self.system_text), ChatMessage::user(self.user_text())]
    }

    /// The whole exchange so far: the first prompt, then each failed reply
    /// and the feedback it received, in order.
    pub fn render_conversation(&self) -> Vec<ChatMessage> {
        let mut first = self.clone();
        first.feedback_history.clear();
        let mut msgs = first.render();
        for (i, fb) in self.feedback_history.iter().enumerate() {
            let reply = match (&fb.response, fb.sql.trim().is_empty()) {
                (Some(r), _) => r.clone(),
                (None, false) => fence(&fb.sql),
                (None, true) => "(no reply was received)".to_string(),
            };
            msgs.push(ChatMessage::assistant(reply));
            let mut turn = format!("Attempt {} failed.\n", i + 1);
            feedback_entry(&mut turn, fb);
            let _ = write!(turn, "\nPlease {FEEDBACK_INSTRUCTION}.");
            if i + 1 == self.feedback_history.len() {
                turn.push_str("\n\n");
                turn.push_str(&self.format_instructions);
            }
            msgs.push(ChatMessage::user(turn));
        }
        msgs
    }

    pub fn rendered_len(&self) -> usize {
        self.render().iter().map(|m| m.content.len()).sum()
    }

    /// Shrinks the bundle until its rendered length is at most `max_chars`:
    /// sample values go first, then few-shot examples oldest first. The
    /// question, clarifications and feedback are never dropped, so the
    /// result can still exceed the cap.
    pub fn fit_to(mut self, max_chars: usize) -> Self {
        if self.rendered_len() <= max_chars {
            return self;
        }
        if let Some(schema) = &mut self.schema {
            for c in &mut schema.columns {
                c.sample_values.clear();
            }
        }
        while self.rendered_len() > max_chars && !self.few_shot_examples.is_empty() {
            self.few_shot_examples.remove(0);
        }
        self
    }

    pub fn with_clarification(mut self, text: impl Into<String>) -> Self {
        self.clarifications.push(text.into());
        self
    }

    pub fn with_few_shots(mut self, shots: Vec<FewShot>) -> Self {
        self.few_shot_examples = shots;
        self
    }

    pub fn with_analysis(mut self, text: impl Into<String>) -> Self {
        let text = text.into();
        self.analysis = (!text.trim().is_empty()).then_some(text);
        self
    }

    pub fn with_feedback(mut self, feedback: Feedback) -> Self {
        self.feedback_history.push(feedback);
        self
    }

    fn clarifications_section(&self) -> String {
        if self.clarifications.is_empty() {
            return String::new();
        }
        let mut s = String::from("Clarification from the user (takes precedence over everything below):\n");
        for c in &self.clarifications {
            let _ = writeln!(s, "- {c}");
        }
        s.trim_end().to_string()
    }
}

pub fn build_data_engineer_prompt(
    question: &str,
    schema: &SchemaContext,
    ontology: &[OntologyEntry],
    few_shots: &[FewShot],
    feedback: &[Feedback],
) -> Result<PromptBundle, PromptError> {
    Templates::builtin().data_engineer(question, schema, ontology, few_shots, feedback)
}

pub fn build_context_gathering_prompt(question: &str, schema: &SchemaContext) -> PromptBundle {
    Templates::builtin().context_gathering(question, schema)
}

pub fn build_domain_expert_prompt(schema: &SchemaContext) -> PromptBundle {
    Templates::builtin().domain_expert(schema)
}

/// Returns `bundle` with one more (SQL, error) pair fed back.
pub fn append_feedback(bundle: PromptBundle, prior_sql: &str, error: &str) -> PromptBundle {
    bundle.with_feedback(Feedback {
        sql: prior_sql.to_string(),
        error: error.to_string(),
        response: None,
    })
}

impl Templates {
    pub fn data_engineer(
        &self,
        question: &str,
        schema: &SchemaContext,
        ontology: &[OntologyEntry],
        few_shots: &[FewShot],
        feedback: &[Feedback],
    ) -> Result<PromptBundle, PromptError> {
        if schema.is_empty() {
            return Err(PromptError::EmptySchema);
        }
        Ok(PromptBundle {
            role: Role::DataEngineer,
            system_text: self.data_engineer_system.clone(),
            question: question.to_string(),
            schema: Some(schema.clone()),
            ontology: ontology.to_vec(),
            few_shot_examples: few_shots.to_vec(),
            feedback_history: feedback.to_vec(),
            clarifications: Vec::new(),
            analysis: None,
            user_template: self.data_engineer_user.clone(),
            format_instructions: self.format_instructions.clone(),
        })
    }

    pub fn context_gathering(&self, question: &str, schema: &SchemaContext) -> PromptBundle {
        PromptBundle {
            role: Role::ProcessAnalyst,
            system_text: self.process_analyst_system.clone(),
            question: question.to_string(),
            schema: Some(schema.clone()),
            ontology: Vec::new(),
            few_shot_examples: Vec::new(),
            feedback_history: Vec::new(),
            clarifications: Vec::new(),
            analysis: None,
            user_template: self.process_analyst_user.clone(),
            format_instructions: String::new(),
        }
    }

    pub fn domain_expert(&self, schema: &SchemaContext) -> PromptBundle {
        PromptBundle {
            role: Role::DomainExpert,
            system_text: self.domain_expert_system.clone(),
            question: String::new(),
            schema: Some(schema.clone()),
            ontology: Vec::new(),
            few_shot_examples: Vec::new(),
            feedback_history: Vec::new(),
            clarifications: Vec::new(),
            analysis: None,
            user_template: self.domain_expert_user.clone(),
            format_instructions: String::new(),
        }
    }
}

fn fence(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

fn schema_section(schema: &SchemaContext) -> String {
    let mut s = format!(
        "The event log is the table `{}` with {} rows and these columns:\n",
        schema.table_name, schema.row_count
    );
    for c in &schema.columns {
        let _ = write!(s, "- {} ({})", c.name, c.datatype);
        if !c.sample_values.is_empty() {
            let _ = write!(s, "; examples: {}", c.sample_values.join(", "));
        }
        s.push('\n');
    }
    s.trim_end().to_string()
}

fn ontology_section(entries: &[OntologyEntry]) -> String {
    if entries.is_empty() {
        return String::new();
    }
    let mut s = String::from("Context for this question:\n");
    for e in entries {
        let _ = write!(s, "- {} ({}): {}", e.term, e.category, e.definition);
        if let Some(m) = &e.data_mapping {
            let _ = write!(s, " [{m}]");
        }
        s.push('\n');
    }
    s.trim_end().to_string()
}

fn analysis_section(text: &str) -> String {
    format!("Information the answer needs, as listed beforehand:\n{}", text.trim())
}

fn few_shot_section(shots: &[FewShot]) -> String {
    if shots.is_empty() {
        return String::new();
    }
    let mut s = String::from("Examples of questions answered on this table:\n");
    for (i, f) in shots.iter().enumerate() {
        let _ = write!(s, "\nExample {}. Question: {}\n{}\n", i + 1, f.question, fence(&f.sql));
    }
    s.trim_end().to_string()
}

fn feedback_entry(s: &mut String, fb: &Feedback) {
    if fb.sql.trim().is_empty() {
        s.push_str("No SQL could be extracted from the reply.\n");
    } else {
        let _ = writeln!(s, "SQL:\n{}", fence(&fb.sql));
    }
    let _ = write!(s, "Error: {}", fb.error);
}

fn feedback_section(history: &[Feedback]) -> String {
    if history.is_empty() {
        return String::new();
    }
    let mut s = String::from("Previous attempts and the errors they produced, oldest first:\n");
    for (i, fb) in history.iter().enumerate() {
        let _ = writeln!(s, "\nAttempt {}:", i + 1);
        feedback_entry(&mut s, fb);
        s.push('\n');
    }
    let _ = write!(s, "\nPlease {FEEDBACK_INSTRUCTION}.");
    s
}
