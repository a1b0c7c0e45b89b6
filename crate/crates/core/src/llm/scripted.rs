//! Canned responses for deterministic runs.
//!
//! A script is a JSON array of chat rules, or an object with `chat` and
//! `embeddings` arrays. Rules are tried in file order and the first match
//! wins. A rule's `match` may name a `substring` of the conversation text,
//! the 1-based `ordinal` of the call within its conversation, and a `tier`;
//! an empty `match` matches every call. Token counts default to
//! whitespace-separated word counts.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{ChatProvider, ChatRequest, ChatResponse, EmbeddingProvider, EmbeddingResponse, ProviderError, Tier};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptParseError {
    #[error("cannot read script {path}: {message}")]
    Io { path: String, message: String },
    #[error("script line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
}

impl ScriptParseError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScriptParseError::Syntax { line, .. } => Some(*line),
            ScriptParseError::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
struct Matcher {
    substring: Option<String>,
    ordinal: Option<u32>,
    tier: Option<Tier>,
}

impl Matcher {
    fn matches(&self, text: &str, ordinal: u32, tier: Tier) -> bool {
        self.substring.as_deref().is_none_or(|s| text.contains(s))
            && self.ordinal.is_none_or(|o| o == ordinal)
            && self.tier.is_none_or(|t| t == tier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SimulatedError {
    Transport,
    Auth,
    RateLimit,
    BadResponse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Outcome {
    Respond(String),
    Fail(SimulatedError, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(try_from = "RawChatRule")]
struct ChatRule {
    matcher: Matcher,
    outcome: Outcome,
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
    latency_ms: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChatRule {
    #[serde(default, rename = "match")]
    matcher: Matcher,
    response: Option<String>,
    error: Option<SimulatedError>,
    message: Option<String>,
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
    #[serde(default)]
    latency_ms: u64,
}

impl TryFrom<RawChatRule> for ChatRule {
    type Error = String;

    fn try_from(r: RawChatRule) -> Result<Self, String> {
        let outcome = match (r.response, r.error) {
            (Some(text), None) => Outcome::Respond(text),
            (None, Some(kind)) => Outcome::Fail(kind, r.message.unwrap_or_else(|| "simulated failure".into())),
            (Some(_), Some(_)) => return Err("rule has both `response` and `error`".into()),
            (None, None) => return Err("rule needs a `response` or an `error`".into()),
        };
        Ok(ChatRule {
            matcher: r.matcher,
            outcome,
            prompt_tokens: r.prompt_tokens,
            completion_tokens: r.completion_tokens,
            latency_ms: r.latency_ms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRule {
    #[serde(default, rename = "match")]
    matcher: EmbeddingMatcher,
    vector: Vec<f64>,
    tokens: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingMatcher {
    substring: Option<String>,
}

/// Replays a script. Shareable; ordinals are tracked per conversation id.
#[derive(Debug)]
pub struct ScriptedProvider {
    chat: Vec<ChatRule>,
    embeddings: Vec<EmbeddingRule>,
    ordinals: Mutex<HashMap<String, u32>>,
}

impl ScriptedProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptParseError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ScriptParseError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptParseError> {
        let syntax = |e: serde_json::Error| ScriptParseError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        };
        // Parse to values first so rule errors can point at the rule's own
        // line rather than wherever the parser stopped.
        let root: serde_json::Value = serde_json::from_str(text).map_err(syntax)?;
        let starts = element_starts(text);
        let (chat, embeddings) = match root {
            serde_json::Value::Array(items) => (rules(items, &starts, "")?, Vec::new()),
            serde_json::Value::Object(mut map) => {
                if let Some(k) = map.keys().find(|k| *k != "chat" && *k != "embeddings") {
                    return Err(ScriptParseError::Syntax {
                        line: 1,
                        column: 1,
                        message: format!("unknown top-level key `{k}`; expected `chat` or `embeddings`"),
                    });
                }
                let mut take = |key: &str| match map.remove(key) {
                    Some(serde_json::Value::Array(items)) => Ok(items),
                    None => Ok(Vec::new()),
                    Some(_) => Err(ScriptParseError::Syntax {
                        line: 1,
                        column: 1,
                        message: format!("`{key}` must be an array"),
                    }),
                };
                let (c, e) = (take("chat")?, take("embeddings")?);
                (rules(c, &starts, "chat")?, rules(e, &starts, "embeddings")?)
            }
            _ => {
                return Err(ScriptParseError::Syntax {
                    line: 1,
                    column: 1,
                    message: "a script is an array of rules or an object with `chat` and `embeddings`".into(),
                })
            }
        };
        Ok(Self {
            chat,
            embeddings,
            ordinals: Mutex::new(HashMap::new()),
        })
    }

    pub fn has_embeddings(&self) -> bool {
        !self.embeddings.is_empty()
    }

    pub fn rule_count(&self) -> usize {
        self.chat.len()
    }
}

fn rules<T: serde::de::DeserializeOwned>(
    items: Vec<serde_json::Value>,
    starts: &[(String, usize, usize)],
    key: &str,
) -> Result<Vec<T>, ScriptParseError> {
    let mut positions = starts.iter().filter(|(k, _, _)| k == key);
    items
        .into_iter()
        .map(|item| {
            let (line, column) = positions.next().map(|(_, l, c)| (*l, *c)).unwrap_or((1, 1));
            serde_json::from_value(item).map_err(|e| ScriptParseError::Syntax {
                line,
                column,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Line and column of every element of the top-level array, or of the
/// arrays under each top-level key, tagged with that key (empty for the
/// top-level array). Assumes `text` is valid JSON.
fn element_starts(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    // One entry per open container, true for arrays.
    let mut stack: Vec<bool> = Vec::new();
    let mut key = String::new();
    let mut last_string = String::new();
    let mut expect_value = false;
    let (mut line, mut col) = (1, 0);
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        col += 1;
        if c == '\n' {
            line += 1;
            col = 0;
            continue;
        }
        if c.is_whitespace() || c == ',' {
            if c == ',' && stack.last() == Some(&true) {
                expect_value = true;
            }
            continue;
        }
        let in_rule_list = match stack.len() {
            1 => key.is_empty(),
            2 => !key.is_empty(),
            _ => false,
        };
        if expect_value && stack.last() == Some(&true) && in_rule_list {
            out.push((key.clone(), line, col));
        }
        expect_value = false;
        match c {
            '"' => {
                let mut s = String::new();
                while let Some(d) = chars.next() {
                    col += 1;
                    match d {
                        '\\' => {
                            if let Some(e) = chars.next() {
                                col += 1;
                                s.push(e);
                            }
                        }
                        '"' => break,
                        _ => s.push(d),
                    }
                }
                last_string = s;
            }
            ':' => {
                if stack.len() == 1 {
                    key = last_string.clone();
                }
            }
            '[' => {
                stack.push(true);
                expect_value = true;
            }
            '{' => stack.push(false),
            ']' | '}' => {
                stack.pop();
            }
            _ => {}
        }
    }
    out
}

pub(crate) fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let ordinal = {
            let mut map = self.ordinals.lock().unwrap_or_else(|p| p.into_inner());
            let n = map.entry(request.conversation_id.clone()).or_insert(0);
            *n += 1;
            *n
        };
        let text: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let rule = self
            .chat
            .iter()
            .find(|r| r.matcher.matches(&text, ordinal, request.tier))
            .ok_or_else(|| ProviderError::NoScriptMatch {
                conversation_id: request.conversation_id.clone(),
                ordinal,
            })?;
        match &rule.outcome {
            Outcome::Respond(body) => Ok(ChatResponse {
                text: body.clone(),
                prompt_tokens: rule.prompt_tokens.unwrap_or_else(|| word_count(&text)),
                completion_tokens: rule.completion_tokens.unwrap_or_else(|| word_count(body)),
                latency_ms: rule.latency_ms,
            }),
            Outcome::Fail(kind, msg) => Err(match kind {
                SimulatedError::Transport => ProviderError::Transport(msg.clone()),
                SimulatedError::Auth => ProviderError::Auth(msg.clone()),
                SimulatedError::RateLimit => ProviderError::RateLimit(msg.clone()),
                SimulatedError::BadResponse => ProviderError::BadResponse(msg.clone()),
            }),
        }
    }
}

impl EmbeddingProvider for ScriptedProvider {
    fn embed(&self, text: &str) -> Result<EmbeddingResponse, ProviderError> {
        if self.embeddings.is_empty() {
            return Err(ProviderError::Unavailable);
        }
        let rule = self
            .embeddings
            .iter()
            .find(|r| r.matcher.substring.as_deref().is_none_or(|s| text.contains(s)))
            .ok_or_else(|| ProviderError::NoScriptMatch {
                conversation_id: "embeddings".into(),
                ordinal: 0,
            })?;
        Ok(EmbeddingResponse {
            values: rule.vector.clone(),
            tokens: rule.tokens.unwrap_or_else(|| word_count(text)),
        })
    }
}
