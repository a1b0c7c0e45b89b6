//! Chat-completion and embedding providers behind one gateway.
//!
//! The gateway adds retries for transport failures and prices every call
//! into a [`CostLedger`]. Two providers ship with the crate: an HTTP client
//! for chat-completions compatible services and a [`ScriptedProvider`] that
//! replays canned responses for hermetic runs.

mod http;
mod ledger;
mod scripted;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::cache::Vector;
use crate::db::{Db, DbError};

pub use http::{HttpConfig, HttpProvider, API_KEY_ENV};
pub use ledger::{CostLedger, LineUsage};
pub use scripted::{ScriptParseError, ScriptedProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Tier1,
    Tier2,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Tier1 => "tier1",
            Tier::Tier2 => "tier2",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A chat model and its prices per 1K tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTier {
    pub tier: Tier,
    pub model_id: String,
    #[serde(default)]
    pub prompt_price: Decimal,
    #[serde(default)]
    pub completion_price: Decimal,
}

impl ModelTier {
    pub fn new(tier: Tier, model_id: impl Into<String>) -> Self {
        Self {
            tier,
            model_id: model_id.into(),
            prompt_price: Decimal::ZERO,
            completion_price: Decimal::ZERO,
        }
    }

    pub fn with_prices(mut self, prompt: Decimal, completion: Decimal) -> Self {
        self.prompt_price = prompt;
        self.completion_price = completion;
        self
    }

    /// `prompt/1000 * prompt_price + completion/1000 * completion_price`, exact.
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> Decimal {
        price(prompt_tokens, self.prompt_price) + price(completion_tokens, self.completion_price)
    }
}

pub(crate) fn price(tokens: u64, per_1k: Decimal) -> Decimal {
    Decimal::from(tokens) * per_1k / Decimal::ONE_THOUSAND
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// What a provider is asked to complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Groups the calls of one session; scripted ordinals count per id.
    pub conversation_id: String,
    pub tier: Tier,
    pub model_id: String,
    pub temperature: f32,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

/// One priced request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub cost: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub values: Vec<f64>,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingUsage {
    pub tokens: u64,
    pub cost: Option<Decimal>,
}

impl EmbeddingUsage {
    /// Adds the call to `ledger` the way the gateway recorded it.
    pub fn charge(&self, ledger: &mut CostLedger) {
        if let Some(cost) = self.cost {
            ledger.add(ledger::EMBEDDING_LINE, self.tokens, 0, cost);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimit(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("no script rule matches call {ordinal} of conversation `{conversation_id}`")]
    NoScriptMatch { conversation_id: String, ordinal: u32 },
    #[error("embedding provider unavailable")]
    Unavailable,
}

impl ProviderError {
    fn retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::RateLimit(_))
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingResponse, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("no messages to send")]
    EmptyMessages,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("provider error after {attempts} attempt(s): {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("no embedding provider configured")]
    ProviderUnavailable,
    #[error("provider returned an invalid embedding: {0}")]
    InvalidEmbedding(String),
}

impl GatewayError {
    /// Short machine name for the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::EmptyMessages | GatewayError::EmptyText => "invalid_request",
            GatewayError::ProviderUnavailable => "provider_unavailable",
            GatewayError::InvalidEmbedding(_) => "bad_response",
            GatewayError::Provider { source, .. } => match source {
                ProviderError::Transport(_) => "transport",
                ProviderError::Auth(_) => "auth",
                ProviderError::RateLimit(_) => "rate_limit",
                ProviderError::BadResponse(_) => "bad_response",
                ProviderError::NoScriptMatch { .. } => "no_script_match",
                ProviderError::Unavailable => "provider_unavailable",
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub tier1: ModelTier,
    pub tier2: ModelTier,
    /// Per 1K tokens; embedding calls are free in the ledger when unset.
    pub embedding_price: Option<Decimal>,
    pub temperature: f32,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            tier1: ModelTier::new(Tier::Tier1, "gpt-3.5-turbo"),
            tier2: ModelTier::new(Tier::Tier2, "gpt-4"),
            embedding_price: None,
            temperature: 0.0,
            max_retries: 2,
            backoff_base_ms: 500,
        }
    }
}

impl GatewayConfig {
    pub fn model(&self, tier: Tier) -> &ModelTier {
        match tier {
            Tier::Tier1 => &self.tier1,
            Tier::Tier2 => &self.tier2,
        }
    }
}

/// Shared handle to the providers and the process-wide ledger.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

struct Inner {
    chat: Arc<dyn ChatProvider>,
    embeddings: Option<Arc<dyn EmbeddingProvider>>,
    config: GatewayConfig,
    ledger: Mutex<CostLedger>,
    store: Option<Db>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.inner.config)
            .field("embeddings", &self.inner.embeddings.is_some())
            .finish()
    }
}

pub struct GatewayBuilder {
    chat: Arc<dyn ChatProvider>,
    embeddings: Option<Arc<dyn EmbeddingProvider>>,
    config: GatewayConfig,
    store: Option<Db>,
}

impl GatewayBuilder {
    pub fn embeddings(mut self, provider: Arc<dyn EmbeddingProvider>) -> Self {
        self.embeddings = Some(provider);
        self
    }

    pub fn config(mut self, config: GatewayConfig) -> Self {
        self.config = config;
        self
    }

    /// Persist every priced call so the ledger survives restarts.
    pub fn store(mut self, db: Db) -> Self {
        self.store = Some(db);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            inner: Arc::new(Inner {
                chat: self.chat,
                embeddings: self.embeddings,
                config: self.config,
                ledger: Mutex::new(CostLedger::default()),
                store: self.store,
            }),
        }
    }
}

impl Gateway {
    pub fn builder(chat: Arc<dyn ChatProvider>) -> GatewayBuilder {
        GatewayBuilder {
            chat,
            embeddings: None,
            config: GatewayConfig::default(),
            store: None,
        }
    }

    /// A gateway whose chat and embedding calls both go to `script`
    /// (embeddings only when the script defines any).
    pub fn scripted(script: ScriptedProvider, config: GatewayConfig) -> Self {
        let script = Arc::new(script);
        let mut b = Gateway::builder(script.clone()).config(config);
        if script.has_embeddings() {
            b = b.embeddings(script);
        }
        b.build()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    pub fn has_embeddings(&self) -> bool {
        self.inner.embeddings.is_some()
    }

    /// Snapshot of everything priced by this handle since it was built.
    pub fn ledger(&self) -> CostLedger {
        self.inner.ledger.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn chat_call_count(&self) -> u64 {
        self.ledger().chat_calls()
    }

    pub fn complete(
        &self,
        conversation_id: &str,
        messages: Vec<ChatMessage>,
        tier: Tier,
    ) -> Result<ChatExchange, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyMessages);
        }
        let model = self.inner.config.model(tier);
        let request = ChatRequest {
            conversation_id: conversation_id.to_string(),
            tier,
            model_id: model.model_id.clone(),
            temperature: self.inner.config.temperature,
            messages,
        };
        let response = self.with_retries(|| self.inner.chat.complete(&request))?;
        let cost = model.cost(response.prompt_tokens, response.completion_tokens);
        let line = tier.as_str();
        self.record(line, &model.model_id, response.prompt_tokens, response.completion_tokens, cost);
        Ok(ChatExchange {
            request,
            response,
            cost,
        })
    }

    /// Provider embedding of `text`; [`GatewayError::ProviderUnavailable`]
    /// when no embedding provider is configured.
    pub fn embed_text(&self, text: &str) -> Result<Vector, GatewayError> {
        self.embed_metered(text).map(|(v, _)| v)
    }

    /// [`Gateway::embed_text`] together with what the call was charged;
    /// `cost` is `None` when embeddings are unpriced and so unrecorded.
    pub fn embed_metered(&self, text: &str) -> Result<(Vector, EmbeddingUsage), GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let provider = self.inner.embeddings.as_ref().ok_or(GatewayError::ProviderUnavailable)?;
        let resp = self.with_retries(|| provider.embed(text))?;
        let cost = self.inner.config.embedding_price.map(|per_1k| price(resp.tokens, per_1k));
        if let Some(cost) = cost {
            self.record(ledger::EMBEDDING_LINE, "embedding", resp.tokens, 0, cost);
        }
        let usage = EmbeddingUsage {
            tokens: resp.tokens,
            cost,
        };
        let v = Vector::new(resp.values).map_err(|e| GatewayError::InvalidEmbedding(e.to_string()))?;
        Ok((v, usage))
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, ProviderError>) -> Result<T, GatewayError> {
        let cfg = &self.inner.config;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt <= cfg.max_retries => {
                    let wait = cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                    tracing::warn!(attempt, error = %e, wait_ms = wait, "provider call failed, retrying");
                    if wait > 0 {
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
                Err(source) => {
                    return Err(GatewayError::Provider {
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }

    fn record(&self, line: &str, model_id: &str, prompt: u64, completion: u64, cost: Decimal) {
        self.inner
            .ledger
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .add(line, prompt, completion, cost);
        if let Some(db) = &self.inner.store {
            if let Err(e) = ledger::persist_call(db, line, model_id, prompt, completion, cost) {
                tracing::error!(error = %e, "failed to persist call ledger entry");
            }
        }
    }
}

/// Ledger of every call persisted to `db` by any gateway built with
/// [`GatewayBuilder::store`].
pub fn stored_ledger(db: &Db) -> Result<CostLedger, DbError> {
    ledger::load(db)
}
