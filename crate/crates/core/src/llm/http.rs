//! Client for chat-completions compatible HTTP services.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatProvider, ChatRequest, ChatResponse, EmbeddingProvider, EmbeddingResponse, ProviderError};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "LOGTALK_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub endpoint: String,
    pub embedding_model: Option<String>,
    pub timeout_secs: u64,
    pub api_key_env: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            embedding_model: None,
            timeout_secs: 120,
            api_key_env: API_KEY_ENV.into(),
        }
    }
}

pub struct HttpProvider {
    agent: ureq::Agent,
    config: HttpConfig,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.config.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<set>"))
            .finish()
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl HttpProvider {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: HttpConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { agent, config, api_key }
    }

    pub fn supports_embeddings(&self) -> bool {
        self.config.embedding_model.is_some()
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<ureq::http::Response<ureq::Body>, ProviderError> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(401 | 403) => ProviderError::Auth(format!("HTTP status {} from {url}", status(&e))),
            ureq::Error::StatusCode(429) => ProviderError::RateLimit(format!("HTTP 429 from {url}")),
            ureq::Error::StatusCode(code) if code >= 500 => ProviderError::Transport(format!("HTTP {code} from {url}")),
            ureq::Error::StatusCode(code) => ProviderError::BadResponse(format!("HTTP {code} from {url}")),
            other => ProviderError::Transport(other.to_string()),
        })
    }
}

fn status(e: &ureq::Error) -> u16 {
    match e {
        ureq::Error::StatusCode(c) => *c,
        _ => 0,
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let started = Instant::now();
        let body = json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": request.messages,
        });
        let mut resp = self.post("chat/completions", body)?;
        let parsed: CompletionBody = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::BadResponse("response has no message content".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(ChatResponse {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl EmbeddingProvider for HttpProvider {
    fn embed(&self, text: &str) -> Result<EmbeddingResponse, ProviderError> {
        let model = self.config.embedding_model.as_ref().ok_or(ProviderError::Unavailable)?;
        let mut resp = self.post("embeddings", json!({ "model": model, "input": text }))?;
        let parsed: EmbeddingBody = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| ProviderError::BadResponse("response has no embedding".into()))?;
        Ok(EmbeddingResponse {
            values,
            tokens: parsed.usage.map(|u| u.prompt_tokens).unwrap_or(0),
        })
    }
}
