//! TOML configuration shared by every subcommand and the HTTP service.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use logtalk::clock::{Clock, StepClock, SystemClock};
use logtalk::db::Db;
use logtalk::llm::{Gateway, GatewayConfig, HttpConfig, HttpProvider, ScriptedProvider};
use logtalk::orchestrator::{Orchestrator, OrchestratorConfig};
use logtalk::prompt::Templates;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// SQLite file holding the event log, cache, ontology, sessions,
    /// evaluation runs and the cost ledger.
    pub store: PathBuf,
    /// Directory overriding the builtin prompt templates.
    pub templates: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub gateway: GatewayConfig,
    pub orchestrator: OrchestratorConfig,
    pub server: ServerConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from("logtalk.db"),
            templates: None,
            provider: ProviderConfig::Http(HttpConfig::default()),
            gateway: GatewayConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    /// An OpenAI-compatible endpoint.
    Http(HttpConfig),
    /// Replays a JSON script; `step_clock` makes transcripts reproducible.
    Scripted {
        script: PathBuf,
        #[serde(default)]
        step_clock: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl AppConfig {
    /// Relative paths inside the file are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config: AppConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.message().to_string(),
        })?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.store);
        if let Some(t) = &mut self.templates {
            fix(t);
        }
        if let ProviderConfig::Scripted { script, .. } = &mut self.provider {
            fix(script);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.orchestrator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.server.bind.trim().is_empty() {
            return Err(ConfigError::Invalid("server.bind is empty".into()));
        }
        Ok(())
    }

    /// Opens the store and wires the gateway and orchestrator.
    pub fn open(&self) -> Result<Orchestrator, ConfigError> {
        self.validate()?;
        let db = Db::open(&self.store).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.open_with(db)
    }

    pub fn open_with(&self, db: Db) -> Result<Orchestrator, ConfigError> {
        let (builder, clock): (_, Arc<dyn Clock>) = match &self.provider {
            ProviderConfig::Http(http) => {
                let p = Arc::new(HttpProvider::new(http.clone()));
                let mut b = Gateway::builder(p.clone());
                if http.embedding_model.is_some() {
                    b = b.embeddings(p);
                }
                (b, Arc::new(SystemClock))
            }
            ProviderConfig::Scripted { script, step_clock } => {
                let text = std::fs::read_to_string(script).map_err(|e| ConfigError::Io {
                    path: script.display().to_string(),
                    message: e.to_string(),
                })?;
                let p = Arc::new(ScriptedProvider::from_json(&text).map_err(|e| ConfigError::Parse {
                    path: script.display().to_string(),
                    message: e.to_string(),
                })?);
                let mut b = Gateway::builder(p.clone());
                if p.has_embeddings() {
                    b = b.embeddings(p);
                }
                let clock: Arc<dyn Clock> = if *step_clock {
                    Arc::new(StepClock::default())
                } else {
                    Arc::new(SystemClock)
                };
                (b, clock)
            }
        };
        let gateway = builder.config(self.gateway.clone()).store(db.clone()).build();
        let mut orch = Orchestrator::new(db, gateway, self.orchestrator.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?
            .with_clock(clock);
        if let Some(dir) = &self.templates {
            let t = Templates::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            orch = orch.with_templates(t);
        }
        Ok(orch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_bind_loopback() {
        let c = AppConfig::default();
        assert_eq!(c.server.bind, DEFAULT_BIND);
        assert_eq!(c.orchestrator.session_expiry_hours, 24);
        c.validate().unwrap();
    }

    #[test]
    fn parses_scripted_provider_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logtalk.toml");
        std::fs::write(
            &path,
            "store = \"data.db\"\n[provider]\nkind = \"scripted\"\nscript = \"script.json\"\nstep_clock = true\n\
             [orchestrator]\nsimilarity_threshold = 0.85\n[gateway.tier2]\ntier = \"tier2\"\nmodel_id = \"big\"\n",
        )
        .unwrap();
        let c = AppConfig::load(&path).unwrap();
        assert_eq!(c.store, dir.path().join("data.db"));
        assert_eq!(
            c.provider,
            ProviderConfig::Scripted {
                script: dir.path().join("script.json"),
                step_clock: true
            }
        );
        assert_eq!(c.orchestrator.similarity_threshold, 0.85);
        assert_eq!(c.gateway.tier2.model_id, "big");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "stor = \"x\"\n").unwrap();
        assert!(matches!(AppConfig::load(&path), Err(ConfigError::Parse { .. })));
        std::fs::write(&path, "[orchestrator]\nsimilarity_threshold = 1.5\n").unwrap();
        let c = AppConfig::load(&path).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    }
}
