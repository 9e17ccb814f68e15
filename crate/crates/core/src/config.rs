//! TOML configuration with one section per subsystem:
//! `[chunking]`, `[retrieval]`, `[grounding]`, `[t2s]`, `[providers]` and
//! `[service]`. Every key is optional and defaults to the documented value.
//!
//! ```toml
//! [chunking]
//! window_tokens = 1000
//! overlap_tokens = 150
//!
//! [retrieval]
//! n_candidates = 200
//! top_n = 50
//!
//! [grounding]
//! max_rounds = 3
//! support_threshold = 0.5
//!
//! [t2s]
//! max_retries = 2
//!
//! [providers.draft]
//! mode = "mock"
//!
//! [service]
//! port = 8080
//! relevance_floor = 0.2
//!
//! [[service.datasources]]
//! name = "shop"
//! connection = "fixture"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ingest::ChunkPolicy;
use crate::orchestrator::{
    DataSource, DataSourceConfig, Engine, EngineConfig, HttpPlugin, OrchestratorConfig, PluginConfig,
};
use crate::providers::{ProviderMode, Providers, ProvidersConfig};
use crate::retrieval::{IndexHandle, RetrievalConfig};
use crate::grounding::GroundingConfig;
use crate::t2s::{mock::SchemaSqlLlm, T2sConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid [{section}] section: {message}")]
    Invalid { section: &'static str, message: String },
    #[error("startup: {0}")]
    Startup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Directory holding the saved index, loaded at startup and rewritten by
    /// `POST /v1/ingest`.
    pub index_dir: Option<PathBuf>,
    /// Where per-query state snapshots are written.
    pub state_dir: Option<PathBuf>,
    pub heartbeat_secs: u64,
    #[serde(flatten)]
    pub orchestrator: OrchestratorConfig,
    pub datasources: Vec<DataSourceConfig>,
    pub plugins: Vec<PluginConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            index_dir: None,
            state_dir: None,
            heartbeat_secs: 15,
            orchestrator: OrchestratorConfig::default(),
            datasources: Vec::new(),
            plugins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub chunking: ChunkPolicy,
    pub retrieval: RetrievalConfig,
    pub grounding: GroundingConfig,
    pub t2s: T2sConfig,
    pub providers: ProvidersConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, message: String| ConfigError::Invalid { section, message };
        self.chunking.validate().map_err(|e| invalid("chunking", e.to_string()))?;
        self.retrieval.validate().map_err(|e| invalid("retrieval", e.to_string()))?;
        self.grounding.validate().map_err(|e| invalid("grounding", e.to_string()))?;
        self.t2s.validate().map_err(|e| invalid("t2s", e))?;
        let o = &self.service.orchestrator;
        if !(0.0..=1.0).contains(&o.relevance_floor) {
            return Err(invalid("service", format!("relevance_floor {} is outside [0, 1]", o.relevance_floor)));
        }
        if o.dialogue_window == 0 || o.web_results == 0 {
            return Err(invalid("service", "dialogue_window and web_results must be positive".into()));
        }
        if self.service.heartbeat_secs == 0 {
            return Err(invalid("service", "heartbeat_secs must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.service.datasources {
            if !names.insert(&d.name) {
                return Err(invalid("service", format!("data source {:?} is listed twice", d.name)));
            }
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            orchestrator: self.service.orchestrator.clone(),
            retrieval: self.retrieval,
            grounding: self.grounding,
            t2s: self.t2s.clone(),
        }
    }

    /// Providers, data sources, plugins and (if present on disk) the saved
    /// index, wired into an engine.
    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        let startup = |e: &dyn std::fmt::Display| ConfigError::Startup(e.to_string());
        let providers = Providers::from_config(&self.providers).map_err(|e| startup(&e))?;
        let mut engine = Engine::new(providers, self.engine_config());
        if self.providers.draft.mode == ProviderMode::Mock {
            engine.sql_generator = Arc::new(SchemaSqlLlm::new());
        }
        engine.state_dir = self.service.state_dir.clone();
        for p in &self.service.plugins {
            engine = engine.with_plugin(Arc::new(HttpPlugin::new(p).map_err(|e| startup(&e))?));
        }
        for d in &self.service.datasources {
            engine
                .register_datasource(DataSource::open(d).map_err(|e| startup(&e))?)
                .map_err(|e| startup(&e))?;
        }
        if let Some(dir) = &self.service.index_dir {
            if dir.join("manifest.json").exists() {
                let ix = IndexHandle::load(dir, engine.providers.embedder.clone()).map_err(|e| startup(&e))?;
                engine.set_index(Arc::new(ix));
            }
        }
        Ok(engine)
    }
}
