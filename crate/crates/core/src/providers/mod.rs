//! Provider interfaces for embedding, drafting, reranking, verification,
//! routing and web search.
//!
//! Every interface has a deterministic local implementation in [`mock`] and a
//! JSON-over-HTTP client in [`http`] that speaks one shared wire format, so any
//! vendor adapter can sit behind the same endpoint shape.

pub mod http;
pub mod mock;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use mock::{
    deterministic_embed, AdversarialLlm, ExtractiveLlm, HashEmbedder, IdentityReranker,
    LexicalReranker, LexicalVerifier, MockWebSearch, RuleRouter, ScriptedLlm, Unavailable,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("request to {endpoint} timed out after {timeout_ms} ms")]
    Timeout { endpoint: String, timeout_ms: u64 },
    #[error("{endpoint} answered HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("could not decode provider response: {0}")]
    Decode(String),
    #[error("scripted provider exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Text generation. Used both for drafting grounded answers and for SQL.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError>;
}

/// Scores in `[0, 1]`, one per passage, higher is better.
pub trait Reranker: Send + Sync {
    fn rerank(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError>;
}

/// Support score of `claim` against each passage, in `[0, 1]`.
pub trait Verifier: Send + Sync {
    fn verify(&self, claim: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError>;
}

/// What the router may look at besides the query text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteContext {
    /// Registered table names across all data sources.
    pub tables: Vec<String>,
    /// Column names and metric aliases that imply structured data.
    pub metrics: Vec<String>,
    pub plugins: Vec<String>,
    /// Whether the previous turn of the session produced a table.
    pub previous_table: bool,
    pub recent_turns: Vec<String>,
}

/// Returns a route label such as `documents`, `sql+chart` or `plugin:weather`.
pub trait Router: Send + Sync {
    fn route(&self, query: &str, context: &RouteContext) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebResult {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

pub trait WebSearch: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<WebResult>, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Embed,
    Draft,
    Rerank,
    Verify,
    Route,
    Websearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries_transport: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Mock,
            endpoint: None,
            timeout_ms: 10_000,
            max_retries_transport: 1,
        }
    }
}

impl ProviderConfig {
    pub fn http(endpoint: impl Into<String>) -> Self {
        Self {
            mode: ProviderMode::Http,
            endpoint: Some(endpoint.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self, kind: ProviderKind) -> Result<(), ProviderError> {
        if self.mode == ProviderMode::Http && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(ProviderError::Config(format!(
                "{kind:?} provider in http mode needs an endpoint"
            )));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Per-kind provider settings, mirroring the `[providers]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvidersConfig {
    pub embed_dim: usize,
    pub embed: ProviderConfig,
    pub draft: ProviderConfig,
    pub rerank: ProviderConfig,
    pub verify: ProviderConfig,
    pub route: ProviderConfig,
    pub websearch: ProviderConfig,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            embed_dim: mock::DEFAULT_EMBED_DIM,
            embed: ProviderConfig::default(),
            draft: ProviderConfig::default(),
            rerank: ProviderConfig::default(),
            verify: ProviderConfig::default(),
            route: ProviderConfig::default(),
            websearch: ProviderConfig::default(),
        }
    }
}

/// The full set of providers a query needs, shareable across workers.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn Generator>,
    pub reranker: Arc<dyn Reranker>,
    pub verifier: Arc<dyn Verifier>,
    pub router: Arc<dyn Router>,
    pub web_search: Arc<dyn WebSearch>,
}

impl Providers {
    /// Deterministic local providers: hash embeddings, extractive drafting,
    /// lexical rerank/verify, rule routing and a canned web search.
    pub fn mock() -> Self {
        Self {
            embedder: Arc::new(HashEmbedder::new(mock::DEFAULT_EMBED_DIM)),
            generator: Arc::new(ExtractiveLlm::new()),
            reranker: Arc::new(LexicalReranker),
            verifier: Arc::new(LexicalVerifier),
            router: Arc::new(RuleRouter),
            web_search: Arc::new(MockWebSearch::default()),
        }
    }

    pub fn from_config(cfg: &ProvidersConfig) -> Result<Self, ProviderError> {
        use http::HttpClient;
        let mut p = Self::mock();
        let client = |c: &ProviderConfig, kind| -> Result<HttpClient, ProviderError> {
            c.validate(kind)?;
            HttpClient::new(c)
        };
        if cfg.embed.mode == ProviderMode::Http {
            p.embedder = Arc::new(http::HttpEmbedder::new(
                client(&cfg.embed, ProviderKind::Embed)?,
                cfg.embed_dim,
            ));
        } else {
            p.embedder = Arc::new(HashEmbedder::try_new(cfg.embed_dim)?);
        }
        if cfg.draft.mode == ProviderMode::Http {
            p.generator = Arc::new(client(&cfg.draft, ProviderKind::Draft)?);
        }
        if cfg.rerank.mode == ProviderMode::Http {
            p.reranker = Arc::new(client(&cfg.rerank, ProviderKind::Rerank)?);
        }
        if cfg.verify.mode == ProviderMode::Http {
            p.verifier = Arc::new(client(&cfg.verify, ProviderKind::Verify)?);
        }
        if cfg.route.mode == ProviderMode::Http {
            p.router = Arc::new(client(&cfg.route, ProviderKind::Route)?);
        }
        if cfg.websearch.mode == ProviderMode::Http {
            p.web_search = Arc::new(client(&cfg.websearch, ProviderKind::Websearch)?);
        }
        Ok(p)
    }
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Providers")
            .field("embed_dim", &self.embedder.dimension())
            .finish_non_exhaustive()
    }
}
