//! External plugins: registered JSON endpoints called with
//! `{"query", "session_id"}` that answer `{"result": <any JSON>}`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::providers::http::HttpClient;
use crate::providers::{ProviderConfig, ProviderError, ProviderMode};

pub const DEFAULT_PLUGIN_TIMEOUT_MS: u64 = 10_000;

pub trait Plugin: Send + Sync {
    fn id(&self) -> &str;
    fn invoke(&self, query: &str, session_id: &str) -> Result<Value, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginConfig {
    pub id: String,
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_PLUGIN_TIMEOUT_MS
}

#[derive(Debug, Clone)]
pub struct HttpPlugin {
    id: String,
    client: HttpClient,
}

impl HttpPlugin {
    pub fn new(cfg: &PluginConfig) -> Result<Self, ProviderError> {
        let client = HttpClient::new(&ProviderConfig {
            mode: ProviderMode::Http,
            endpoint: Some(cfg.endpoint.clone()),
            timeout_ms: cfg.timeout_ms,
            max_retries_transport: 0,
        })?;
        Ok(Self {
            id: cfg.id.clone(),
            client,
        })
    }
}

#[derive(Deserialize)]
struct Envelope {
    result: Value,
}

impl Plugin for HttpPlugin {
    fn id(&self) -> &str {
        &self.id
    }

    fn invoke(&self, query: &str, session_id: &str) -> Result<Value, ProviderError> {
        let env: Envelope = self
            .client
            .post(&json!({ "query": query, "session_id": session_id }))?;
        Ok(env.result)
    }
}

/// Returns `{"plugin": id, "echo": query}` and counts calls.
#[derive(Debug)]
pub struct EchoPlugin {
    id: String,
    calls: AtomicUsize,
}

impl EchoPlugin {
    pub fn new(id: impl Into<String>) -> Arc<Self> {
        Arc::new(Self {
            id: id.into(),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Plugin for EchoPlugin {
    fn id(&self) -> &str {
        &self.id
    }

    fn invoke(&self, query: &str, _session_id: &str) -> Result<Value, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(json!({ "plugin": self.id, "echo": query }))
    }
}
