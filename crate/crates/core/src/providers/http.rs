//! JSON-over-HTTP provider client.
//!
//! Wire contracts (POST, JSON bodies):
//!
//! | kind      | request                     | response                               |
//! |-----------|-----------------------------|----------------------------------------|
//! | embed     | `{texts}`                   | `{vectors}`                            |
//! | draft     | `{prompt}`                  | `{text}`                               |
//! | rerank    | `{query, passages}`         | `{scores}`                             |
//! | verify    | `{claim, passages}`         | `{scores}`                             |
//! | route     | `{query, context}`          | `{label}`                              |
//! | websearch | `{query, k}`                | `{results: [{title, url, snippet}]}`   |
//!
//! Transport failures are retried `max_retries_transport` times; HTTP error
//! statuses and undecodable bodies are not.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    Embedder, Generator, ProviderConfig, ProviderError, Reranker, RouteContext, Router, Verifier,
    WebResult, WebSearch,
};

#[derive(Clone)]
pub struct HttpClient {
    endpoint: String,
    timeout: Duration,
    max_retries: u32,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("endpoint", &self.endpoint)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

impl HttpClient {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| ProviderError::Config("http provider needs an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            timeout: cfg.timeout(),
            max_retries: cfg.max_retries_transport,
            agent,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn classify(&self, err: ureq::Error) -> ProviderError {
        match err {
            ureq::Error::Timeout(_) => ProviderError::Timeout {
                endpoint: self.endpoint.clone(),
                timeout_ms: self.timeout.as_millis() as u64,
            },
            ureq::Error::Json(e) => ProviderError::Decode(e.to_string()),
            other => ProviderError::Transport {
                endpoint: self.endpoint.clone(),
                message: other.to_string(),
            },
        }
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.agent.post(&self.endpoint).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if !(200..300).contains(&status) {
                        let body = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(ProviderError::Status {
                            endpoint: self.endpoint.clone(),
                            status,
                            body,
                        });
                    }
                    return resp
                        .body_mut()
                        .read_json::<Resp>()
                        .map_err(|e| match e {
                            ureq::Error::Timeout(_) => self.classify(e),
                            other => ProviderError::Decode(other.to_string()),
                        });
                }
                Err(e) => {
                    let err = self.classify(e);
                    if attempt >= self.max_retries || matches!(err, ProviderError::Decode(_)) {
                        return Err(err);
                    }
                    attempt += 1;
                    log::warn!("retrying {} after transport error: {err}", self.endpoint);
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f32>>,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Deserialize)]
struct ScoresResponse {
    scores: Vec<f64>,
}

#[derive(Deserialize)]
struct LabelResponse {
    label: String,
}

#[derive(Deserialize)]
struct ResultsResponse {
    results: Vec<WebResult>,
}

fn check_len<T>(got: Vec<T>, expected: usize) -> Result<Vec<T>, ProviderError> {
    if got.len() != expected {
        return Err(ProviderError::Decode(format!(
            "expected {expected} items, provider returned {}",
            got.len()
        )));
    }
    Ok(got)
}

#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: HttpClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient, dim: usize) -> Self {
        Self { client, dim }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let resp: VectorsResponse = self.client.post(&json!({ "texts": texts }))?;
        check_len(resp.vectors, texts.len())
    }
}

impl Generator for HttpClient {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError> {
        let resp: TextResponse = self.post(&json!({ "prompt": prompt }))?;
        Ok(resp.text)
    }
}

impl Reranker for HttpClient {
    fn rerank(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        let resp: ScoresResponse = self.post(&json!({ "query": query, "passages": passages }))?;
        check_len(resp.scores, passages.len())
    }
}

impl Verifier for HttpClient {
    fn verify(&self, claim: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        let resp: ScoresResponse = self.post(&json!({ "claim": claim, "passages": passages }))?;
        check_len(resp.scores, passages.len())
    }
}

impl Router for HttpClient {
    fn route(&self, query: &str, context: &RouteContext) -> Result<String, ProviderError> {
        let resp: LabelResponse = self.post(&json!({ "query": query, "context": context }))?;
        Ok(resp.label)
    }
}

impl WebSearch for HttpClient {
    fn search(&self, query: &str, k: usize) -> Result<Vec<WebResult>, ProviderError> {
        let resp: ResultsResponse = self.post(&json!({ "query": query, "k": k }))?;
        Ok(resp.results)
    }
}
