//! Deterministic local providers. All are pure functions of their inputs plus,
//! for the scripted ones, a call cursor.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{
    Embedder, Generator, ProviderError, Reranker, RouteContext, Router, Verifier, WebResult,
    WebSearch,
};
use crate::text;

pub const DEFAULT_EMBED_DIM: usize = 64;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Bucket a term lands in under [`deterministic_embed`].
pub fn hash_bucket(term: &str, dim: usize) -> usize {
    (fnv1a(term.as_bytes()) % dim as u64) as usize
}

/// Feature-hashed term counts, L2-normalized. Text without terms maps to the
/// first basis vector.
///
/// # Panics
/// If `dim < 8`.
pub fn deterministic_embed(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 8, "embedding dimension must be at least 8");
    let mut v = vec![0f32; dim];
    for term in text::index_terms(text) {
        v[hash_bucket(&term, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self::try_new(dim).expect("embedding dimension must be at least 8")
    }

    pub fn try_new(dim: usize) -> Result<Self, ProviderError> {
        if dim < 8 {
            return Err(ProviderError::Config(format!(
                "embedding dimension {dim} is below the minimum of 8"
            )));
        }
        Ok(Self { dim })
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| deterministic_embed(t, self.dim)).collect())
    }
}

/// Replays canned responses and records every prompt it sees.
///
/// Pattern rules are checked first (any number of uses); otherwise the next
/// sequential response is returned. With `repeat_last`, the final sequential
/// response is reused once the script runs out.
#[derive(Default)]
pub struct ScriptedLlm {
    rules: Vec<(String, String)>,
    responses: Vec<String>,
    repeat_last: bool,
    fallback: Option<Arc<dyn Generator>>,
    state: Mutex<ScriptState>,
}

#[derive(Default)]
struct ScriptState {
    cursor: usize,
    prompts: Vec<String>,
}

impl ScriptedLlm {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    /// Always answers `response`.
    pub fn constant(response: impl Into<String>) -> Self {
        Self {
            responses: vec![response.into()],
            repeat_last: true,
            ..Self::default()
        }
    }

    pub fn repeat_last(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    pub fn with_rule(mut self, prompt_contains: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push((prompt_contains.into(), response.into()));
        self
    }

    /// Generator consulted when no rule matches and the script is exhausted.
    pub fn with_fallback(mut self, fallback: Arc<dyn Generator>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn prompts(&self) -> Vec<String> {
        self.state.lock().unwrap().prompts.clone()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().prompts.len()
    }
}

impl Generator for ScriptedLlm {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError> {
        let mut state = self.state.lock().unwrap();
        state.prompts.push(prompt.to_string());
        if let Some((_, resp)) = self.rules.iter().find(|(p, _)| prompt.contains(p.as_str())) {
            return Ok(resp.clone());
        }
        if state.cursor < self.responses.len() {
            state.cursor += 1;
            return Ok(self.responses[state.cursor - 1].clone());
        }
        if self.repeat_last {
            if let Some(last) = self.responses.last() {
                return Ok(last.clone());
            }
        }
        if let Some(fallback) = &self.fallback {
            drop(state);
            return fallback.generate(prompt);
        }
        Err(ProviderError::ScriptExhausted {
            calls: state.prompts.len(),
        })
    }
}

/// Numbered snippets (`[n] text` lines) found in a drafting prompt.
pub fn prompt_snippets(prompt: &str) -> BTreeMap<usize, String> {
    let mut out = BTreeMap::new();
    for line in prompt.lines() {
        let Some(rest) = line.strip_prefix('[') else {
            continue;
        };
        let Some((num, body)) = rest.split_once("] ") else {
            continue;
        };
        if let Ok(n) = num.parse::<usize>() {
            out.entry(n).or_insert_with(|| body.trim().to_string());
        }
    }
    out
}

fn first_sentence_cited(snippet: &str, marker: usize) -> String {
    let first = crate::grounding::segment_sentences(snippet)
        .into_iter()
        .next()
        .map(|s| s.text)
        .unwrap_or_else(|| snippet.to_string());
    let body = first.trim_end_matches(['.', '!', '?']).trim_end();
    format!("{body} [{marker}].")
}

/// Copies the first sentence of snippet `[1]` verbatim and cites it.
#[derive(Debug, Default)]
pub struct ExtractiveLlm {
    calls: AtomicUsize,
}

impl ExtractiveLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Generator for ExtractiveLlm {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match prompt_snippets(prompt).get(&1) {
            Some(snippet) => first_sentence_cited(snippet, 1),
            None => "N/A".to_string(),
        })
    }
}

/// Extractive answer followed by one uncited fabricated sentence, every round.
#[derive(Debug)]
pub struct AdversarialLlm {
    fabricated: String,
    calls: AtomicUsize,
}

pub const FABRICATED_SENTENCE: &str = "Zebras negotiated the merger during 1850.";

impl Default for AdversarialLlm {
    fn default() -> Self {
        Self::new(FABRICATED_SENTENCE)
    }
}

impl AdversarialLlm {
    pub fn new(fabricated: impl Into<String>) -> Self {
        Self {
            fabricated: fabricated.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Generator for AdversarialLlm {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let grounded = prompt_snippets(prompt)
            .get(&1)
            .map(|s| first_sentence_cited(s, 1))
            .unwrap_or_default();
        Ok(format!("{grounded} {}", self.fabricated).trim().to_string())
    }
}

/// Keeps the incoming order: scores fall linearly with position.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn rerank(&self, _query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        let n = passages.len() as f64;
        Ok((0..passages.len()).map(|i| 1.0 - i as f64 / n).collect())
    }
}

/// `|query ∩ passage content terms| / |query content terms|`.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalReranker;

impl Reranker for LexicalReranker {
    fn rerank(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        Ok(passages
            .iter()
            .map(|p| text::lexical_overlap_score(query, p))
            .collect())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalVerifier;

impl Verifier for LexicalVerifier {
    fn verify(&self, claim: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        Ok(passages
            .iter()
            .map(|p| text::lexical_overlap_score(claim, p))
            .collect())
    }
}

const CHART_VERBS: &[&str] = &["plot", "chart", "graph", "visualize", "visualise"];
const IMAGE_CUES: &[&str] = &["image", "photo", "picture", "screenshot"];
const PLUGIN_VERBS: &[&str] = &["call", "invoke", "use", "ask"];
const WEB_CUES: &[&str] = &["search the web", "web search", "on the internet", "latest news"];
const DOCUMENT_CUES: &[&str] = &["policy", "document", "documents", "contract", "report"];

fn names_match(word: &str, name: &str) -> bool {
    let name = name.to_lowercase();
    word == name
        || word.strip_suffix('s') == Some(name.as_str())
        || name.strip_suffix('s') == Some(word)
}

/// Keyword router: registered tables or metrics ⇒ `sql`, plugin verb plus a
/// registered plugin id ⇒ `plugin:<id>`, chart verbs add a `chart` flag on top
/// of the data route, everything else ⇒ `documents`.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleRouter;

impl Router for RuleRouter {
    fn route(&self, query: &str, ctx: &RouteContext) -> Result<String, ProviderError> {
        let lower = query.to_lowercase();
        let words = text::index_terms(&lower);
        let has = |list: &[&str]| words.iter().any(|w| list.contains(&w.as_str()));

        if has(IMAGE_CUES) {
            return Ok("image".into());
        }
        if has(PLUGIN_VERBS) {
            if let Some(id) = ctx
                .plugins
                .iter()
                .find(|p| words.iter().any(|w| *w == p.to_lowercase()))
            {
                return Ok(format!("plugin:{id}"));
            }
        }
        if WEB_CUES.iter().any(|c| lower.contains(c)) {
            return Ok("web_search".into());
        }

        let chart = has(CHART_VERBS);
        let data = words.iter().any(|w| {
            ctx.tables.iter().any(|t| names_match(w, t))
                || ctx.metrics.iter().any(|m| names_match(w, m))
        });
        if data {
            let mut label = String::from("sql");
            if chart {
                label.push_str("+chart");
            }
            if has(DOCUMENT_CUES) {
                label.push_str("+documents");
            }
            return Ok(label);
        }
        if chart && ctx.previous_table {
            return Ok("chart".into());
        }
        Ok("documents".into())
    }
}

/// Canned web search that records each query it receives.
#[derive(Debug, Default)]
pub struct MockWebSearch {
    results: Option<Vec<WebResult>>,
    queries: Mutex<Vec<String>>,
}

impl MockWebSearch {
    pub fn with_results(results: Vec<WebResult>) -> Self {
        Self {
            results: Some(results),
            queries: Mutex::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.queries.lock().unwrap().len()
    }

    pub fn queries(&self) -> Vec<String> {
        self.queries.lock().unwrap().clone()
    }
}

impl WebSearch for MockWebSearch {
    fn search(&self, query: &str, k: usize) -> Result<Vec<WebResult>, ProviderError> {
        self.queries.lock().unwrap().push(query.to_string());
        let mut results = self.results.clone().unwrap_or_else(|| {
            let slug: String = text::index_terms(query).join("+");
            vec![WebResult {
                title: format!("Web result: {query}"),
                url: format!("https://search.example/?q={slug}"),
                snippet: query.trim().to_string(),
            }]
        });
        results.truncate(k);
        Ok(results)
    }
}

/// Fails every call; used to exercise degraded paths.
#[derive(Debug, Default, Clone, Copy)]
pub struct Unavailable;

impl Unavailable {
    fn err() -> ProviderError {
        ProviderError::Unavailable("provider is offline".into())
    }
}

impl Embedder for Unavailable {
    fn dimension(&self) -> usize {
        DEFAULT_EMBED_DIM
    }
    fn embed(&self, _: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Err(Self::err())
    }
}

impl Generator for Unavailable {
    fn generate(&self, _: &str) -> Result<String, ProviderError> {
        Err(Self::err())
    }
}

impl Reranker for Unavailable {
    fn rerank(&self, _: &str, _: &[&str]) -> Result<Vec<f64>, ProviderError> {
        Err(Self::err())
    }
}

impl Verifier for Unavailable {
    fn verify(&self, _: &str, _: &[&str]) -> Result<Vec<f64>, ProviderError> {
        Err(Self::err())
    }
}

impl Router for Unavailable {
    fn route(&self, _: &str, _: &RouteContext) -> Result<String, ProviderError> {
        Err(Self::err())
    }
}

impl WebSearch for Unavailable {
    fn search(&self, _: &str, _: usize) -> Result<Vec<WebResult>, ProviderError> {
        Err(Self::err())
    }
}
