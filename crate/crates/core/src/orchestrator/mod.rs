//! Per-query pipeline: session context, intent routing, the documents / SQL /
//! web / plugin / chart paths, answer assembly and event emission.
//!
//! A [`PipelineState`] only grows while a query runs. Every citation trace
//! points at a snippet in `retrieved_content`, and web search runs only after
//! internal retrieval has been judged insufficient.

pub mod answer;
pub mod plugins;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use answer::{optimize_answer, FinalAnswer, Reference, SupportSummary, NO_ANSWER};
pub use plugins::{EchoPlugin, HttpPlugin, Plugin, PluginConfig};

use crate::events::{Emitter, EventKind};
use crate::grounding::{self, CitationTrace, GroundedAnswer, GroundingConfig, GroundingMode};
use crate::providers::{Generator, Providers, RouteContext};
use crate::ingest::{corpus_stats, ChunkPolicy, ChunkStore, CorpusStats, Document};
use crate::retrieval::{build_indexes_with_policy, IndexHandle, IndexManifest, RetrievalConfig, Snippet, SnippetOrigin};
use crate::t2s::{
    self, chart, fixture, ChartDecision, ChartKind, Clock, Dialect, Executor, ResultTable,
    SchemaContext, SqliteExecutor, SystemClock, T2sConfig, T2sContext, T2sResult,
};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("data source {0:?} is already registered")]
    DuplicateDatasource(String),
    #[error("unknown data source {0:?}")]
    UnknownDatasource(String),
    #[error("data source {name}: {message}")]
    Datasource { name: String, message: String },
    #[error("{0}")]
    Step(String),
    #[error("state snapshot: {0}")]
    Snapshot(String),
    #[error("ingest: {0}")]
    Ingest(String),
}

/// What an ingest produced: corpus statistics and the new index manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub stats: CorpusStats,
    pub manifest: IndexManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePrimary {
    Documents,
    Sql,
    Plugin,
    Chart,
    WebSearch,
    /// Declared for completeness; answered with a not-supported warning.
    Image,
}

/// Exactly one primary path plus flags such as `chart` or `documents`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub primary: RoutePrimary,
    pub flags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin: Option<String>,
}

impl Route {
    pub fn documents() -> Self {
        Self {
            primary: RoutePrimary::Documents,
            flags: BTreeSet::new(),
            plugin: None,
        }
    }

    /// Parses router labels like `sql+chart`, `plugin:weather` or
    /// `documents`. Anything unrecognised routes to documents.
    pub fn parse(label: &str) -> Self {
        let mut parts = label.trim().split('+').map(str::trim);
        let head = parts.next().unwrap_or("").to_ascii_lowercase();
        let flags = parts.filter(|p| !p.is_empty()).map(str::to_ascii_lowercase).collect();
        let (primary, plugin) = match head.as_str() {
            "sql" => (RoutePrimary::Sql, None),
            "chart" => (RoutePrimary::Chart, None),
            "web_search" | "web" => (RoutePrimary::WebSearch, None),
            "image" => (RoutePrimary::Image, None),
            h => match h.strip_prefix("plugin:") {
                Some(id) if !id.is_empty() => (RoutePrimary::Plugin, Some(id.to_string())),
                _ => (RoutePrimary::Documents, None),
            },
        };
        Self {
            primary,
            flags,
            plugin,
        }
    }

    pub fn label(&self) -> String {
        let mut s = match (&self.primary, &self.plugin) {
            (RoutePrimary::Plugin, Some(id)) => format!("plugin:{id}"),
            (p, _) => serde_json::to_value(p)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
        };
        for f in &self.flags {
            s.push('+');
            s.push_str(f);
        }
        s
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.contains(flag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub answer: String,
    pub route: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<ResultTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualElement {
    pub chart: ChartDecision,
    pub table: ResultTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: String,
    pub micros: u64,
}

/// Everything one query produced. Lists are only ever appended to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub session_id: String,
    pub query: String,
    pub mode: GroundingMode,
    #[serde(default)]
    pub datasource: Option<String>,
    pub dialogue_context: Vec<Turn>,
    pub retrieved_content: Vec<Snippet>,
    pub plugin_results: Vec<(String, Value)>,
    pub visual_elements: Vec<VisualElement>,
    pub citation_traces: Vec<CitationTrace>,
    pub route_taken: Vec<String>,
    pub timings: Vec<StepTiming>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
    pub grounded: Option<GroundedAnswer>,
    pub sql: Option<T2sResult>,
}

fn is_prefix<T: PartialEq>(earlier: &[T], later: &[T]) -> bool {
    later.len() >= earlier.len() && later[..earlier.len()] == *earlier
}

impl PipelineState {
    /// Whether `self` could have grown out of `earlier` by appends only.
    pub fn extends(&self, earlier: &PipelineState) -> bool {
        self.session_id == earlier.session_id
            && self.query == earlier.query
            && self.dialogue_context == earlier.dialogue_context
            && is_prefix(&earlier.retrieved_content, &self.retrieved_content)
            && is_prefix(&earlier.plugin_results, &self.plugin_results)
            && is_prefix(&earlier.visual_elements, &self.visual_elements)
            && is_prefix(&earlier.citation_traces, &self.citation_traces)
            && is_prefix(&earlier.route_taken, &self.route_taken)
            && is_prefix(&earlier.timings, &self.timings)
            && is_prefix(&earlier.warnings, &self.warnings)
            && is_prefix(&earlier.errors, &self.errors)
            && (earlier.grounded.is_none() || earlier.grounded == self.grounded)
            && (earlier.sql.is_none() || earlier.sql == self.sql)
    }

    /// Every cited chunk is among the retrieved snippets.
    pub fn traces_closed(&self) -> bool {
        let ids: BTreeSet<&str> = self.retrieved_content.iter().map(|s| s.chunk_id.as_str()).collect();
        self.citation_traces.iter().all(|c| ids.contains(c.chunk_id.as_str()))
    }

    fn time(&mut self, step: &str, started: Instant) {
        self.timings.push(StepTiming {
            step: step.to_string(),
            micros: started.elapsed().as_micros() as u64,
        });
    }
}

/// Turn history per session. Readers share a session; writers are exclusive.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<RwLock<Vec<Turn>>>>>,
}

impl SessionStore {
    fn session(&self, id: &str) -> Arc<RwLock<Vec<Turn>>> {
        if let Some(s) = self.sessions.read().unwrap().get(id) {
            return s.clone();
        }
        self.sessions
            .write()
            .unwrap()
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// The last `window` turns, oldest first.
    pub fn recent(&self, id: &str, window: usize) -> Vec<Turn> {
        let s = self.session(id);
        let turns = s.read().unwrap();
        turns[turns.len().saturating_sub(window)..].to_vec()
    }

    pub fn push(&self, id: &str, turn: Turn) {
        self.session(id).write().unwrap().push(turn);
    }

    pub fn len(&self, id: &str) -> usize {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .map_or(0, |s| s.read().unwrap().len())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap().len()
    }
}

/// Registration of a SQL data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSourceConfig {
    pub name: String,
    #[serde(default)]
    pub dialect: Dialect,
    /// A SQLite file path, or `fixture` for the embedded scenario database.
    pub connection: String,
    /// Lowercase `table.column` keys; absent means every column.
    #[serde(default)]
    pub authorized_columns: Option<Vec<String>>,
    /// `table.column` to unit name, e.g. `shipments.distance = "metres"`.
    #[serde(default)]
    pub unit_annotations: BTreeMap<String, String>,
    /// Words besides table names that route a question to this source.
    #[serde(default)]
    pub metrics: Vec<String>,
}

impl DataSourceConfig {
    pub fn fixture(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            dialect: Dialect::Generic,
            connection: "fixture".into(),
            authorized_columns: None,
            unit_annotations: BTreeMap::new(),
            metrics: Vec::new(),
        }
    }
}

pub struct DataSource {
    pub name: String,
    pub schema: SchemaContext,
    pub executor: Arc<dyn Executor>,
    pub metrics: Vec<String>,
}

impl std::fmt::Debug for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataSource")
            .field("name", &self.name)
            .field("tables", &self.schema.table_names())
            .finish_non_exhaustive()
    }
}

impl DataSource {
    pub fn open(cfg: &DataSourceConfig) -> Result<Self, OrchestratorError> {
        let err = |message: String| OrchestratorError::Datasource {
            name: cfg.name.clone(),
            message,
        };
        if cfg.name.trim().is_empty() {
            return Err(err("name must not be empty".into()));
        }
        let authorized: Option<BTreeSet<String>> = cfg
            .authorized_columns
            .as_ref()
            .map(|cols| cols.iter().map(|c| c.to_lowercase()).collect());
        let fixture_db = cfg.connection == "fixture";
        let exec = if fixture_db {
            fixture::fixture_executor()
        } else {
            let path = cfg.connection.strip_prefix("sqlite://").unwrap_or(&cfg.connection);
            SqliteExecutor::open_read_only(Path::new(path))
        }
        .map_err(|e| err(e.to_string()))?;
        let mut units = cfg.unit_annotations.clone();
        let mut metrics = cfg.metrics.clone();
        if fixture_db {
            for (k, v) in fixture::fixture_units() {
                units.entry(k).or_insert(v);
            }
            if metrics.is_empty() {
                metrics = fixture::FIXTURE_METRICS.iter().map(|s| s.to_string()).collect();
            }
        }
        let mut schema = exec
            .introspect(cfg.dialect, authorized.as_ref(), &units)
            .map_err(|e| err(e.to_string()))?;
        if fixture_db && authorized.is_none() {
            schema
                .authorized_columns
                .retain(|c| !fixture::WITHHELD.contains(&c.as_str()));
        }
        Ok(Self {
            name: cfg.name.clone(),
            schema,
            executor: Arc::new(exec),
            metrics,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// Top rerank score below which internal retrieval counts as insufficient.
    pub relevance_floor: f64,
    pub dialogue_window: usize,
    pub web_results: usize,
    /// Also run the path named by a secondary route flag (e.g. `sql+documents`).
    pub secondary_path: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            relevance_floor: 0.2,
            dialogue_window: 10,
            web_results: 5,
            secondary_path: false,
        }
    }
}

/// Settings the engine needs from the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineConfig {
    pub orchestrator: OrchestratorConfig,
    pub retrieval: RetrievalConfig,
    pub grounding: GroundingConfig,
    pub t2s: T2sConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub session_id: String,
    pub query: String,
    #[serde(default)]
    pub mode: GroundingMode,
    #[serde(default)]
    pub datasource: Option<String>,
}

impl QueryRequest {
    pub fn new(session_id: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            query: query.into(),
            mode: GroundingMode::Standard,
            datasource: None,
        }
    }

    pub fn strict(mut self) -> Self {
        self.mode = GroundingMode::Strict;
        self
    }

    /// Session ids are 1 to 64 characters of `[A-Za-z0-9_-]`; the query must
    /// not be blank.
    pub fn validate(&self) -> Result<(), String> {
        let id_ok = !self.session_id.is_empty()
            && self.session_id.len() <= 64
            && self
                .session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !id_ok {
            return Err(format!("malformed session_id {:?}", self.session_id));
        }
        if self.query.trim().is_empty() {
            return Err("query must not be empty".into());
        }
        Ok(())
    }
}

/// A persisted query: its state and the answer it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub route: Route,
    pub state: PipelineState,
    pub answer: Option<FinalAnswer>,
}

/// Outcome of replaying a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub answer: FinalAnswer,
    pub matches_recorded: Option<bool>,
}

pub fn replay(snapshot: &StateSnapshot) -> Replay {
    let answer = optimize_answer(&snapshot.state, &snapshot.route);
    let matches_recorded = snapshot.answer.as_ref().map(|a| *a == answer);
    Replay {
        answer,
        matches_recorded,
    }
}

pub fn load_snapshot(path: &Path) -> Result<StateSnapshot, OrchestratorError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OrchestratorError::Snapshot(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| OrchestratorError::Snapshot(format!("{}: {e}", path.display())))
}

fn web_chunk_id(url: &str, i: usize) -> String {
    let digest = Sha256::new()
        .chain_update(url.as_bytes())
        .chain_update([0x1f])
        .chain_update(i.to_le_bytes())
        .finalize();
    format!("web-{}", &hex::encode(digest)[..16])
}

fn step_failed(state: &mut PipelineState, emit: &mut Emitter, stage: &str, message: String) -> OrchestratorError {
    state.errors.push(format!("{stage}: {message}"));
    emit.emit(EventKind::Error, json!({ "stage": stage, "message": message }));
    OrchestratorError::Step(message)
}

fn warn(state: &mut PipelineState, emit: &mut Emitter, message: String) {
    emit.emit(EventKind::Warning, json!({ "message": message }));
    state.warnings.push(message);
}

/// Shared resources for answering queries.
pub struct Engine {
    pub providers: Providers,
    /// Generator used for SQL; defaults to the drafting generator.
    pub sql_generator: Arc<dyn Generator>,
    pub clock: Arc<dyn Clock>,
    pub config: EngineConfig,
    pub sessions: SessionStore,
    pub plugins: BTreeMap<String, Arc<dyn Plugin>>,
    pub state_dir: Option<PathBuf>,
    index: RwLock<Option<Arc<IndexHandle>>>,
    datasources: RwLock<BTreeMap<String, Arc<DataSource>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("datasources", &self.datasource_names())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(providers: Providers, config: EngineConfig) -> Self {
        Self {
            sql_generator: providers.generator.clone(),
            providers,
            clock: Arc::new(SystemClock),
            config,
            sessions: SessionStore::default(),
            plugins: BTreeMap::new(),
            state_dir: None,
            index: RwLock::new(None),
            datasources: RwLock::new(BTreeMap::new()),
        }
    }

    /// Mock providers with the schema-driven SQL mock.
    pub fn mock(config: EngineConfig) -> Self {
        let mut e = Self::new(Providers::mock(), config);
        e.sql_generator = Arc::new(t2s::mock::SchemaSqlLlm::new());
        e
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_plugin(mut self, plugin: Arc<dyn Plugin>) -> Self {
        self.plugins.insert(plugin.id().to_string(), plugin);
        self
    }

    pub fn set_index(&self, index: Arc<IndexHandle>) {
        *self.index.write().unwrap() = Some(index);
    }

    pub fn index(&self) -> Option<Arc<IndexHandle>> {
        self.index.read().unwrap().clone()
    }

    /// Chunks `docs`, builds both indexes and swaps them in. Queries already
    /// running keep the index they started with. With `save_dir` the index
    /// is also written there.
    pub fn ingest(
        &self,
        docs: &[Document],
        policy: &ChunkPolicy,
        save_dir: Option<&Path>,
    ) -> Result<IngestSummary, OrchestratorError> {
        let fail = |e: &dyn std::fmt::Display| OrchestratorError::Ingest(e.to_string());
        let mut seen = BTreeSet::new();
        if let Some(d) = docs.iter().find(|d| !seen.insert(d.doc_id.as_str())) {
            return Err(fail(&format!("duplicate doc_id {:?}", d.doc_id)));
        }
        if let Some(i) = docs.iter().position(|d| d.doc_id.is_empty()) {
            return Err(fail(&format!("document {i} has an empty doc_id")));
        }
        let store = ChunkStore::from_documents(docs, policy).map_err(|e| fail(&e))?;
        let stats = corpus_stats(docs, &store, policy);
        let ix = build_indexes_with_policy(&store, Some(*policy), self.providers.embedder.clone(), &self.config.retrieval)
            .map_err(|e| fail(&e))?;
        if let Some(dir) = save_dir {
            ix.save(dir).map_err(|e| fail(&e))?;
        }
        let manifest = ix.manifest();
        self.set_index(Arc::new(ix));
        Ok(IngestSummary { stats, manifest })
    }

    pub fn register_datasource(&self, ds: DataSource) -> Result<(), OrchestratorError> {
        let mut map = self.datasources.write().unwrap();
        if map.contains_key(&ds.name) {
            return Err(OrchestratorError::DuplicateDatasource(ds.name));
        }
        map.insert(ds.name.clone(), Arc::new(ds));
        Ok(())
    }

    pub fn datasource(&self, name: &str) -> Option<Arc<DataSource>> {
        self.datasources.read().unwrap().get(name).cloned()
    }

    pub fn datasource_names(&self) -> Vec<String> {
        self.datasources.read().unwrap().keys().cloned().collect()
    }

    pub fn init_state(&self, req: &QueryRequest) -> PipelineState {
        PipelineState {
            session_id: req.session_id.clone(),
            query: req.query.clone(),
            mode: req.mode,
            datasource: req.datasource.clone(),
            dialogue_context: self
                .sessions
                .recent(&req.session_id, self.config.orchestrator.dialogue_window),
            retrieved_content: Vec::new(),
            plugin_results: Vec::new(),
            visual_elements: Vec::new(),
            citation_traces: Vec::new(),
            route_taken: Vec::new(),
            timings: Vec::new(),
            warnings: Vec::new(),
            errors: Vec::new(),
            grounded: None,
            sql: None,
        }
    }

    fn route_context(&self, state: &PipelineState) -> RouteContext {
        let sources = self.datasources.read().unwrap();
        let selected: Vec<&Arc<DataSource>> = match &state.datasource {
            Some(n) => sources.get(n).into_iter().collect(),
            None => sources.values().collect(),
        };
        RouteContext {
            tables: selected.iter().flat_map(|d| d.schema.table_names()).collect(),
            metrics: selected.iter().flat_map(|d| d.metrics.clone()).collect(),
            plugins: self.plugins.keys().cloned().collect(),
            previous_table: state.dialogue_context.iter().any(|t| t.table.is_some()),
            recent_turns: state.dialogue_context.iter().map(|t| t.query.clone()).collect(),
        }
    }

    /// Asks the router; a router failure routes to documents.
    pub fn route(&self, state: &PipelineState) -> Route {
        match self.providers.router.route(&state.query, &self.route_context(state)) {
            Ok(label) => Route::parse(&label),
            Err(e) => {
                log::warn!("router failed ({e}); routing to documents");
                Route::documents()
            }
        }
    }

    fn pick_datasource(&self, state: &PipelineState) -> Option<Arc<DataSource>> {
        if let Some(n) = &state.datasource {
            return self.datasource(n);
        }
        let sources = self.datasources.read().unwrap();
        let terms = crate::text::index_terms(&state.query);
        let hits = |d: &DataSource| {
            d.schema
                .table_names()
                .iter()
                .chain(&d.metrics)
                .filter(|n| terms.iter().any(|t| t.trim_end_matches('s') == n.to_lowercase().trim_end_matches('s')))
                .count()
        };
        let mut best: Option<(&Arc<DataSource>, usize)> = None;
        for d in sources.values() {
            let h = hits(d);
            if best.is_none_or(|(_, b)| h > b) {
                best = Some((d, h));
            }
        }
        best.map(|(d, _)| d.clone())
    }

    fn web_snippets(&self, state: &mut PipelineState, emit: &mut Emitter, offset: usize) -> Vec<Snippet> {
        let started = Instant::now();
        state.route_taken.push("web_search".into());
        let results = self
            .providers
            .web_search
            .search(&state.query, self.config.orchestrator.web_results);
        state.time("web_search", started);
        match results {
            Ok(rs) => rs
                .into_iter()
                .enumerate()
                .map(|(i, r)| Snippet {
                    chunk_id: web_chunk_id(&r.url, i),
                    doc_id: r.url.clone(),
                    seq: i,
                    start_char: 0,
                    end_char: r.snippet.chars().count(),
                    text: r.snippet,
                    title: r.title,
                    source_uri: r.url,
                    rank: offset + i + 1,
                    fused_score: 0.0,
                    rerank_score: None,
                    origin: SnippetOrigin::External,
                })
                .collect(),
            Err(e) => {
                warn(state, emit, format!("web search failed: {e}"));
                Vec::new()
            }
        }
    }

    fn ground(
        &self,
        state: &mut PipelineState,
        emit: &mut Emitter,
        snippets: Vec<Snippet>,
    ) -> Result<(), OrchestratorError> {
        state.retrieved_content.extend(snippets.iter().cloned());
        let started = Instant::now();
        state.route_taken.push("generate".into());
        let config = GroundingConfig {
            mode: state.mode,
            ..self.config.grounding
        };
        let answer = grounding::grounded_generate(
            &state.query,
            &snippets,
            &config,
            &*self.providers.generator,
            &*self.providers.verifier,
        )
        .map_err(|e| step_failed(state, emit, "generate", e.to_string()))?;
        state.time("generate", started);
        state.citation_traces.extend(answer.citations.iter().cloned());
        state.grounded = Some(answer);
        Ok(())
    }

    /// Hybrid retrieval, rerank, web fallback when the best rerank score is
    /// below the relevance floor or nothing was found, then grounding.
    pub fn documents_path(&self, state: &mut PipelineState, emit: &mut Emitter) -> Result<(), OrchestratorError> {
        let cfg = &self.config;
        let mut snippets = Vec::new();
        if let Some(ix) = self.index().filter(|ix| !ix.is_empty()) {
            let started = Instant::now();
            state.route_taken.push("retrieve".into());
            let cands = ix.hybrid_retrieve(&state.query, cfg.retrieval.n_candidates);
            state.time("retrieve", started);
            let started = Instant::now();
            state.route_taken.push("rerank".into());
            let sel = ix.rerank_and_select(&state.query, &cands, &*self.providers.reranker, cfg.retrieval.top_n);
            state.time("rerank", started);
            if let Some(d) = sel.degraded {
                warn(state, emit, format!("rerank degraded to fused order: {d}"));
            }
            snippets = sel.snippets;
        }
        let floor = cfg.orchestrator.relevance_floor;
        let insufficient = snippets.is_empty()
            || snippets[0].rerank_score.is_some_and(|s| s < floor);
        if insufficient {
            let offset = snippets.len();
            let web = self.web_snippets(state, emit, offset);
            snippets.extend(web);
        }
        self.ground(state, emit, snippets)
    }

    pub fn web_path(&self, state: &mut PipelineState, emit: &mut Emitter) -> Result<(), OrchestratorError> {
        let snippets = self.web_snippets(state, emit, 0);
        self.ground(state, emit, snippets)
    }

    pub fn sql_path(&self, state: &mut PipelineState, route: &Route, emit: &mut Emitter) -> Result<(), OrchestratorError> {
        let Some(ds) = self.pick_datasource(state) else {
            warn(state, emit, "no data source is registered; answering from documents".into());
            return self.documents_path(state, emit);
        };
        let started = Instant::now();
        state.route_taken.push("sql".into());
        let history: Vec<String> = state.dialogue_context.iter().map(|t| t.query.clone()).collect();
        let ctx = T2sContext {
            schema: &ds.schema,
            generator: &*self.sql_generator,
            executor: &*ds.executor,
            clock: &*self.clock,
        };
        let result = t2s::run_with_retry(&state.query, &history, &ctx, &self.config.t2s);
        state.time("sql", started);
        for a in &result.attempts {
            emit.emit(
                EventKind::SqlTrace,
                json!({
                    "datasource": ds.name,
                    "round": a.round,
                    "step": a.step,
                    "sql": a.sql_text,
                    "validation": a.validation,
                    "error": a.error_message,
                    "row_count": a.rows.as_ref().map(|r| r.rows.len()),
                }),
            );
        }
        for w in &result.warnings {
            warn(state, emit, w.clone());
        }
        if let Some(t) = &result.table {
            emit.emit(EventKind::Table, json!({ "columns": t.columns, "rows": t.rows, "final": result.final_state }));
        }
        if let Some(t) = result.table.as_ref().filter(|_| result.chart.kind != ChartKind::None) {
            state.route_taken.push("chart".into());
            emit.emit(EventKind::Chart, chart_payload(&result.chart, t));
            state.visual_elements.push(VisualElement {
                chart: result.chart.clone(),
                table: t.clone(),
            });
        } else if route.has_flag("chart") {
            warn(state, emit, format!("no chart drawn: {}", result.chart.reason));
        }
        state.sql = Some(result);
        Ok(())
    }

    fn chart_path(&self, state: &mut PipelineState, emit: &mut Emitter) -> Result<(), OrchestratorError> {
        let Some(table) = state.dialogue_context.iter().rev().find_map(|t| t.table.clone()) else {
            warn(state, emit, "there is no previous table to chart".into());
            return Ok(());
        };
        state.route_taken.push("chart".into());
        let hint = chart::hint_from_question(&state.query);
        let mut decision = t2s::decide_chart(&table, hint, &state.query);
        if decision.kind == ChartKind::None && hint != Some(ChartKind::None) {
            decision = t2s::decide_chart(&table, Some(ChartKind::Bar), &state.query);
        }
        if decision.kind == ChartKind::None {
            warn(state, emit, format!("no chart drawn: {}", decision.reason));
        } else {
            emit.emit(EventKind::Chart, chart_payload(&decision, &table));
        }
        state.visual_elements.push(VisualElement { chart: decision, table });
        Ok(())
    }

    fn plugin_path(&self, state: &mut PipelineState, route: &Route, emit: &mut Emitter) -> Result<(), OrchestratorError> {
        let id = route.plugin.clone().unwrap_or_default();
        let Some(plugin) = self.plugins.get(&id).cloned() else {
            return Err(step_failed(state, emit, "plugin", format!("plugin {id:?} is not registered")));
        };
        let started = Instant::now();
        state.route_taken.push(format!("plugin:{id}"));
        let payload = plugin
            .invoke(&state.query, &state.session_id)
            .map_err(|e| step_failed(state, emit, "plugin", e.to_string()))?;
        state.time("plugin", started);
        state.plugin_results.push((id, payload));
        Ok(())
    }

    /// Runs the route's path(s) and emits the answer. Returns the assembled
    /// answer, or the error that ended the stream; either way the state keeps
    /// everything produced so far.
    pub fn execute(
        &self,
        state: &mut PipelineState,
        route: &Route,
        emit: &mut Emitter,
    ) -> Result<FinalAnswer, OrchestratorError> {
        state.route_taken.push(format!("route:{}", route.label()));
        emit.emit(
            EventKind::Route,
            json!({
                "session_id": state.session_id,
                "primary": route.primary,
                "flags": route.flags,
                "plugin": route.plugin,
                "label": route.label(),
            }),
        );
        if let Some(name) = &state.datasource {
            if self.datasource(name).is_none() {
                let name = name.clone();
                return Err(step_failed(state, emit, "datasource", format!("unknown data source {name:?}")));
            }
        }
        match route.primary {
            RoutePrimary::Documents => self.documents_path(state, emit)?,
            RoutePrimary::WebSearch => self.web_path(state, emit)?,
            RoutePrimary::Sql => {
                self.sql_path(state, route, emit)?;
                if self.config.orchestrator.secondary_path && route.has_flag("documents") {
                    self.documents_path(state, emit)?;
                }
            }
            RoutePrimary::Chart => self.chart_path(state, emit)?,
            RoutePrimary::Plugin => self.plugin_path(state, route, emit)?,
            RoutePrimary::Image => warn(state, emit, "image analysis is not supported".into()),
        }
        if self.config.orchestrator.secondary_path
            && route.primary == RoutePrimary::Documents
            && route.has_flag("sql")
        {
            self.sql_path(state, route, emit)?;
        }
        let answer = optimize_answer(state, route);
        state.route_taken.push("answer".into());
        emit_answer(&answer, emit);
        Ok(answer)
    }

    /// Full query lifecycle: state, route, execute, session turn, snapshot.
    pub fn answer(&self, req: &QueryRequest, emit: &mut Emitter) -> (PipelineState, Result<FinalAnswer, OrchestratorError>) {
        let mut state = self.init_state(req);
        let started = Instant::now();
        let route = self.route(&state);
        state.time("route", started);
        let result = self.execute(&mut state, &route, emit);
        if let Ok(a) = &result {
            self.sessions.push(
                &req.session_id,
                Turn {
                    query: req.query.clone(),
                    answer: a.text.clone(),
                    route: route.label(),
                    table: a.table.clone().filter(|t| !t.rows.is_empty()),
                },
            );
        }
        if let Some(dir) = &self.state_dir {
            let snap = StateSnapshot {
                route,
                state: state.clone(),
                answer: result.as_ref().ok().cloned(),
            };
            if let Err(e) = self.persist(dir, &snap) {
                log::warn!("could not persist state: {e}");
            }
        }
        (state, result)
    }

    fn persist(&self, dir: &Path, snap: &StateSnapshot) -> std::io::Result<PathBuf> {
        let session_dir = dir.join(&snap.state.session_id);
        std::fs::create_dir_all(&session_dir)?;
        let n = self.sessions.len(&snap.state.session_id);
        let path = session_dir.join(format!("{n:04}.json"));
        let body = serde_json::to_string_pretty(snap).map_err(std::io::Error::other)?;
        std::fs::write(&path, body)?;
        Ok(path)
    }
}

fn chart_payload(decision: &ChartDecision, table: &ResultTable) -> Value {
    json!({
        "kind": decision.kind,
        "x_column": decision.x_column,
        "y_column": decision.y_column,
        "reason": decision.reason,
        "columns": table.columns,
        "rows": table.rows,
    })
}

/// Byte offsets splitting `text` into sentence-sized increments whose
/// concatenation is `text`.
pub fn token_increments(text: &str) -> Vec<&str> {
    let spans = grounding::segment_sentences(text);
    let mut cuts: Vec<usize> = spans
        .iter()
        .map(|s| crate::text::char_to_byte(text, s.end_char))
        .filter(|&b| b > 0 && b < text.len())
        .collect();
    cuts.dedup();
    let mut out = Vec::new();
    let mut prev = 0;
    for c in cuts {
        if c > prev {
            out.push(&text[prev..c]);
            prev = c;
        }
    }
    if prev < text.len() {
        out.push(&text[prev..]);
    }
    out
}

/// Token increments, one citation event per reference, then `done`.
pub fn emit_answer(answer: &FinalAnswer, emit: &mut Emitter) {
    for piece in token_increments(&answer.text) {
        emit.emit(EventKind::Token, json!({ "text": piece }));
    }
    for r in &answer.references {
        emit.emit(EventKind::Citation, serde_json::to_value(r).unwrap_or(Value::Null));
    }
    emit.emit(EventKind::Done, answer.to_json());
}
