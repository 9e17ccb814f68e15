use std::sync::{Arc, Mutex};

use hybridqa::events::{check_grammar, EventKind, SseEvent};
use hybridqa::grounding::ABSTENTION;
use hybridqa::ingest::{ChunkPolicy, ChunkStore, Document};
use hybridqa::orchestrator::{
    load_snapshot, optimize_answer, replay, DataSource, DataSourceConfig, EchoPlugin, Engine,
    EngineConfig, PipelineState, QueryRequest, Route, RoutePrimary, NO_ANSWER,
};
use hybridqa::events::Emitter;
use hybridqa::providers::mock::{HashEmbedder, MockWebSearch, ScriptedLlm, Unavailable};
use hybridqa::providers::{Embedder, ProviderError, WebResult, WebSearch};
use hybridqa::retrieval::{build_indexes, RetrievalConfig, SnippetOrigin};
use hybridqa::t2s::{fixture, ChartKind, FixedClock};

const POLICY: &str = "The privacy policy keeps personal records for seven years. \
Records are deleted after the retention period ends. \
Shipping labels are printed at the central warehouse.";

fn small_config() -> EngineConfig {
    EngineConfig {
        retrieval: RetrievalConfig {
            n_candidates: 20,
            top_n: 5,
            leg_depth: 20,
            ..RetrievalConfig::default()
        },
        ..EngineConfig::default()
    }
}

fn engine_with(docs: &[Document], config: EngineConfig) -> Engine {
    let engine = Engine::mock(config).with_clock(Arc::new(FixedClock(fixture::fixture_now())));
    if !docs.is_empty() {
        let store = ChunkStore::from_documents(docs, &ChunkPolicy::new(32, 4).unwrap()).unwrap();
        let ix = build_indexes(&store, engine.providers.embedder.clone(), &engine.config.retrieval).unwrap();
        engine.set_index(Arc::new(ix));
    }
    engine
        .register_datasource(DataSource::open(&DataSourceConfig::fixture("shop")).unwrap())
        .unwrap();
    engine
}

fn policy_docs() -> Vec<Document> {
    vec![
        Document::new("privacy", POLICY).with_source("file:///docs/privacy.txt"),
        Document::new("travel", "Employees book travel through the portal two weeks ahead."),
    ]
}

fn run(engine: &Engine, req: &QueryRequest) -> (PipelineState, Vec<SseEvent>) {
    let events = Arc::new(Mutex::new(Vec::new()));
    let sink = events.clone();
    let mut emit = Emitter::new(move |e| sink.lock().unwrap().push(e));
    let (state, _) = engine.answer(req, &mut emit);
    let evs = events.lock().unwrap().clone();
    (state, evs)
}

fn kinds(events: &[SseEvent]) -> Vec<EventKind> {
    events.iter().map(|e| e.event).collect()
}

#[test]
fn router_examples() {
    let engine = engine_with(&[], small_config());
    let route = |q: &str| engine.route(&engine.init_state(&QueryRequest::new("r", q)));
    assert_eq!(route("how many orders shipped last month").primary, RoutePrimary::Sql);
    assert_eq!(
        route("what does the privacy policy say about retention").primary,
        RoutePrimary::Documents
    );
    let plot = route("plot revenue by month");
    assert_eq!(plot.primary, RoutePrimary::Sql);
    assert!(plot.has_flag("chart"));
}

#[test]
fn router_failure_routes_to_documents() {
    let mut engine = engine_with(&[], small_config());
    engine.providers.router = Arc::new(Unavailable);
    let r = engine.route(&engine.init_state(&QueryRequest::new("r", "how many orders")));
    assert_eq!(r, Route::documents());
}

#[test]
fn verbatim_answer_needs_no_web_search() {
    let spy = Arc::new(MockWebSearch::default());
    let mut engine = engine_with(&policy_docs(), small_config());
    engine.providers.web_search = spy.clone();
    let (state, events) = run(
        &engine,
        &QueryRequest::new("s", "how long does the privacy policy keep personal records"),
    );
    assert_eq!(spy.calls(), 0);
    check_grammar(&events).unwrap();
    assert_eq!(events.last().unwrap().event, EventKind::Done);
    assert!(state.retrieved_content.iter().all(|s| s.origin == SnippetOrigin::Internal));
    assert!(state.traces_closed());
    assert!(!state.citation_traces.is_empty());
}

#[test]
fn empty_corpus_calls_web_search_once() {
    let spy = Arc::new(MockWebSearch::default());
    let mut engine = engine_with(&[], small_config());
    engine.providers.web_search = spy.clone();
    let (state, events) = run(&engine, &QueryRequest::new("s", "who won the chess olympiad"));
    assert_eq!(spy.calls(), 1);
    check_grammar(&events).unwrap();
    assert!(!state.retrieved_content.is_empty());
    assert!(state.retrieved_content.iter().all(|s| s.origin == SnippetOrigin::External));
    assert!(state.traces_closed());
}

#[test]
fn weak_retrieval_falls_back_to_web() {
    let spy = Arc::new(MockWebSearch::default());
    let mut engine = engine_with(&policy_docs(), small_config());
    engine.providers.web_search = spy.clone();
    let (state, _) = run(&engine, &QueryRequest::new("s", "quantum chromodynamics gluon"));
    assert_eq!(spy.calls(), 1);
    let first_external = state
        .retrieved_content
        .iter()
        .position(|s| s.origin == SnippetOrigin::External)
        .unwrap();
    assert!(state.retrieved_content[..first_external]
        .iter()
        .all(|s| s.origin == SnippetOrigin::Internal));
}

/// Shared log of provider calls, for ordering assertions.
#[derive(Default)]
struct CallLog(Mutex<Vec<&'static str>>);

struct LoggingEmbedder(Arc<CallLog>, HashEmbedder);

impl Embedder for LoggingEmbedder {
    fn dimension(&self) -> usize {
        self.1.dimension()
    }
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.0 .0.lock().unwrap().push("embed");
        self.1.embed(texts)
    }
}

struct LoggingWeb(Arc<CallLog>);

impl WebSearch for LoggingWeb {
    fn search(&self, _q: &str, _k: usize) -> Result<Vec<WebResult>, ProviderError> {
        self.0 .0.lock().unwrap().push("web");
        Ok(vec![WebResult {
            title: "t".into(),
            url: "https://example.org/x".into(),
            snippet: "Gluons bind quarks.".into(),
        }])
    }
}

#[test]
fn web_search_runs_after_internal_retrieval() {
    let log = Arc::new(CallLog::default());
    let embedder = Arc::new(LoggingEmbedder(log.clone(), HashEmbedder::new(64)));
    let mut engine = Engine::mock(small_config());
    engine.providers.embedder = embedder.clone();
    engine.providers.web_search = Arc::new(LoggingWeb(log.clone()));
    let store = ChunkStore::from_documents(&policy_docs(), &ChunkPolicy::new(32, 4).unwrap()).unwrap();
    engine.set_index(Arc::new(build_indexes(&store, embedder, &engine.config.retrieval).unwrap()));
    log.0.lock().unwrap().clear();
    run(&engine, &QueryRequest::new("s", "gluons quarks binding"));
    assert_eq!(*log.0.lock().unwrap(), ["embed", "web"]);
}

#[test]
fn sql_chart_event_precedes_done() {
    let engine = engine_with(&[], small_config());
    let (state, events) = run(&engine, &QueryRequest::new("s", "plot revenue by month"));
    check_grammar(&events).unwrap();
    let k = kinds(&events);
    let chart = k.iter().position(|e| *e == EventKind::Chart).expect("chart event");
    let done = k.iter().position(|e| *e == EventKind::Done).unwrap();
    assert!(chart < done);
    assert!(k.contains(&EventKind::SqlTrace) && k.contains(&EventKind::Table));
    assert_eq!(state.visual_elements[0].chart.kind, ChartKind::Line);
    let answer = &events[done].data;
    assert_eq!(answer["references"].as_array().unwrap().len(), 0);
    assert!(answer["narrative"].as_str().is_some());
}

#[test]
fn documents_only_answer_has_references_and_no_table() {
    let engine = engine_with(&policy_docs(), small_config());
    let (state, _) = run(&engine, &QueryRequest::new("s", "how long are personal records kept under the privacy policy"));
    let a = optimize_answer(&state, &Route::documents());
    assert!(a.table.is_none());
    assert!(!a.references.is_empty());
    for (i, r) in a.references.iter().enumerate() {
        assert_eq!(r.n, i + 1);
    }
    assert!(a.render().contains("References:\n[1] file:///docs/privacy.txt"));
}

#[test]
fn mixed_route_with_secondary_path_merges_both() {
    let mut config = small_config();
    config.orchestrator.secondary_path = true;
    let engine = engine_with(&policy_docs(), config);
    let (state, events) = run(
        &engine,
        &QueryRequest::new("s", "how many orders exist and what does the privacy policy say about personal records"),
    );
    check_grammar(&events).unwrap();
    assert!(state.sql.is_some());
    assert!(state.grounded.is_some());
    let done = &events.last().unwrap().data;
    assert!(done["table"].is_object());
    let refs = done["references"].as_array().unwrap();
    assert!(!refs.is_empty());
    let ns: Vec<u64> = refs.iter().map(|r| r["n"].as_u64().unwrap()).collect();
    assert_eq!(ns, (1..=refs.len() as u64).collect::<Vec<_>>());
    let text = done["text"].as_str().unwrap();
    for n in hybridqa::grounding::citation_markers(text) {
        assert!(n >= 1 && n <= refs.len());
    }
}

#[test]
fn paths_only_append_to_state() {
    let mut config = small_config();
    config.orchestrator.secondary_path = true;
    let engine = engine_with(&policy_docs(), config);
    let req = QueryRequest::new("s", "count orders and cite the privacy policy on personal records");
    let mut state = engine.init_state(&req);
    let route = engine.route(&state);
    let mut emit = Emitter::discard();
    let s0 = state.clone();
    engine.sql_path(&mut state, &route, &mut emit).unwrap();
    assert!(state.extends(&s0));
    let s1 = state.clone();
    engine.documents_path(&mut state, &mut emit).unwrap();
    assert!(state.extends(&s1) && state.extends(&s0));
    assert!(state.traces_closed());
    assert!(!s0.extends(&state));
}

#[test]
fn dialogue_window_and_session_isolation() {
    let engine = Arc::new(engine_with(&policy_docs(), small_config()));
    assert!(engine.init_state(&QueryRequest::new("new", "q")).dialogue_context.is_empty());
    for i in 0..15 {
        run(&engine, &QueryRequest::new("w", format!("travel portal question {i}")));
    }
    let ctx = engine.init_state(&QueryRequest::new("w", "next")).dialogue_context;
    assert_eq!(ctx.len(), 10);
    assert_eq!(ctx[0].query, "travel portal question 5");

    let handles: Vec<_> = (0..4)
        .map(|i| {
            let e = engine.clone();
            std::thread::spawn(move || {
                let q = format!("privacy records question {i}");
                let (state, events) = run(&e, &QueryRequest::new("shared", q.clone()));
                assert_eq!(state.query, q);
                check_grammar(&events).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(engine.sessions.len("shared"), 4);
}

#[test]
fn chart_route_reuses_previous_table() {
    let engine = engine_with(&[], small_config());
    run(&engine, &QueryRequest::new("c", "how many orders per status"));
    let (state, events) = run(&engine, &QueryRequest::new("c", "now plot that as a pie chart"));
    assert_eq!(events[0].data["primary"], "chart");
    assert_eq!(state.visual_elements.len(), 1);
    assert_eq!(state.visual_elements[0].chart.kind, ChartKind::Pie);
    check_grammar(&events).unwrap();
}

#[test]
fn plugin_and_image_routes() {
    let echo = EchoPlugin::new("weather");
    let engine = engine_with(&[], small_config()).with_plugin(echo.clone());
    let (state, events) = run(&engine, &QueryRequest::new("p", "ask weather about Oslo tomorrow"));
    assert_eq!(echo.calls(), 1);
    assert_eq!(state.plugin_results[0].0, "weather");
    assert!(events.last().unwrap().data["text"].as_str().unwrap().contains("Oslo"));

    let (_, events) = run(&engine, &QueryRequest::new("p", "describe this image"));
    assert_eq!(kinds(&events), [EventKind::Route, EventKind::Warning, EventKind::Token, EventKind::Done]);
    assert_eq!(events.last().unwrap().data["text"], NO_ANSWER);
}

#[test]
fn unknown_datasource_is_an_error_event_with_partial_state() {
    let engine = engine_with(&[], small_config());
    let mut req = QueryRequest::new("e", "how many orders");
    req.datasource = Some("nope".into());
    let (state, events) = run(&engine, &req);
    assert_eq!(kinds(&events), [EventKind::Route, EventKind::Error]);
    check_grammar(&events).unwrap();
    assert_eq!(state.errors.len(), 1);
    assert!(state.route_taken[0].starts_with("route:"));
}

#[test]
fn generator_failure_ends_with_error() {
    let mut engine = engine_with(&policy_docs(), small_config());
    engine.providers.generator = Arc::new(Unavailable);
    let (state, events) = run(&engine, &QueryRequest::new("g", "privacy policy retention"));
    assert_eq!(events.last().unwrap().event, EventKind::Error);
    check_grammar(&events).unwrap();
    assert!(!state.retrieved_content.is_empty());
}

#[test]
fn persisted_state_replays_to_identical_answer() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = engine_with(&policy_docs(), small_config());
    engine.providers.generator = Arc::new(
        ScriptedLlm::constant("The privacy policy keeps personal records for seven years [1].").repeat_last(),
    );
    engine.state_dir = Some(dir.path().to_path_buf());
    let (_, events) = run(&engine, &QueryRequest::new("rp", "privacy policy personal records").strict());
    let path = dir.path().join("rp").join("0001.json");
    let snap = load_snapshot(&path).unwrap();
    let r = replay(&snap);
    assert_eq!(r.matches_recorded, Some(true));
    assert_eq!(r.answer.to_json(), events.last().unwrap().data);
}

#[test]
fn strict_abstentions_are_verbatim() {
    let mut engine = engine_with(&policy_docs(), small_config());
    engine.providers.generator = Arc::new(
        ScriptedLlm::constant("Zebras negotiated the merger during 1850 [1].").repeat_last(),
    );
    let (_, events) = run(&engine, &QueryRequest::new("st", "privacy policy personal records").strict());
    let done = &events.last().unwrap().data;
    assert_eq!(done["text"], ABSTENTION);
    assert!(done["references"].as_array().unwrap().is_empty());
}

#[test]
fn nothing_to_assemble_is_explicit() {
    let engine = engine_with(&[], small_config());
    let state = engine.init_state(&QueryRequest::new("n", "q"));
    let a = optimize_answer(&state, &Route::documents());
    assert!(a.no_answer);
    assert_eq!(a.text, NO_ANSWER);
}

