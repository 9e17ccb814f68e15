//! The `/v1` HTTP API.
//!
//! `POST /v1/query` answers with a `text/event-stream` body. Each query runs
//! on its own blocking worker that feeds a channel; the response stream
//! forwards events in emission order and interleaves heartbeat comments.
//! When the server shuts down, unfinished streams end with an `error` event.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, watch};

use hybridqa::config::AppConfig;
use hybridqa::events::{Emitter, EventKind, SseEvent, HEARTBEAT};
use hybridqa::ingest::{read_corpus, ChunkPolicy, Document};
use hybridqa::orchestrator::{DataSource, DataSourceConfig, Engine, OrchestratorError, QueryRequest};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub config: Arc<AppConfig>,
    pub heartbeat: Duration,
    shutdown: watch::Receiver<bool>,
}

/// Signals open streams that the server is going down.
#[derive(Debug)]
pub struct ShutdownHandle(watch::Sender<bool>);

impl ShutdownHandle {
    pub fn trigger(&self) {
        let _ = self.0.send(true);
    }
}

impl AppState {
    pub fn new(engine: Arc<Engine>, config: AppConfig) -> (Self, ShutdownHandle) {
        let (tx, rx) = watch::channel(false);
        let heartbeat = Duration::from_secs(config.service.heartbeat_secs);
        (
            Self {
                engine,
                config: Arc::new(config),
                heartbeat,
                shutdown: rx,
            },
            ShutdownHandle(tx),
        )
    }

    pub fn with_heartbeat(mut self, every: Duration) -> Self {
        self.heartbeat = every;
        self
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/ingest", post(ingest))
        .route("/v1/datasources", post(register_datasource))
        .route("/v1/health", get(health))
        .with_state(state)
}

fn json_error(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": kind, "message": message.into() }))).into_response()
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| json_error(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

enum StreamItem {
    Event(SseEvent),
    Heartbeat,
}

struct StreamState {
    rx: mpsc::UnboundedReceiver<SseEvent>,
    shutdown: watch::Receiver<bool>,
    heartbeat: tokio::time::Interval,
    next_seq: u64,
    finished: bool,
}

impl StreamState {
    async fn next(&mut self) -> Option<StreamItem> {
        if self.finished {
            return None;
        }
        let seq = self.next_seq;
        let closing = tokio::select! {
            biased;
            ev = self.rx.recv() => match ev {
                Some(ev) => {
                    self.next_seq = ev.seq + 1;
                    self.finished = ev.event.is_terminal();
                    return Some(StreamItem::Event(ev));
                }
                // The worker ended without a terminal event; close the grammar.
                None => "worker ended unexpectedly",
            },
            _ = shutdown_signal(&mut self.shutdown) => "server shutting down",
            _ = self.heartbeat.tick() => return Some(StreamItem::Heartbeat),
        };
        self.finished = true;
        Some(StreamItem::Event(SseEvent {
            event: EventKind::Error,
            data: json!({ "stage": "service", "message": closing }),
            seq,
        }))
    }
}

/// Resolves once shutdown is triggered; never, if the handle was dropped.
async fn shutdown_signal(rx: &mut watch::Receiver<bool>) {
    if rx.wait_for(|down| *down).await.is_err() {
        std::future::pending::<()>().await;
    }
}

async fn query(State(st): State<AppState>, body: Bytes) -> Response {
    let req: QueryRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if let Err(e) = req.validate() {
        return json_error(StatusCode::BAD_REQUEST, "bad_request", e);
    }
    let (tx, rx) = mpsc::unbounded_channel();
    let engine = st.engine.clone();
    tokio::task::spawn_blocking(move || {
        let mut emit = Emitter::new(move |e| {
            let _ = tx.send(e);
        });
        let (_, result) = engine.answer(&req, &mut emit);
        if let Err(e) = result {
            log::info!("query {:?} ended with an error: {e}", req.session_id);
        }
    });
    let mut heartbeat = tokio::time::interval(st.heartbeat);
    heartbeat.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    heartbeat.reset();
    let state = StreamState {
        rx,
        shutdown: st.shutdown.clone(),
        heartbeat,
        next_seq: 0,
        finished: false,
    };
    let stream = futures::stream::unfold(state, |mut s| async move {
        let item = s.next().await?;
        let frame = match item {
            StreamItem::Event(e) => e.to_wire(),
            StreamItem::Heartbeat => HEARTBEAT.to_string(),
        };
        Some((Ok::<_, Infallible>(Bytes::from(frame)), s))
    });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream; charset=utf-8")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream))
        .expect("static response parts")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRequest {
    #[serde(default)]
    corpus_path: Option<PathBuf>,
    #[serde(default)]
    documents: Option<Vec<Document>>,
    #[serde(default)]
    policy: Option<ChunkPolicy>,
}

async fn ingest(State(st): State<AppState>, body: Bytes) -> Response {
    let req: IngestRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let policy = req.policy.unwrap_or(st.config.chunking);
    if let Err(e) = policy.validate() {
        return json_error(StatusCode::BAD_REQUEST, "bad_request", e.to_string());
    }
    let index_dir = st.config.service.index_dir.clone();
    let engine = st.engine.clone();
    let work = tokio::task::spawn_blocking(move || {
        let docs = match (req.corpus_path, req.documents) {
            (Some(p), None) => read_corpus(&p).map_err(|e| (StatusCode::BAD_REQUEST, e.to_string()))?,
            (None, Some(d)) => d,
            _ => {
                return Err((
                    StatusCode::BAD_REQUEST,
                    "give exactly one of corpus_path or documents".to_string(),
                ))
            }
        };
        engine
            .ingest(&docs, &policy, index_dir.as_deref())
            .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
    });
    match work.await {
        Ok(Ok(summary)) => (StatusCode::OK, Json(summary)).into_response(),
        Ok(Err((status, msg))) => json_error(status, "ingest_failed", msg),
        Err(e) => json_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn register_datasource(State(st): State<AppState>, body: Bytes) -> Response {
    let cfg: DataSourceConfig = match parse_body(&body) {
        Ok(c) => c,
        Err(resp) => return resp,
    };
    if st.engine.datasource(&cfg.name).is_some() {
        return json_error(
            StatusCode::CONFLICT,
            "conflict",
            format!("data source {:?} is already registered", cfg.name),
        );
    }
    let engine = st.engine.clone();
    let work = tokio::task::spawn_blocking(move || {
        let ds = DataSource::open(&cfg)?;
        let tables = ds.schema.table_names();
        engine.register_datasource(ds)?;
        Ok::<_, OrchestratorError>((cfg.name, tables))
    });
    match work.await {
        Ok(Ok((name, tables))) => (
            StatusCode::CREATED,
            Json(json!({ "status": "registered", "name": name, "tables": tables })),
        )
            .into_response(),
        Ok(Err(e @ OrchestratorError::DuplicateDatasource(_))) => {
            json_error(StatusCode::CONFLICT, "conflict", e.to_string())
        }
        Ok(Err(e)) => json_error(StatusCode::BAD_REQUEST, "bad_datasource", e.to_string()),
        Err(e) => json_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    let manifest = st.engine.index().map(|ix| ix.manifest());
    Json(json!({
        "status": if manifest.is_some() { "ready" } else { "empty" },
        "index_manifest": manifest,
        "datasources": st.engine.datasource_names(),
        "plugins": st.engine.plugins.keys().collect::<Vec<_>>(),
        "sessions": st.engine.sessions.session_count(),
        "config": serde_json::to_value(&*st.config).unwrap_or(Value::Null),
    }))
}

/// Binds and serves until `shutdown` resolves, then ends open streams.
pub async fn serve(
    state: AppState,
    handle: ShutdownHandle,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(state);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            handle.trigger();
        })
        .await
}
