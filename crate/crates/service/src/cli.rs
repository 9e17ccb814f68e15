//! Command-line entry points: `ingest`, `serve`, `query`, `eval`, `replay`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use hybridqa::config::AppConfig;
use hybridqa::evalkit::{ablation_report, load_gold, ChunkSpans, PolicyRun, RetrievalRun};
use hybridqa::events::Emitter;
use hybridqa::grounding::GroundingMode;
use hybridqa::ingest::{read_corpus, ChunkPolicy, ChunkStore};
use hybridqa::orchestrator::{load_snapshot, replay, QueryRequest};
use hybridqa::retrieval::IndexManifest;

use crate::http::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "hybridqa", version, about = "Hybrid document and SQL question answering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSONL corpus and write the index directory.
    Ingest(IngestArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Answer one question and print the assembled answer.
    Query(QueryArgs),
    /// Score retrieval runs against gold evidence spans.
    Eval(EvalArgs),
    /// Recompute the answer of a persisted query state.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL corpus, one document per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Index directory to write.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub window: usize,
    #[arg(long, default_value_t = 150)]
    pub overlap: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `[service] port`.
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value = "standard")]
    pub mode: GroundingMode,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Index directory; overrides `[service] index_dir`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub datasource: Option<String>,
    #[arg(long, default_value = "cli")]
    pub session: String,
    /// Print the answer as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL run file (`{"query_id", "ranked": [chunk ids]}` per line);
    /// repeat once per chunking policy.
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
    /// Index directory the matching run was retrieved from, in `--run` order.
    #[arg(long, required = true)]
    pub store: Vec<PathBuf>,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, default_value = "1,2,4,8,16,50", value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Also write the machine-readable report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub state: PathBuf,
}

pub type CliResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

fn load_config(path: Option<&Path>) -> Result<AppConfig, Box<dyn std::error::Error + Send + Sync>> {
    Ok(match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    })
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Serve(a) => serve(a),
        Command::Query(a) => query(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Replay(a) => replay_state(a, out),
    }
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.chunking = ChunkPolicy {
        tokenizer_id: cfg.chunking.tokenizer_id,
        ..ChunkPolicy::new(a.window, a.overlap)?
    };
    cfg.service.datasources.clear();
    let engine = cfg.build_engine()?;
    let docs = read_corpus(&a.input)?;
    let summary = engine.ingest(&docs, &cfg.chunking, Some(&a.store))?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.port {
        cfg.service.port = p;
    }
    let engine = Arc::new(cfg.build_engine()?);
    let addr = format!("{}:{}", cfg.service.host, cfg.service.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        let (state, handle) = AppState::new(engine, cfg);
        http::serve(state, handle, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

fn query(a: QueryArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.store {
        cfg.service.index_dir = Some(s);
    }
    let engine = cfg.build_engine()?;
    let req = QueryRequest {
        session_id: a.session,
        query: a.question,
        mode: a.mode,
        datasource: a.datasource,
    };
    req.validate()?;
    let (_, result) = engine.answer(&req, &mut Emitter::discard());
    let answer = result?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&answer.to_json())?)?;
    } else {
        writeln!(out, "{}", answer.render())?;
    }
    Ok(())
}

fn policy_label(dir: &Path, run: &Path) -> String {
    std::fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<IndexManifest>(&t).ok())
        .and_then(|m| m.chunking)
        .map(|c| c.window_tokens.to_string())
        .unwrap_or_else(|| run.file_stem().unwrap_or_default().to_string_lossy().into_owned())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    if a.run.len() != a.store.len() {
        return Err(format!("{} --run values but {} --store values", a.run.len(), a.store.len()).into());
    }
    let gold = load_gold(&a.gold)?;
    let mut runs = Vec::new();
    for (run, store) in a.run.iter().zip(&a.store) {
        let chunks = ChunkStore::load(&store.join("chunks.jsonl"))?;
        runs.push(PolicyRun {
            label: policy_label(store, run),
            run: RetrievalRun::load(run)?,
            spans: ChunkSpans::from_store(&chunks),
        });
    }
    let report = ablation_report(&runs, &gold, &a.ks)?;
    write!(out, "{}", report.to_text())?;
    if let Some(p) = a.json {
        std::fs::write(p, report.to_json())?;
    }
    Ok(())
}

fn replay_state(a: ReplayArgs, out: &mut dyn Write) -> CliResult {
    let snap = load_snapshot(&a.state)?;
    let r = replay(&snap);
    writeln!(out, "{}", r.answer.render())?;
    match r.matches_recorded {
        Some(true) => writeln!(out, "replay: identical to the recorded answer")?,
        Some(false) => return Err("replay differs from the recorded answer".into()),
        None => writeln!(out, "replay: no recorded answer to compare")?,
    }
    Ok(())
}
