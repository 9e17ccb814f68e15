//! Offline evaluation: Recall@k and Precision@k over chunked retrieval runs,
//! span-based generation metrics, and the chunk-size ablation report.
//!
//! A retrieved chunk hits a gold evidence span when both lie in the same
//! document and share at least one character. Percentages are averaged over
//! queries; the `ALL` row pools every query regardless of dataset.

mod report;
mod trace;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::ChunkStore;

pub use report::{ablation_report, AblationReport, PolicyRun, PolicyTable, ReportRow};
pub use trace::{summarize_traces, trace_from_grounded, trace_metrics, TraceAnnotation, TraceScores, TraceSummary};

/// Version tag of the metric definitions, written into every report header.
pub const METRICS_VERSION: &str = "evalkit-1 (hit: char overlap >= 1; ALL: micro-average over queries)";

/// The k values of the published layout.
pub const DEFAULT_KS: [usize; 6] = [1, 2, 4, 8, 16, 50];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("gold query {query_id}: {message}")]
    Gold { query_id: String, message: String },
    #[error("run for query {query_id} lists chunk {chunk_id} more than once")]
    DuplicateChunk { query_id: String, chunk_id: String },
    #[error("run for query {query_id} references unknown chunk {chunk_id}")]
    UnknownChunk { query_id: String, chunk_id: String },
    #[error("runs disagree on their query sets: {0}")]
    MismatchedRuns(String),
    #[error("trace {query_id}: {message}")]
    Trace { query_id: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceSpan {
    pub doc_id: String,
    pub start_char: usize,
    pub end_char: usize,
}

impl EvidenceSpan {
    pub fn new(doc_id: impl Into<String>, start_char: usize, end_char: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            start_char,
            end_char,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub query_id: String,
    pub query: String,
    pub evidence_spans: Vec<EvidenceSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    /// Dataset the query belongs to; one report row per dataset.
    #[serde(default = "default_dataset")]
    pub dataset: String,
}

fn default_dataset() -> String {
    "default".into()
}

impl GoldAnnotation {
    /// At least one span, each non-empty and, when document lengths are
    /// known, inside its document.
    pub fn validate(&self, doc_lengths: Option<&HashMap<String, usize>>) -> Result<(), EvalError> {
        let err = |message: String| EvalError::Gold {
            query_id: self.query_id.clone(),
            message,
        };
        if self.evidence_spans.is_empty() {
            return Err(err("no evidence spans".into()));
        }
        for s in &self.evidence_spans {
            if s.start_char >= s.end_char {
                return Err(err(format!("empty span {}..{} in {}", s.start_char, s.end_char, s.doc_id)));
            }
            if let Some(lengths) = doc_lengths {
                match lengths.get(&s.doc_id) {
                    None => return Err(err(format!("unknown document {}", s.doc_id))),
                    Some(&len) if s.end_char > len => {
                        return Err(err(format!(
                            "span {}..{} exceeds document {} ({len} chars)",
                            s.start_char, s.end_char, s.doc_id
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

/// Ranked chunk ids per query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub ranked: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub query_id: String,
    pub ranked: Vec<String>,
}

impl RetrievalRun {
    pub fn insert(&mut self, query_id: impl Into<String>, ranked: Vec<String>) {
        self.ranked.insert(query_id.into(), ranked);
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (q, ids) in &self.ranked {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(EvalError::DuplicateChunk {
                        query_id: q.clone(),
                        chunk_id: id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn query_ids(&self) -> BTreeSet<&str> {
        self.ranked.keys().map(String::as_str).collect()
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let mut run = Self::default();
        for line in read_jsonl::<RunLine>(path)? {
            run.ranked.insert(line.query_id, line.ranked);
        }
        run.validate()?;
        Ok(run)
    }
}

/// Character extent of every chunk, keyed by chunk id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkSpans {
    spans: HashMap<String, EvidenceSpan>,
}

impl ChunkSpans {
    pub fn from_store(store: &ChunkStore) -> Self {
        Self {
            spans: store
                .chunks
                .iter()
                .map(|c| (c.chunk_id.clone(), EvidenceSpan::new(&c.doc_id, c.start_char, c.end_char)))
                .collect(),
        }
    }

    pub fn insert(&mut self, chunk_id: impl Into<String>, span: EvidenceSpan) {
        self.spans.insert(chunk_id.into(), span);
    }

    pub fn get(&self, chunk_id: &str) -> Option<&EvidenceSpan> {
        self.spans.get(chunk_id)
    }

    /// Largest chunk end per document, a lower bound on document length.
    pub fn doc_extents(&self) -> HashMap<String, usize> {
        let mut out: HashMap<String, usize> = HashMap::new();
        for s in self.spans.values() {
            let e = out.entry(s.doc_id.clone()).or_default();
            *e = (*e).max(s.end_char);
        }
        out
    }
}

fn overlaps(chunk: &EvidenceSpan, gold: &EvidenceSpan) -> bool {
    chunk.doc_id == gold.doc_id && chunk.start_char < gold.end_char && gold.start_char < chunk.end_char
}

/// Per-query Recall@k and Precision@k, as percentages, in `ks` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub query_id: String,
    pub dataset: String,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// True when the run had no entry for this query.
    pub missing: bool,
}

fn check_ks(ks: &[usize]) -> Result<(), EvalError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    Ok(())
}

fn score_query(
    gold: &GoldAnnotation,
    ranked: Option<&Vec<String>>,
    spans: &ChunkSpans,
    ks: &[usize],
) -> Result<QueryScores, EvalError> {
    let empty = Vec::new();
    let ranked = ranked.unwrap_or(&empty);
    let resolved: Vec<&EvidenceSpan> = ranked
        .iter()
        .map(|id| {
            spans.get(id).ok_or_else(|| EvalError::UnknownChunk {
                query_id: gold.query_id.clone(),
                chunk_id: id.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut recall = Vec::with_capacity(ks.len());
    let mut precision = Vec::with_capacity(ks.len());
    for &k in ks {
        let top = &resolved[..k.min(resolved.len())];
        let covered = gold
            .evidence_spans
            .iter()
            .filter(|g| top.iter().any(|c| overlaps(c, g)))
            .count();
        recall.push(covered as f64 / gold.evidence_spans.len() as f64 * 100.0);
        let relevant = top
            .iter()
            .filter(|c| gold.evidence_spans.iter().any(|g| overlaps(c, g)))
            .count();
        precision.push(if top.is_empty() {
            0.0
        } else {
            relevant as f64 / top.len() as f64 * 100.0
        });
    }
    Ok(QueryScores {
        query_id: gold.query_id.clone(),
        dataset: gold.dataset.clone(),
        recall,
        precision,
        missing: false,
    })
}

/// Scores every gold query against the run. Gold queries absent from the run
/// score zero and are flagged `missing`.
pub fn evaluate(
    run: &RetrievalRun,
    gold: &[GoldAnnotation],
    spans: &ChunkSpans,
    ks: &[usize],
) -> Result<Vec<QueryScores>, EvalError> {
    check_ks(ks)?;
    run.validate()?;
    let extents = spans.doc_extents();
    for g in gold {
        g.validate(Some(&extents))?;
    }
    gold.par_iter()
        .map(|g| {
            let ranked = run.ranked.get(&g.query_id);
            let mut s = score_query(g, ranked, spans, ks)?;
            s.missing = ranked.is_none();
            Ok(s)
        })
        .collect()
}

/// Mean over queries of a per-query column.
fn mean_at(scores: &[&QueryScores], pick: impl Fn(&QueryScores) -> f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| pick(s)).sum::<f64>() / scores.len() as f64
}

/// Averaged metric plus the queries that had no run entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub percent: f64,
    pub queries: usize,
    pub missing_queries: Vec<String>,
}

fn at_k(
    run: &RetrievalRun,
    gold: &[GoldAnnotation],
    spans: &ChunkSpans,
    k: usize,
    recall: bool,
) -> Result<AtK, EvalError> {
    let scores = evaluate(run, gold, spans, &[k])?;
    let refs: Vec<&QueryScores> = scores.iter().collect();
    Ok(AtK {
        k,
        percent: mean_at(&refs, |s| if recall { s.recall[0] } else { s.precision[0] }),
        queries: scores.len(),
        missing_queries: scores.iter().filter(|s| s.missing).map(|s| s.query_id.clone()).collect(),
    })
}

/// Mean over queries of the share of gold spans overlapped by a top-k chunk.
pub fn recall_at_k(run: &RetrievalRun, gold: &[GoldAnnotation], spans: &ChunkSpans, k: usize) -> Result<AtK, EvalError> {
    at_k(run, gold, spans, k, true)
}

/// Mean over queries of the share of top-k chunks overlapping a gold span;
/// the denominator is `min(k, returned)`.
pub fn precision_at_k(
    run: &RetrievalRun,
    gold: &[GoldAnnotation],
    spans: &ChunkSpans,
    k: usize,
) -> Result<AtK, EvalError> {
    at_k(run, gold, spans, k, false)
}

pub fn parse_ks(s: &str) -> Result<Vec<usize>, String> {
    let ks: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad k {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err("k values must be positive".into());
    }
    Ok(ks)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldAnnotation>, EvalError> {
    let gold: Vec<GoldAnnotation> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for g in &gold {
        if !seen.insert(g.query_id.clone()) {
            return Err(EvalError::Gold {
                query_id: g.query_id.clone(),
                message: "duplicate query_id".into(),
            });
        }
        g.validate(None)?;
    }
    Ok(gold)
}
