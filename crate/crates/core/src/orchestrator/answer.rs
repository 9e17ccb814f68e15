//! Final answer assembly. [`optimize_answer`] is a pure function of the
//! pipeline state, which is what makes persisted states replayable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PipelineState, Route};
use crate::grounding::{self, GroundingMode, Verdict, ABSTENTION};
use crate::retrieval::{Snippet, SnippetOrigin};
use crate::t2s::{ChartDecision, ResultTable, SqlAttempt, T2sFinal};

pub const NO_ANSWER: &str = "No answer could be assembled for this question.";

/// One entry of the numbered reference block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub n: usize,
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub source_uri: String,
    pub start_char: usize,
    pub end_char: usize,
    pub origin: SnippetOrigin,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub mode: GroundingMode,
    pub support_rate: f64,
    pub abstentions: usize,
    pub rounds_used: usize,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub session_id: String,
    pub query: String,
    pub route: Route,
    /// Answer text; every `[n]` marker resolves to `references[n - 1]`.
    pub text: String,
    pub references: Vec<Reference>,
    pub table: Option<ResultTable>,
    pub chart: Option<ChartDecision>,
    pub narrative: Option<String>,
    pub sql_attempts: Vec<SqlAttempt>,
    pub sql_final: Option<T2sFinal>,
    pub support: Option<SupportSummary>,
    pub plugin_results: Vec<(String, Value)>,
    pub warnings: Vec<String>,
    pub no_answer: bool,
}

impl FinalAnswer {
    /// Text followed by the numbered reference block.
    pub fn render(&self) -> String {
        let mut out = self.text.clone();
        if let Some(t) = &self.table {
            out.push_str("\n\n");
            out.push_str(&render_table(t));
        }
        if !self.references.is_empty() {
            out.push_str("\n\nReferences:\n");
            out.push_str(&self.reference_block());
        }
        out
    }

    /// `[n] source (chars a-b)` lines.
    pub fn reference_block(&self) -> String {
        self.references
            .iter()
            .map(|r| {
                let source = if r.source_uri.is_empty() { &r.doc_id } else { &r.source_uri };
                format!("[{}] {} (chars {}-{})\n", r.n, source, r.start_char, r.end_char)
            })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).unwrap_or_else(|e| json!({ "error": e.to_string() }))
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Pipe-separated text rendering of a result table.
pub fn render_table(t: &ResultTable) -> String {
    let mut out = t.columns.join(" | ");
    out.push('\n');
    for r in &t.rows {
        out.push_str(&r.iter().map(cell).collect::<Vec<_>>().join(" | "));
        out.push('\n');
    }
    out
}

fn char_slice(s: &str, start: usize, end: usize) -> String {
    s.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Re-emits a sentence with markers for exactly `numbers`, placed before
/// its closing punctuation.
fn with_markers(sentence: &str, numbers: &[usize]) -> String {
    let body = grounding::strip_markers(sentence);
    if numbers.is_empty() {
        return body;
    }
    let markers: String = numbers.iter().map(|n| format!("[{n}]")).collect();
    let trimmed = body.trim_end_matches(['.', '!', '?']);
    let punct = &body[trimmed.len()..];
    format!("{} {markers}{punct}", trimmed.trim_end())
}

struct Renumbering<'a> {
    by_chunk: BTreeMap<&'a str, usize>,
    references: Vec<Reference>,
}

impl<'a> Renumbering<'a> {
    fn number(&mut self, snippet: &'a Snippet) -> usize {
        if let Some(&n) = self.by_chunk.get(snippet.chunk_id.as_str()) {
            return n;
        }
        let n = self.references.len() + 1;
        self.by_chunk.insert(&snippet.chunk_id, n);
        self.references.push(Reference {
            n,
            chunk_id: snippet.chunk_id.clone(),
            doc_id: snippet.doc_id.clone(),
            title: snippet.title.clone(),
            source_uri: snippet.source_uri.clone(),
            start_char: snippet.start_char,
            end_char: snippet.end_char,
            origin: snippet.origin,
            snippet: snippet.text.clone(),
        });
        n
    }
}

/// Merges the grounded text, SQL table and narrative, chart and citations of
/// `state`. References are numbered 1..m in order of first citation.
pub fn optimize_answer(state: &PipelineState, route: &Route) -> FinalAnswer {
    let mut parts: Vec<String> = Vec::new();
    let mut renum = Renumbering {
        by_chunk: BTreeMap::new(),
        references: Vec::new(),
    };
    let mut support = None;

    if let Some(g) = &state.grounded {
        let lookup: BTreeMap<&str, &Snippet> = state
            .retrieved_content
            .iter()
            .map(|s| (s.chunk_id.as_str(), s))
            .collect();
        let mut text = String::new();
        let mut cursor = 0;
        for s in &g.sentences {
            text.push_str(&char_slice(&g.text, cursor, s.start_char));
            let numbers: Vec<usize> = if s.verdict == Verdict::Supported {
                s.citations
                    .iter()
                    .filter_map(|id| lookup.get(id.as_str()).map(|sn| renum.number(sn)))
                    .collect()
            } else {
                Vec::new()
            };
            let sentence = if s.verdict == Verdict::Abstained && s.text.trim() == ABSTENTION {
                ABSTENTION.to_string()
            } else {
                with_markers(&s.text, &numbers)
            };
            text.push_str(&sentence);
            cursor = s.end_char;
        }
        text.push_str(&char_slice(&g.text, cursor, g.text.chars().count()));
        parts.push(text.trim().to_string());
        support = Some(SupportSummary {
            mode: g.mode,
            support_rate: g.support_rate,
            abstentions: g.abstentions,
            rounds_used: g.rounds_used,
            verdicts: g.sentences.iter().map(|s| s.verdict).collect(),
        });
    }

    let mut table = None;
    let mut narrative = None;
    let mut sql_attempts = Vec::new();
    let mut sql_final = None;
    if let Some(r) = &state.sql {
        parts.push(r.narrative.clone());
        narrative = Some(r.narrative.clone());
        table = r.table.clone();
        sql_attempts = r.attempts.clone();
        sql_final = Some(r.final_state);
    }
    let chart = state.visual_elements.last().map(|v| v.chart.clone());
    if table.is_none() {
        table = state.visual_elements.last().map(|v| v.table.clone());
        if let (None, Some(c)) = (&state.sql, &chart) {
            parts.push(match (&c.x_column, &c.y_column) {
                (Some(x), Some(y)) => format!(
                    "A {} chart of {y} by {x} was drawn from the previous result.",
                    serde_json::to_value(c.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                ),
                _ => format!("No chart drawn: {}.", c.reason),
            });
        }
    }
    for (id, payload) in &state.plugin_results {
        parts.push(format!("Result from plugin {id}: {payload}"));
    }

    let parts: Vec<String> = parts.into_iter().filter(|p| !p.trim().is_empty()).collect();
    let no_answer = parts.is_empty();
    FinalAnswer {
        session_id: state.session_id.clone(),
        query: state.query.clone(),
        route: route.clone(),
        text: if no_answer { NO_ANSWER.to_string() } else { parts.join("\n\n") },
        references: renum.references,
        table,
        chart,
        narrative,
        sql_attempts,
        sql_final,
        support,
        plugin_results: state.plugin_results.clone(),
        warnings: state.warnings.clone(),
        no_answer,
    }
}
