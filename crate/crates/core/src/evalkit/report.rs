//! Chunk-size ablation tables: one table per chunking policy, one row per
//! dataset plus `ALL`, and Recall@k then Precision@k for each k.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, ChunkSpans, EvalError, GoldAnnotation, QueryScores, RetrievalRun, METRICS_VERSION};

/// One chunking policy's run and the chunk extents it was produced over.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub label: String,
    pub run: RetrievalRun,
    pub spans: ChunkSpans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub queries: usize,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub policy: String,
    /// Dataset rows in order of first appearance in the gold set, then `ALL`.
    pub rows: Vec<ReportRow>,
    pub missing_queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub ks: Vec<usize>,
    pub tables: Vec<PolicyTable>,
}

pub const ALL_ROW: &str = "ALL";

fn row(dataset: &str, scores: &[&QueryScores], nk: usize) -> ReportRow {
    let n = scores.len();
    let mean = |f: &dyn Fn(&QueryScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(|s| f(s)).sum::<f64>() / n as f64
        }
    };
    ReportRow {
        dataset: dataset.to_string(),
        queries: n,
        recall: (0..nk).map(|i| mean(&|s| s.recall[i])).collect(),
        precision: (0..nk).map(|i| mean(&|s| s.precision[i])).collect(),
    }
}

fn describe_difference(a: &BTreeSet<&str>, b: &BTreeSet<&str>, la: &str, lb: &str) -> String {
    let only_a: Vec<&str> = a.difference(b).copied().collect();
    let only_b: Vec<&str> = b.difference(a).copied().collect();
    format!("only in {la}: {only_a:?}; only in {lb}: {only_b:?}")
}

pub fn ablation_report(
    runs: &[PolicyRun],
    gold: &[GoldAnnotation],
    ks: &[usize],
) -> Result<AblationReport, EvalError> {
    if let Some(first) = runs.first() {
        let base = first.run.query_ids();
        for r in &runs[1..] {
            let ids = r.run.query_ids();
            if ids != base {
                return Err(EvalError::MismatchedRuns(describe_difference(
                    &base,
                    &ids,
                    &first.label,
                    &r.label,
                )));
            }
        }
    }
    let mut datasets: Vec<&str> = Vec::new();
    for g in gold {
        if !datasets.contains(&g.dataset.as_str()) {
            datasets.push(&g.dataset);
        }
    }
    let mut tables = Vec::with_capacity(runs.len());
    for r in runs {
        let scores = evaluate(&r.run, gold, &r.spans, ks)?;
        let mut rows: Vec<ReportRow> = datasets
            .iter()
            .map(|d| {
                let sel: Vec<&QueryScores> = scores.iter().filter(|s| s.dataset == *d).collect();
                row(d, &sel, ks.len())
            })
            .collect();
        rows.push(row(ALL_ROW, &scores.iter().collect::<Vec<_>>(), ks.len()));
        tables.push(PolicyTable {
            policy: r.label.clone(),
            rows,
            missing_queries: scores.iter().filter(|s| s.missing).map(|s| s.query_id.clone()).collect(),
        });
    }
    Ok(AblationReport {
        version: METRICS_VERSION.to_string(),
        ks: ks.to_vec(),
        tables,
    })
}

const CELL: usize = 7;

impl AblationReport {
    /// Number of numeric columns per row: Recall@k and Precision@k per k.
    pub fn numeric_columns(&self) -> usize {
        2 * self.ks.len()
    }

    /// Aligned text tables.
    pub fn to_text(&self) -> String {
        let name_w = self
            .tables
            .iter()
            .flat_map(|t| t.rows.iter().map(|r| r.dataset.len()))
            .chain([7])
            .max()
            .unwrap_or(7);
        let block_w = self.ks.len() * CELL;
        let mut out = String::new();
        let _ = writeln!(out, "# metrics: {}", self.version);
        for t in &self.tables {
            let _ = writeln!(out, "\nChunk = {}", t.policy);
            let _ = writeln!(
                out,
                "{:<name_w$} | {:<block_w$} | {:<block_w$}",
                "Dataset", "Recall@k (%)", "Precision@k (%)"
            );
            let ks: String = self.ks.iter().map(|k| format!("{:>CELL$}", format!("k={k}"))).collect();
            let _ = writeln!(out, "{:<name_w$} | {ks} | {ks}", "");
            let _ = writeln!(out, "{}", "-".repeat(name_w + 2 * block_w + 6));
            for r in &t.rows {
                let cells = |v: &[f64]| v.iter().map(|x| format!("{x:>CELL$.2}")).collect::<String>();
                let _ = writeln!(
                    out,
                    "{:<name_w$} | {} | {}",
                    r.dataset,
                    cells(&r.recall),
                    cells(&r.precision)
                );
            }
            if !t.missing_queries.is_empty() {
                let _ = writeln!(out, "missing from run (scored 0): {}", t.missing_queries.join(", "));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::super::{EvidenceSpan, DEFAULT_KS};
    use super::*;

    fn fixture() -> (ChunkSpans, Vec<GoldAnnotation>, RetrievalRun) {
        let mut spans = ChunkSpans::default();
        spans.insert("c0", EvidenceSpan::new("d", 0, 10));
        spans.insert("c1", EvidenceSpan::new("d", 10, 20));
        let gold = vec![GoldAnnotation {
            query_id: "q".into(),
            query: "q".into(),
            evidence_spans: vec![EvidenceSpan::new("d", 12, 14)],
            reference_answer: None,
            dataset: "Toy".into(),
        }];
        let mut run = RetrievalRun::default();
        run.insert("q", vec!["c0".into(), "c1".into()]);
        (spans, gold, run)
    }

    #[test]
    fn single_dataset_all_row_equals_data_row() {
        let (spans, gold, run) = fixture();
        let rep = ablation_report(&[PolicyRun { label: "500".into(), run, spans }], &gold, &DEFAULT_KS).unwrap();
        let rows = &rep.tables[0].rows;
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].dataset, "ALL");
        assert_eq!((&rows[0].recall, &rows[0].precision), (&rows[1].recall, &rows[1].precision));
        assert_eq!(rows[0].recall, [0.0, 100.0, 100.0, 100.0, 100.0, 100.0]);
        assert_eq!(rows[0].precision, [0.0, 50.0, 50.0, 50.0, 50.0, 50.0]);
        assert_eq!(rep.numeric_columns(), 12);
        let text = rep.to_text();
        let data_line = text.lines().find(|l| l.starts_with("Toy")).unwrap();
        assert_eq!(data_line.split_whitespace().filter(|w| w.parse::<f64>().is_ok()).count(), 12);
        assert_eq!(text, rep.to_text());
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let (spans, gold, run) = fixture();
        let mut other = run.clone();
        other.insert("extra", vec![]);
        let err = ablation_report(
            &[
                PolicyRun { label: "500".into(), run, spans: spans.clone() },
                PolicyRun { label: "1000".into(), run: other, spans },
            ],
            &gold,
            &DEFAULT_KS,
        )
        .unwrap_err();
        assert!(err.to_string().contains("\"extra\""), "{err}");
    }
}
