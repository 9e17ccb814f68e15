//! Chart selection for SQL results.
//!
//! Rules, first match wins: an explicit user hint; a temporal x with a
//! numeric y gives a line; a categorical x with 2 to 8 rows and a
//! non-negative y gives a pie when the question asks about shares and a bar
//! otherwise; a categorical x with at most 30 rows gives a bar. Anything else
//! is left as text.

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ResultTable;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    Bar,
    Line,
    Pie,
    #[default]
    None,
}

/// Invariant: `kind != None` implies `y_column` names a numeric column.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChartDecision {
    pub kind: ChartKind,
    pub x_column: Option<String>,
    pub y_column: Option<String>,
    pub reason: String,
}

impl ChartDecision {
    pub fn none(reason: impl Into<String>) -> Self {
        Self {
            kind: ChartKind::None,
            x_column: None,
            y_column: None,
            reason: reason.into(),
        }
    }
}

const SHARE_WORDS: &[&str] = &[
    "share", "shares", "proportion", "proportions", "percentage", "percent", "fraction", "split",
    "distribution",
];

const TEMPORAL_NAMES: &[&str] = &["date", "day", "week", "month", "quarter", "year", "period", "time"];

pub const MAX_PIE_ROWS: usize = 8;
pub const MAX_BAR_ROWS: usize = 30;

/// Chart kind the question asks for explicitly, if any.
pub fn hint_from_question(question: &str) -> Option<ChartKind> {
    let q = question.to_lowercase();
    if ["no chart", "without a chart", "without chart", "table only", "just the table"]
        .iter()
        .any(|p| q.contains(p))
    {
        return Some(ChartKind::None);
    }
    let words = text::index_terms(&q);
    let near = |kind: &str| {
        words.windows(2).any(|w| {
            w[0] == kind && matches!(w[1].as_str(), "chart" | "graph" | "plot" | "diagram")
        })
    };
    if near("pie") {
        Some(ChartKind::Pie)
    } else if near("line") {
        Some(ChartKind::Line)
    } else if near("bar") || near("column") {
        Some(ChartKind::Bar)
    } else {
        None
    }
}

fn non_null(table: &ResultTable, col: usize) -> impl Iterator<Item = &Value> {
    table.rows.iter().filter_map(move |r| r.get(col)).filter(|v| !v.is_null())
}

fn is_numeric(table: &ResultTable, col: usize) -> bool {
    let mut any = false;
    for v in non_null(table, col) {
        if !v.is_number() {
            return false;
        }
        any = true;
    }
    any
}

fn parses_as_time(s: &str) -> bool {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").is_ok()
        || NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").is_ok()
}

fn is_temporal(table: &ResultTable, col: usize) -> bool {
    let name = table.columns[col].to_lowercase();
    if name
        .split(|c: char| !c.is_alphanumeric())
        .any(|part| TEMPORAL_NAMES.contains(&part))
    {
        return true;
    }
    let mut any = false;
    for v in non_null(table, col) {
        match v.as_str() {
            Some(s) if parses_as_time(s) => any = true,
            _ => return false,
        }
    }
    any
}

fn non_negative(table: &ResultTable, col: usize) -> bool {
    non_null(table, col).all(|v| v.as_f64().is_some_and(|f| f >= 0.0))
}

/// Picks a chart for `table`. `hint` is an explicit request from the user.
pub fn decide_chart(table: &ResultTable, hint: Option<ChartKind>, question: &str) -> ChartDecision {
    if hint == Some(ChartKind::None) {
        return ChartDecision::none("user asked for no chart");
    }
    if table.rows.is_empty() || table.columns.is_empty() {
        return ChartDecision::none("no rows to plot; summarised as text");
    }
    let width = table.columns.len();
    let temporal = (0..width).find(|&c| is_temporal(table, c));
    let categorical = (0..width).find(|&c| !is_numeric(table, c) && Some(c) != temporal);
    let x = temporal.or(categorical);
    let y = (0..width).find(|&c| Some(c) != x && is_numeric(table, c));
    let Some(y) = y else {
        return ChartDecision::none("no numeric column; summarised as text");
    };
    let name = |c: usize| table.columns[c].clone();
    let decision = |kind, reason: &str| ChartDecision {
        kind,
        x_column: x.map(name),
        y_column: Some(name(y)),
        reason: reason.to_string(),
    };

    if let Some(kind) = hint {
        return decision(kind, "explicit user hint");
    }
    let Some(xc) = x else {
        return ChartDecision::none("no category or time column; summarised as text");
    };
    if Some(xc) == temporal {
        return decision(ChartKind::Line, "temporal x with numeric y");
    }
    let rows = table.rows.len();
    if (2..=MAX_PIE_ROWS).contains(&rows) && non_negative(table, y) {
        let share = text::index_terms(question)
            .iter()
            .any(|w| SHARE_WORDS.contains(&w.as_str()));
        return if share {
            decision(ChartKind::Pie, "few non-negative categories and a share question")
        } else {
            decision(ChartKind::Bar, "few categories with numeric values")
        };
    }
    if rows <= MAX_BAR_ROWS {
        return decision(ChartKind::Bar, "categorical x with numeric y");
    }
    ChartDecision::none("too many categories; summarised as text")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn table(columns: &[&str], rows: Vec<Vec<Value>>) -> ResultTable {
        ResultTable {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    #[test]
    fn share_question_over_five_categories_is_pie() {
        let rows = ["a", "b", "c", "d", "e"]
            .iter()
            .enumerate()
            .map(|(i, k)| vec![json!(k), json!(i + 1)])
            .collect();
        let t = table(&["genre", "n"], rows);
        let d = decide_chart(&t, None, "breakdown by share");
        assert_eq!(d.kind, ChartKind::Pie);
        assert_eq!(d.y_column.as_deref(), Some("n"));
        assert_eq!(decide_chart(&t, None, "count per genre").kind, ChartKind::Bar);
    }

    #[test]
    fn twelve_dated_rows_are_a_line() {
        let rows = (1..=12)
            .map(|m| vec![json!(format!("2025-{m:02}-01")), json!(100 * m)])
            .collect();
        let d = decide_chart(&table(&["day", "revenue"], rows), None, "revenue");
        assert_eq!(d.kind, ChartKind::Line);
        assert_eq!(d.x_column.as_deref(), Some("day"));
    }

    #[test]
    fn text_only_is_none() {
        let t = table(&["name"], vec![vec![json!("x")], vec![json!("y")]]);
        assert_eq!(decide_chart(&t, None, "").kind, ChartKind::None);
        assert_eq!(decide_chart(&t, Some(ChartKind::Bar), "").kind, ChartKind::None);
    }

    #[test]
    fn hint_wins_and_negative_values_block_pie() {
        let rows = vec![vec![json!("a"), json!(-1)], vec![json!("b"), json!(3)]];
        let t = table(&["k", "v"], rows);
        assert_eq!(decide_chart(&t, None, "share").kind, ChartKind::Bar);
        assert_eq!(decide_chart(&t, Some(ChartKind::Pie), "").kind, ChartKind::Pie);
        assert_eq!(decide_chart(&t, Some(ChartKind::None), "").kind, ChartKind::None);
    }

    #[test]
    fn large_category_sets_fall_back_to_text() {
        let rows = (0..40).map(|i| vec![json!(format!("k{i}")), json!(i)]).collect();
        assert_eq!(decide_chart(&table(&["k", "v"], rows), None, "").kind, ChartKind::None);
    }

    #[test]
    fn hints_from_question_text() {
        assert_eq!(hint_from_question("show it as a pie chart"), Some(ChartKind::Pie));
        assert_eq!(hint_from_question("line graph of sales"), Some(ChartKind::Line));
        assert_eq!(hint_from_question("table only please"), Some(ChartKind::None));
        assert_eq!(hint_from_question("plot revenue by month"), None);
    }
}
