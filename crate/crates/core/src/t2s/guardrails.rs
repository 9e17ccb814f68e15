//! Semantic rewrites applied to generated SQL before it runs: unit
//! conversion, date-range clamping and fuzzy text matching.
//!
//! Each pass is a token-level splice over the lossless lexer output, so text
//! outside the rewritten ranges is preserved byte for byte. Every pass
//! recognises its own output and leaves it alone, which makes the whole
//! rewrite idempotent.

use chrono::{Duration, Months, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

use super::sql::{self, analyze, ColumnRef, Parsed, SqlError, TokKind};
use super::SchemaContext;
use crate::text;

/// Source of "now" for date guardrails.
pub trait Clock: Send + Sync {
    fn now(&self) -> NaiveDateTime;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedClock(pub NaiveDateTime);

impl Clock for FixedClock {
    fn now(&self) -> NaiveDateTime {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        chrono::Local::now().naive_local()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardrailKind {
    UnitConversion,
    DateBound,
    FuzzyMatch,
    ReadonlyReject,
    ColumnAuthorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailNote {
    pub kind: GuardrailKind,
    pub note: String,
}

/// A date predicate added to a query, kept for the future-row probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateBound {
    pub table: String,
    pub column: String,
    pub lower: String,
    pub upper: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardrailReport {
    pub applied: Vec<GuardrailKind>,
    pub notes: Vec<GuardrailNote>,
    pub date_bounds: Vec<DateBound>,
}

impl GuardrailReport {
    pub fn add(&mut self, kind: GuardrailKind, note: impl Into<String>) {
        if !self.applied.contains(&kind) {
            self.applied.push(kind);
        }
        self.notes.push(GuardrailNote {
            kind,
            note: note.into(),
        });
    }

    pub fn merge(&mut self, other: GuardrailReport) {
        for n in other.notes {
            self.add(n.kind, n.note);
        }
        for b in other.date_bounds {
            if !self.date_bounds.contains(&b) {
                self.date_bounds.push(b);
            }
        }
    }

    pub fn has(&self, kind: GuardrailKind) -> bool {
        self.applied.contains(&kind)
    }
}

/// `column / divisor` converts a `from` value into `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConversion {
    pub from: String,
    pub from_aliases: Vec<String>,
    pub to: String,
    pub to_aliases: Vec<String>,
    pub divisor: f64,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn default_conversions() -> Vec<UnitConversion> {
    vec![
        UnitConversion {
            from: "metres".into(),
            from_aliases: strings(&["m", "metre", "meter", "meters"]),
            to: "miles".into(),
            to_aliases: strings(&["mile", "mi"]),
            divisor: 1609.34,
        },
        UnitConversion {
            from: "metres".into(),
            from_aliases: strings(&["m", "metre", "meter", "meters"]),
            to: "kilometres".into(),
            to_aliases: strings(&["km", "kilometre", "kilometer", "kilometers"]),
            divisor: 1000.0,
        },
    ]
}

impl UnitConversion {
    fn is_from(&self, unit: &str) -> bool {
        let u = unit.to_lowercase();
        u == self.from || self.from_aliases.contains(&u)
    }

    fn asked_in(&self, question_terms: &[String]) -> bool {
        question_terms
            .iter()
            .any(|t| *t == self.to || self.to_aliases.contains(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Guardrails {
    pub conversions: Vec<UnitConversion>,
}

impl Default for Guardrails {
    fn default() -> Self {
        Self {
            conversions: default_conversions(),
        }
    }
}

struct Edit {
    start: usize,
    end: usize,
    text: String,
}

fn splice(src: &str, mut edits: Vec<Edit>) -> String {
    edits.sort_by(|a, b| b.start.cmp(&a.start).then(b.end.cmp(&a.end)));
    let mut out = src.to_string();
    for e in edits {
        out.replace_range(e.start..e.end, &e.text);
    }
    out
}

static RELATIVE_RANGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\b(?:last|past|previous)[\s-]+(\d+|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)[\s-]+(day|days|week|weeks|month|months|year|years)\b",
    )
    .unwrap()
});

const NUMBER_WORDS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve",
];

/// `(count, unit)` for phrases like "last 3 months" or "past two weeks".
pub fn relative_range(question: &str) -> Option<(u32, String)> {
    let q = question.to_lowercase();
    let c = RELATIVE_RANGE.captures(&q)?;
    let n = c[1]
        .parse()
        .ok()
        .or_else(|| NUMBER_WORDS.iter().position(|w| *w == &c[1]).map(|i| i as u32 + 1))?;
    Some((n, c[2].trim_end_matches('s').to_string()))
}

fn subtract(now: NaiveDateTime, n: u32, unit: &str) -> Option<NaiveDateTime> {
    match unit {
        "day" => now.checked_sub_signed(Duration::days(i64::from(n))),
        "week" => now.checked_sub_signed(Duration::days(7 * i64::from(n))),
        "month" => now.checked_sub_months(Months::new(n)),
        "year" => now.checked_sub_months(Months::new(12 * n)),
        _ => None,
    }
}

fn is_text_type(ty: &str) -> bool {
    let t = ty.to_ascii_uppercase();
    t.is_empty() || t.contains("CHAR") || t.contains("TEXT") || t.contains("CLOB")
}

fn is_temporal_type(ty: &str) -> bool {
    let t = ty.to_ascii_uppercase();
    t.contains("DATE") || t.contains("TIME")
}

/// Byte range covering a column reference including its qualifier.
fn ref_range(p: &Parsed, c: &ColumnRef) -> (usize, usize) {
    let first = c.qual_tok.unwrap_or(c.tok);
    (p.at(first).unwrap().start, p.at(c.tok).unwrap().end)
}

impl Guardrails {
    /// Rewrites `sql` for the question and reports what changed. The input
    /// must already have passed the read-only check.
    pub fn apply(
        &self,
        question: &str,
        sql: &str,
        schema: &SchemaContext,
        clock: &dyn Clock,
    ) -> Result<(String, GuardrailReport), SqlError> {
        let mut report = GuardrailReport::default();
        let s = fuzzy_pass(sql, schema, &mut report)?;
        let s = self.unit_pass(question, &s, schema, &mut report)?;
        let s = date_pass(question, &s, schema, clock, &mut report)?;
        Ok((s, report))
    }

    fn unit_pass(
        &self,
        question: &str,
        sql: &str,
        schema: &SchemaContext,
        report: &mut GuardrailReport,
    ) -> Result<String, SqlError> {
        let terms = text::index_terms(question);
        let wanted: Vec<&UnitConversion> =
            self.conversions.iter().filter(|c| c.asked_in(&terms)).collect();
        if wanted.is_empty() {
            return Ok(sql.to_string());
        }
        let p = Parsed::new(sql)?;
        let a = analyze(&p);
        let catalog = schema.catalog();
        let mut edits = Vec::new();
        for c in &a.columns {
            if c.star || !matches!(c.clause.as_str(), "SELECT" | "WHERE" | "HAVING" | "ON") {
                continue;
            }
            let Some((conv, table, col)) = a.resolve(c, &catalog).into_iter().find_map(|(t, col)| {
                let unit = schema.column(&t, &col)?.unit.clone()?;
                wanted
                    .iter()
                    .find(|w| w.is_from(&unit) && !w.is_from(&w.to))
                    .map(|w| (*w, t, col))
            }) else {
                continue;
            };
            let converted = p.is_punct(c.tok + 1, "/")
                && p.at(c.tok + 2).is_some_and(|t| {
                    t.kind == TokKind::Number
                        && t.text(sql).parse::<f64>().is_ok_and(|v| (v - conv.divisor).abs() < 1e-9)
                });
            if converted {
                continue;
            }
            let (start, end) = ref_range(&p, c);
            let first = c.qual_tok.unwrap_or(c.tok);
            let bare = c.clause == "SELECT"
                && (first == 0
                    || p.is_punct(first - 1, ",")
                    || p.is_kw(first - 1, "SELECT")
                    || p.is_kw(first - 1, "DISTINCT"))
                && (c.tok + 1 >= p.len() || p.is_punct(c.tok + 1, ",") || p.is_kw(c.tok + 1, "FROM"));
            let mut text = format!("{}/{}", &sql[start..end], conv.divisor);
            if bare {
                text.push_str(&format!(" AS {col}_{}", conv.to));
            }
            report.add(
                GuardrailKind::UnitConversion,
                format!("{table}.{col} converted from {} to {} (divided by {})", conv.from, conv.to, conv.divisor),
            );
            edits.push(Edit { start, end, text });
        }
        Ok(splice(sql, edits))
    }
}

/// Applies the default guardrails.
pub fn apply_guardrails(
    question: &str,
    sql: &str,
    schema: &SchemaContext,
    clock: &dyn Clock,
) -> Result<(String, GuardrailReport), SqlError> {
    Guardrails::default().apply(question, sql, schema, clock)
}

/// `'%a%b%'` for a literal with at least two alphanumeric parts.
pub fn fuzzy_pattern(literal: &str) -> Option<String> {
    let parts: Vec<String> = literal
        .split(|c: char| !c.is_alphanumeric())
        .filter(|p| !p.is_empty())
        .map(str::to_lowercase)
        .collect();
    (parts.len() >= 2).then(|| format!("%{}%", parts.join("%")))
}

fn fuzzy_pass(sql: &str, schema: &SchemaContext, report: &mut GuardrailReport) -> Result<String, SqlError> {
    let p = Parsed::new(sql)?;
    let a = analyze(&p);
    let catalog = schema.catalog();
    let mut edits = Vec::new();
    for c in &a.columns {
        if c.star || !p.is_punct(c.tok + 1, "=") {
            continue;
        }
        let Some(lit) = p.at(c.tok + 2).filter(|t| t.kind == TokKind::Str) else {
            continue;
        };
        let resolved = a.resolve(c, &catalog);
        let Some((table, col)) = resolved.into_iter().find(|(t, col)| {
            schema
                .column(t, col)
                .is_some_and(|ci| is_text_type(&ci.sql_type))
        }) else {
            continue;
        };
        let value = sql::unquote_literal(lit.text(sql));
        let Some(pattern) = fuzzy_pattern(&value) else {
            continue;
        };
        let (start, _) = ref_range(&p, c);
        let (rs, re) = ref_range(&p, c);
        edits.push(Edit {
            start,
            end: lit.end,
            text: format!("LOWER({}) LIKE {}", &sql[rs..re], sql::quote_literal(&pattern)),
        });
        report.add(
            GuardrailKind::FuzzyMatch,
            format!("{table}.{col} = '{value}' relaxed to a case-insensitive match on '{pattern}'"),
        );
    }
    Ok(splice(sql, edits))
}

const TAIL_CLAUSES: &[&str] = &["GROUP", "HAVING", "ORDER", "LIMIT", "WINDOW", "OFFSET", "FETCH"];

fn date_pass(
    question: &str,
    sql: &str,
    schema: &SchemaContext,
    clock: &dyn Clock,
    report: &mut GuardrailReport,
) -> Result<String, SqlError> {
    let Some((n, unit)) = relative_range(question) else {
        return Ok(sql.to_string());
    };
    let p = Parsed::new(sql)?;
    let a = analyze(&p);
    let catalog = schema.catalog();
    let bases = a.base_tables(&catalog);

    let referenced = a.columns.iter().find_map(|c| {
        a.resolve(c, &catalog).into_iter().find(|(t, col)| {
            schema
                .column(t, col)
                .is_some_and(|ci| is_temporal_type(&ci.sql_type))
        })
    });
    let first_temporal = || {
        bases.iter().find_map(|t| {
            schema.table(t)?.columns.iter().find_map(|c| {
                is_temporal_type(&c.sql_type).then(|| (t.clone(), c.name.to_lowercase()))
            })
        })
    };
    let Some((table, column)) = referenced.or_else(first_temporal) else {
        return Ok(sql.to_string());
    };
    let ty = schema.column(&table, &column).map(|c| c.sql_type.to_ascii_uppercase()).unwrap_or_default();
    let fmt = if ty.contains("TIME") { "%Y-%m-%d %H:%M:%S" } else { "%Y-%m-%d" };
    let now = clock.now();
    let Some(lower) = subtract(now, n, &unit) else {
        return Ok(sql.to_string());
    };
    let (lo, hi) = (lower.format(fmt).to_string(), now.format(fmt).to_string());

    let qualifier = if a.tables.len() > 1 {
        let t = a.tables.iter().find(|t| t.name == table);
        format!("{}.", t.and_then(|t| t.alias.clone()).unwrap_or_else(|| table.clone()))
    } else {
        String::new()
    };
    let pred = format!("{qualifier}{column} >= '{lo}' AND {qualifier}{column} <= '{hi}'");
    let bound = DateBound {
        table: table.clone(),
        column: column.clone(),
        lower: lo.clone(),
        upper: hi.clone(),
    };
    if sql.contains(&pred) {
        return Ok(sql.to_string());
    }

    let depths = p.depths()?;
    let top = |k: usize, kw: &str| depths[k] == 0 && p.is_kw(k, kw);
    if (0..p.len()).any(|k| top(k, "UNION") || top(k, "EXCEPT") || top(k, "INTERSECT")) {
        return Ok(sql.to_string());
    }
    let Some(select) = (0..p.len()).rev().find(|&k| top(k, "SELECT")) else {
        return Ok(sql.to_string());
    };
    let after = |kws: &[&str], from: usize| {
        (from..p.len()).find(|&k| depths[k] == 0 && kws.iter().any(|kw| p.is_kw(k, kw)))
    };
    let Some(from) = after(&["FROM"], select) else {
        return Ok(sql.to_string());
    };
    let mut end = p.len();
    while end > 0 && p.is_punct(end - 1, ";") {
        end -= 1;
    }
    let tail = after(TAIL_CLAUSES, from).filter(|&k| k < end);

    let mut edits = Vec::new();
    if let Some(w) = after(&["WHERE"], from).filter(|&k| tail.is_none_or(|t| k < t)) {
        let cond_end = tail.unwrap_or(end);
        if w + 1 >= cond_end {
            return Ok(sql.to_string());
        }
        edits.push(Edit {
            start: p.at(w + 1).unwrap().start,
            end: p.at(w + 1).unwrap().start,
            text: "(".into(),
        });
        let last = p.at(cond_end - 1).unwrap().end;
        edits.push(Edit {
            start: last,
            end: last,
            text: format!(") AND {pred}"),
        });
    } else if let Some(t) = tail {
        let at = p.at(t).unwrap().start;
        edits.push(Edit {
            start: at,
            end: at,
            text: format!("WHERE {pred} "),
        });
    } else {
        let at = p.at(end - 1).unwrap().end;
        edits.push(Edit {
            start: at,
            end: at,
            text: format!(" WHERE {pred}"),
        });
    }
    report.add(
        GuardrailKind::DateBound,
        format!("{table}.{column} bounded to [{lo}, {hi}] for \"last {n} {unit}(s)\""),
    );
    report.date_bounds.push(bound);
    Ok(splice(sql, edits))
}

/// Query counting rows dated after the bound's upper end.
pub fn future_rows_probe(bound: &DateBound) -> String {
    format!(
        "SELECT COUNT(*) AS future_rows FROM {} WHERE {} > {}",
        bound.table,
        bound.column,
        sql::quote_literal(&bound.upper)
    )
}
