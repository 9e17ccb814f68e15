//! A rule-based SQL generator for offline use. It reads the schema block and
//! question from a [`build_prompt`](super::build_prompt) prompt and writes a
//! simple single-table query: an optional aggregate over a metric column,
//! optionally grouped by a column named after "by".

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::providers::{Generator, ProviderError};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq)]
struct PromptTable {
    name: String,
    columns: Vec<(String, String)>,
}

fn parse_tables(prompt: &str) -> Vec<PromptTable> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("TABLE "))
        .filter_map(|rest| {
            let (name, cols) = rest.split_once(" (")?;
            let cols = cols.strip_suffix(')')?;
            let columns = cols
                .split(", ")
                .filter_map(|c| {
                    let mut parts = c.split_whitespace();
                    let name = parts.next()?.to_string();
                    let ty = parts.next().unwrap_or("").to_string();
                    Some((name, ty))
                })
                .collect();
            Some(PromptTable {
                name: name.trim().to_string(),
                columns,
            })
        })
        .collect()
}

fn singular(w: &str) -> &str {
    w.strip_suffix('s').unwrap_or(w)
}

fn mentions(terms: &[String], name: &str) -> bool {
    let name = name.to_lowercase();
    let parts: Vec<&str> = name.split('_').collect();
    if parts.len() > 1 {
        return terms
            .windows(parts.len())
            .any(|w| w.iter().zip(&parts).all(|(t, p)| singular(t) == singular(p)));
    }
    terms.iter().any(|t| singular(t) == singular(&name))
}

fn is_numeric(ty: &str) -> bool {
    let t = ty.to_ascii_uppercase();
    ["INT", "REAL", "NUM", "DEC", "FLOAT", "DOUBLE"].iter().any(|k| t.contains(k))
}

fn is_temporal(ty: &str) -> bool {
    let t = ty.to_ascii_uppercase();
    t.contains("DATE") || t.contains("TIME")
}

const METRIC_WORDS: &[&str] = &["revenue", "sales", "amount", "spend", "value"];
const MONEY_COLUMNS: &[&str] = &["total", "amount", "price", "unit_price", "revenue"];

/// Writes SQL from the schema shown in the prompt. Deterministic.
#[derive(Debug, Default)]
pub struct SchemaSqlLlm {
    calls: AtomicUsize,
}

impl SchemaSqlLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// SQL for `question` over the tables listed in `prompt`, if any.
pub fn template_sql(prompt: &str) -> Option<String> {
    let tables = parse_tables(prompt);
    let question = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or("");
    let terms = text::index_terms(question);
    let has = |w: &str| terms.iter().any(|t| t == w);

    let table = tables
        .iter()
        .find(|t| mentions(&terms, &t.name))
        .or_else(|| {
            tables
                .iter()
                .max_by_key(|t| {
                    let hits = t.columns.iter().filter(|(c, _)| mentions(&terms, c)).count();
                    (hits, std::cmp::Reverse(t.name.clone()))
                })
                .filter(|t| t.columns.iter().any(|(c, _)| mentions(&terms, c)))
        })
        .or_else(|| {
            // A metric word with no named table: prefer a table holding a
            // money column, and among those one with a date to group by.
            terms.iter().any(|t| METRIC_WORDS.contains(&t.as_str())).then(|| {
                tables
                    .iter()
                    .filter(|t| t.columns.iter().any(|(c, ty)| is_numeric(ty) && MONEY_COLUMNS.contains(&c.as_str())))
                    .max_by_key(|t| t.columns.iter().any(|(_, ty)| is_temporal(ty)))
            })
            .flatten()
        })
        .or_else(|| tables.first())?;
    let cols = &table.columns;
    let col = |pred: &dyn Fn(&(String, String)) -> bool| cols.iter().find(|c| pred(c)).cloned();

    let group = terms
        .iter()
        .position(|t| t == "by" || t == "per" || t == "each")
        .and_then(|i| terms.get(i + 1))
        .and_then(|w| {
            if matches!(w.as_str(), "month" | "year" | "day") {
                let (date, _) = col(&|(_, ty)| is_temporal(ty))?;
                let width = match w.as_str() {
                    "year" => 4,
                    "month" => 7,
                    _ => 10,
                };
                return Some((format!("substr({date}, 1, {width})"), w.clone()));
            }
            let (c, _) = col(&|(c, _)| singular(&c.to_lowercase()) == singular(w))?;
            Some((c.clone(), c))
        });

    let metric = col(&|(c, ty)| is_numeric(ty) && mentions(&terms, c) && !c.ends_with("_id"))
        .or_else(|| {
            terms
                .iter()
                .any(|t| METRIC_WORDS.contains(&t.as_str()))
                .then(|| {
                    col(&|(c, ty)| {
                        is_numeric(ty)
                            && MONEY_COLUMNS.contains(&c.as_str())
                    })
                })
                .flatten()
        });
    let agg = if has("average") || has("avg") || has("mean") {
        Some("AVG")
    } else if has("total") || has("sum") || terms.iter().any(|t| METRIC_WORDS.contains(&t.as_str())) {
        Some("SUM")
    } else if has("maximum") || has("max") || has("highest") || has("largest") || has("longest") {
        Some("MAX")
    } else if has("minimum") || has("min") || has("lowest") || has("smallest") || has("shortest") {
        Some("MIN")
    } else if has("many") || has("count") || has("number") {
        Some("COUNT")
    } else {
        None
    };
    let measure = match (agg, &metric) {
        (Some("COUNT"), _) | (Some(_), None) => "COUNT(*) AS n".to_string(),
        (Some(a), Some((m, _))) => format!("{a}({m}) AS {}_{m}", a.to_lowercase()),
        (None, _) => String::new(),
    };
    let name = &table.name;
    let sql = match (group, measure.is_empty()) {
        (Some((expr, alias)), _) => {
            let measure = if measure.is_empty() { "COUNT(*) AS n".to_string() } else { measure };
            let head = if expr == alias { expr.clone() } else { format!("{expr} AS {alias}") };
            format!("SELECT {head}, {measure} FROM {name} GROUP BY {expr} ORDER BY {expr}")
        }
        (None, false) => format!("SELECT {measure} FROM {name}"),
        (None, true) => {
            let mentioned: Vec<&str> = cols
                .iter()
                .filter(|(c, _)| mentions(&terms, c))
                .map(|(c, _)| c.as_str())
                .collect();
            let shown: Vec<&str> = if mentioned.is_empty() {
                cols.iter().map(|(c, _)| c.as_str()).collect()
            } else {
                mentioned
            };
            format!("SELECT {} FROM {name} LIMIT 20", shown.join(", "))
        }
    };
    Some(sql)
}

impl Generator for SchemaSqlLlm {
    fn generate(&self, prompt: &str) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match template_sql(prompt) {
            Some(sql) => format!("```sql\n{sql}\n```"),
            None => "-- no table available".to_string(),
        })
    }
}
