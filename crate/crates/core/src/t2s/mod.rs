//! Text-to-SQL: prompt construction, validation, guardrails and a bounded
//! self-correcting retry loop.
//!
//! Every generated statement passes through the same gate before it reaches
//! an executor: statement classification, guardrail rewrites, column
//! authorization, a dry run and finally execution. Classification and
//! authorization failures are terminal and never touch the executor.

pub mod chart;
pub mod executor;
pub mod fixture;
pub mod guardrails;
pub mod mock;
pub mod sql;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::LazyLock;

pub use chart::{decide_chart, ChartDecision, ChartKind};
pub use executor::{ExecError, Executor, OfflineExecutor, RecordingExecutor, SqliteExecutor};
pub use guardrails::{
    apply_guardrails, Clock, DateBound, FixedClock, GuardrailKind, GuardrailReport, Guardrails,
    SystemClock, UnitConversion,
};
pub use sql::{check_read_only, ColumnCatalog, SqlError};

use crate::providers::Generator;
use sql::{analyze, Parsed, TokKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    #[default]
    Generic,
    MysqlLike,
    BigqueryLike,
}

impl Dialect {
    pub fn as_str(self) -> &'static str {
        match self {
            Dialect::Generic => "generic",
            Dialect::MysqlLike => "mysql-like",
            Dialect::BigqueryLike => "bigquery-like",
        }
    }

    fn quoting_note(self) -> &'static str {
        match self {
            Dialect::Generic => "quote identifiers with double quotes",
            Dialect::MysqlLike => "quote identifiers with backticks",
            Dialect::BigqueryLike => "quote identifiers with backticks; use standard SQL",
        }
    }
}

impl std::fmt::Display for Dialect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "generic" | "sqlite" => Ok(Dialect::Generic),
            "mysql-like" | "mysql" => Ok(Dialect::MysqlLike),
            "bigquery-like" | "bigquery" => Ok(Dialect::BigqueryLike),
            other => Err(format!("unknown dialect {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub sql_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

/// Invariant: every sample row has one value per column and there are at
/// most three of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnInfo>,
    #[serde(default)]
    pub sample_rows: Vec<Vec<Value>>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&ColumnInfo> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

/// What the SQL generator may see. `authorized_columns` holds lowercase
/// `table.column` keys and is a subset of the schema's columns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SchemaContext {
    pub dialect: Dialect,
    pub tables: Vec<TableSchema>,
    pub authorized_columns: BTreeSet<String>,
}

pub const MAX_SAMPLE_ROWS: usize = 3;

impl SchemaContext {
    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn column(&self, table: &str, column: &str) -> Option<&ColumnInfo> {
        self.table(table)?.column(column)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Lowercase table → lowercase column names.
    pub fn catalog(&self) -> ColumnCatalog {
        self.tables
            .iter()
            .map(|t| {
                (
                    t.name.to_lowercase(),
                    t.columns.iter().map(|c| c.name.to_lowercase()).collect(),
                )
            })
            .collect()
    }

    pub fn is_authorized(&self, table: &str, column: &str) -> bool {
        self.authorized_columns
            .contains(&format!("{}.{}", table.to_lowercase(), column.to_lowercase()))
    }

    pub fn table_names(&self) -> Vec<String> {
        self.tables.iter().map(|t| t.name.clone()).collect()
    }

    /// Checks the sample-row and authorization invariants.
    pub fn validate(&self) -> Result<(), String> {
        let catalog = self.catalog();
        for t in &self.tables {
            if t.sample_rows.len() > MAX_SAMPLE_ROWS {
                return Err(format!("{} has {} sample rows", t.name, t.sample_rows.len()));
            }
            if let Some(r) = t.sample_rows.iter().find(|r| r.len() != t.columns.len()) {
                return Err(format!(
                    "{} sample row has {} values for {} columns",
                    t.name,
                    r.len(),
                    t.columns.len()
                ));
            }
        }
        for key in &self.authorized_columns {
            let known = key
                .split_once('.')
                .is_some_and(|(t, c)| catalog.get(t).is_some_and(|cols| cols.iter().any(|x| x == c)));
            if !known {
                return Err(format!("authorized column {key} is not in the schema"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.eq_ignore_ascii_case(name))
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "NULL".into(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    Ok,
    SyntaxError,
    Unauthorized,
    NotReadOnly,
    EmptyResult,
    ExecutionError,
}

impl Validation {
    /// Failures that end the loop without a retry.
    pub fn is_terminal(self) -> bool {
        matches!(self, Validation::Unauthorized | Validation::NotReadOnly)
    }
}

/// One statement of one round. Invariant: `rows` is present iff
/// `validation == Ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlAttempt {
    pub round: usize,
    /// 1-based position within a multi-statement plan.
    pub step: usize,
    pub sql_text: String,
    pub validation: Validation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<ResultTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T2sFinal {
    Answered,
    FallbackPlaceholder,
    ReformulationSuggested,
    Rejected,
}

/// Invariant: `final_state == Answered` implies the last attempt is `Ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2sResult {
    pub attempts: Vec<SqlAttempt>,
    #[serde(rename = "final")]
    pub final_state: T2sFinal,
    pub table: Option<ResultTable>,
    pub chart: ChartDecision,
    pub narrative: String,
    pub guardrails: GuardrailReport,
    pub warnings: Vec<String>,
    pub hints: Vec<String>,
}

impl T2sResult {
    /// Number of generation rounds used.
    pub fn rounds(&self) -> usize {
        self.attempts.iter().map(|a| a.round).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2sConfig {
    pub max_retries: usize,
    pub row_limit: usize,
    #[serde(flatten)]
    pub guardrails: Guardrails,
}

impl Default for T2sConfig {
    fn default() -> Self {
        Self {
            max_retries: 2,
            row_limit: 1000,
            guardrails: Guardrails::default(),
        }
    }
}

impl T2sConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.row_limit == 0 {
            return Err("t2s.row_limit must be positive".into());
        }
        if let Some(c) = self
            .guardrails
            .conversions
            .iter()
            .find(|c| !(c.divisor.is_finite() && c.divisor != 0.0))
        {
            return Err(format!("conversion {} -> {} has divisor {}", c.from, c.to, c.divisor));
        }
        Ok(())
    }
}

/// Prompt for one generation round. Only authorized columns are shown;
/// sample rows are projected onto them.
pub fn build_prompt(
    schema: &SchemaContext,
    question: &str,
    history: &[String],
    failure: Option<&SqlAttempt>,
    hints: &[String],
) -> String {
    let mut p = String::new();
    p.push_str("Write one read-only SQL SELECT statement that answers the question.\n");
    let _ = writeln!(p, "Dialect: {} ({})", schema.dialect, schema.dialect.quoting_note());
    p.push_str("Tables:\n");
    for t in &schema.tables {
        let visible: Vec<usize> = (0..t.columns.len())
            .filter(|&i| schema.is_authorized(&t.name, &t.columns[i].name))
            .collect();
        if visible.is_empty() {
            continue;
        }
        let cols: Vec<String> = visible
            .iter()
            .map(|&i| {
                let c = &t.columns[i];
                match &c.unit {
                    Some(u) => format!("{} {} [unit: {u}]", c.name, c.sql_type),
                    None => format!("{} {}", c.name, c.sql_type),
                }
            })
            .collect();
        let _ = writeln!(p, "TABLE {} ({})", t.name, cols.join(", "));
        if !t.sample_rows.is_empty() {
            p.push_str("  Sample rows:\n");
            for row in t.sample_rows.iter().take(MAX_SAMPLE_ROWS) {
                let vals: Vec<String> =
                    visible.iter().map(|&i| row.get(i).map_or_else(String::new, cell)).collect();
                let _ = writeln!(p, "  ({})", vals.join(", "));
            }
        }
    }
    if !history.is_empty() {
        p.push_str("Conversation so far:\n");
        for h in history {
            let _ = writeln!(p, "- {h}");
        }
    }
    let _ = writeln!(p, "Question: {question}");
    if let Some(f) = failure {
        p.push_str("Correction:\nThe previous statement failed.\n");
        let _ = writeln!(p, "Failed SQL:\n{}", f.sql_text);
        let _ = writeln!(
            p,
            "Error ({}): {}",
            serde_json::to_value(f.validation).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            f.error_message.as_deref().unwrap_or("none")
        );
    }
    if !hints.is_empty() {
        p.push_str("Known values:\n");
        for h in hints {
            let _ = writeln!(p, "- {h}");
        }
    }
    p.push_str(
        "Reply with the statement in a ```sql block. A question with two parts may use two \
         blocks; their results are joined on the first column they share.\n",
    );
    p
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[ \t]*(?:sql|SQL)?[ \t]*\r?\n(.*?)```").unwrap());

/// SQL statements in a model reply: each fenced block is one plan step; a
/// reply without fences is a single statement.
pub fn extract_sql(reply: &str) -> Vec<String> {
    let blocks: Vec<String> = FENCE
        .captures_iter(reply)
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if !blocks.is_empty() {
        return blocks;
    }
    let body = reply.trim();
    let body = body
        .strip_prefix("SQL:")
        .or_else(|| body.strip_prefix("sql:"))
        .unwrap_or(body)
        .trim();
    vec![body.to_string()]
}

/// Outcome of gating and running one statement.
#[derive(Debug, Clone, PartialEq)]
pub struct Checked {
    pub validation: Validation,
    pub error_message: Option<String>,
    pub table: Option<ResultTable>,
}

impl Checked {
    fn fail(validation: Validation, msg: impl Into<String>) -> Self {
        Self {
            validation,
            error_message: Some(msg.into()),
            table: None,
        }
    }
}

fn classify(sql: &str) -> Result<(), Checked> {
    sql::check_read_only(sql).map_err(|e| {
        let v = if e.is_syntax() {
            Validation::SyntaxError
        } else {
            Validation::NotReadOnly
        };
        Checked::fail(v, e.to_string())
    })
}

fn authorize(sql: &str, schema: &SchemaContext) -> Result<(), Checked> {
    let denied = sql::unauthorized_columns(sql, &schema.catalog(), &schema.authorized_columns)
        .map_err(|e| Checked::fail(Validation::SyntaxError, e.to_string()))?;
    if denied.is_empty() {
        Ok(())
    } else {
        Err(Checked::fail(
            Validation::Unauthorized,
            format!("columns not authorized: {}", denied.join(", ")),
        ))
    }
}

fn exec_failure(e: ExecError) -> Checked {
    match e {
        ExecError::Compile(m) => Checked::fail(Validation::SyntaxError, m),
        other => Checked::fail(Validation::ExecutionError, other.to_string()),
    }
}

/// Classification, authorization, dry run and execution, in that order.
/// The executor is only called once the first two pass. An empty result is
/// reported as `EmptyResult` with the (empty) table attached.
pub fn validate_sql(sql: &str, schema: &SchemaContext, executor: &dyn Executor, row_limit: usize) -> Checked {
    if let Err(c) = classify(sql).and_then(|_| authorize(sql, schema)) {
        return c;
    }
    if let Err(e) = executor.dry_run(sql) {
        return exec_failure(e);
    }
    run_checked(sql, executor, row_limit)
}

fn run_checked(sql: &str, executor: &dyn Executor, row_limit: usize) -> Checked {
    match executor.execute(sql, row_limit) {
        Err(e) => exec_failure(e),
        Ok(t) if t.is_empty() => Checked {
            validation: Validation::EmptyResult,
            error_message: Some("query returned no rows".into()),
            table: Some(t),
        },
        Ok(t) => Checked {
            validation: Validation::Ok,
            error_message: None,
            table: Some(t),
        },
    }
}

pub const MAX_HINT_VALUES: usize = 20;

fn is_text_type(ty: &str) -> bool {
    let t = ty.to_ascii_uppercase();
    t.is_empty() || t.contains("CHAR") || t.contains("TEXT") || t.contains("CLOB")
}

/// Whether the column reference is compared against a string literal, as in
/// `col = 'x'`, `LOWER(col) LIKE 'x'`, `col NOT IN ('a', 'b')`.
fn compared_to_literal(p: &Parsed, c: &sql::ColumnRef) -> bool {
    let first = c.qual_tok.unwrap_or(c.tok);
    let mut k = c.tok + 1;
    if p.is_punct(k, ")")
        && first >= 2
        && p.is_punct(first - 1, "(")
        && (p.is_kw(first - 2, "LOWER") || p.is_kw(first - 2, "UPPER") || p.is_kw(first - 2, "TRIM"))
    {
        k += 1;
    }
    if p.is_kw(k, "NOT") {
        k += 1;
    }
    let is_str = |k: usize| p.at(k).is_some_and(|t| t.kind == TokKind::Str);
    let op = ["=", "<>", "!="].iter().any(|o| p.is_punct(k, o))
        || p.is_kw(k, "LIKE")
        || p.is_kw(k, "ILIKE")
        || p.is_kw(k, "GLOB");
    (op && is_str(k + 1)) || (p.is_kw(k, "IN") && p.is_punct(k + 1, "(") && is_str(k + 2))
}

/// Value hints for text columns that the failed statement filtered on with a
/// literal. Runs `SELECT DISTINCT` per column (at most 20 values each);
/// columns that are not authorized, and failing lookups, are skipped.
pub fn introspect_on_empty(failed: &SqlAttempt, schema: &SchemaContext, executor: &dyn Executor) -> Vec<String> {
    if failed.validation != Validation::EmptyResult {
        return Vec::new();
    }
    let Ok(p) = Parsed::new(&failed.sql_text) else {
        return Vec::new();
    };
    let a = analyze(&p);
    let catalog = schema.catalog();
    let mut seen = BTreeSet::new();
    let mut hints = Vec::new();
    for c in &a.columns {
        if c.star || !matches!(c.clause.as_str(), "WHERE" | "HAVING" | "ON") || !compared_to_literal(&p, c) {
            continue;
        }
        for (t, col) in a.resolve(c, &catalog) {
            let text_col = schema.column(&t, &col).is_some_and(|ci| is_text_type(&ci.sql_type));
            if !text_col || !schema.is_authorized(&t, &col) || !seen.insert((t.clone(), col.clone())) {
                continue;
            }
            let q = format!("SELECT DISTINCT {col} FROM {t} ORDER BY {col} LIMIT {MAX_HINT_VALUES}");
            let Ok(table) = executor.execute(&q, MAX_HINT_VALUES) else {
                continue;
            };
            let values: Vec<String> = table.rows.iter().filter_map(|r| r.first()).map(cell).collect();
            if !values.is_empty() {
                hints.push(format!("{t}.{col} ∈ {{{}}}", values.join(", ")));
            }
        }
    }
    hints
}

/// Left join of `right` onto `left` on the first column name they share
/// (case-insensitive). `None` when they share no column.
pub fn merge_tables(left: &ResultTable, right: &ResultTable) -> Option<(String, ResultTable)> {
    let (li, ri) = left
        .columns
        .iter()
        .enumerate()
        .find_map(|(li, c)| right.column_index(c).map(|ri| (li, ri)))?;
    let key = left.columns[li].clone();
    let mut columns = left.columns.clone();
    let right_keep: Vec<usize> = (0..right.columns.len()).filter(|&i| i != ri).collect();
    columns.extend(right_keep.iter().map(|&i| right.columns[i].clone()));
    let mut index: BTreeMap<String, Vec<&Vec<Value>>> = BTreeMap::new();
    for r in &right.rows {
        if let Some(v) = r.get(ri) {
            index.entry(v.to_string()).or_default().push(r);
        }
    }
    let mut rows = Vec::new();
    for l in &left.rows {
        let matches = l.get(li).and_then(|v| index.get(&v.to_string()));
        match matches {
            Some(rs) => {
                for r in rs {
                    let mut row = l.clone();
                    row.extend(right_keep.iter().map(|&i| r.get(i).cloned().unwrap_or(Value::Null)));
                    rows.push(row);
                }
            }
            None => {
                let mut row = l.clone();
                row.extend(right_keep.iter().map(|_| Value::Null));
                rows.push(row);
            }
        }
    }
    Some((key, ResultTable { columns, rows }))
}

/// Everything `run_with_retry` calls out to.
#[derive(Clone, Copy)]
pub struct T2sContext<'a> {
    pub schema: &'a SchemaContext,
    pub generator: &'a dyn Generator,
    pub executor: &'a dyn Executor,
    pub clock: &'a dyn Clock,
}

struct RoundOutcome {
    attempts: Vec<SqlAttempt>,
    table: Option<ResultTable>,
    empty_columns: Option<Vec<String>>,
    merge_note: Option<String>,
}

fn run_round(
    round: usize,
    question: &str,
    statements: Vec<String>,
    ctx: &T2sContext,
    config: &T2sConfig,
    report: &mut GuardrailReport,
    warnings: &mut Vec<String>,
) -> RoundOutcome {
    let mut out = RoundOutcome {
        attempts: Vec::new(),
        table: None,
        empty_columns: None,
        merge_note: None,
    };
    let mut tables = Vec::new();
    for (i, raw) in statements.into_iter().enumerate() {
        let step = i + 1;
        let mut attempt = SqlAttempt {
            round,
            step,
            sql_text: raw.clone(),
            validation: Validation::Ok,
            error_message: None,
            rows: None,
        };
        let checked = match classify(&raw) {
            Err(c) => c,
            Ok(()) => {
                let (rewritten, r) = config
                    .guardrails
                    .apply(question, &raw, ctx.schema, ctx.clock)
                    .unwrap_or_else(|_| (raw.clone(), GuardrailReport::default()));
                attempt.sql_text = rewritten.clone();
                let bounds = r.date_bounds.clone();
                report.merge(r);
                match authorize(&rewritten, ctx.schema) {
                    Err(c) => c,
                    Ok(()) => match ctx.executor.dry_run(&rewritten) {
                        Err(e) => exec_failure(e),
                        Ok(()) => {
                            for b in &bounds {
                                probe_future_rows(b, ctx.executor, report, warnings);
                            }
                            run_checked(&rewritten, ctx.executor, config.row_limit)
                        }
                    },
                }
            }
        };
        attempt.validation = checked.validation;
        attempt.error_message = checked.error_message;
        match checked.validation {
            Validation::Ok => {
                attempt.rows = checked.table.clone();
                tables.push(checked.table.unwrap_or_default());
                out.attempts.push(attempt);
            }
            Validation::EmptyResult => {
                out.empty_columns = checked.table.map(|t| t.columns);
                out.attempts.push(attempt);
                return out;
            }
            _ => {
                out.attempts.push(attempt);
                return out;
            }
        }
    }
    let mut merged = tables.remove(0);
    for next in tables {
        match merge_tables(&merged, &next) {
            Some((key, t)) => {
                out.merge_note = Some(format!("results of the plan steps were joined on {key}"));
                merged = t;
            }
            None => {
                let last = out.attempts.last_mut().expect("one attempt per table");
                last.validation = Validation::ExecutionError;
                last.error_message = Some("plan steps share no column to join on".into());
                last.rows = None;
                return out;
            }
        }
    }
    out.table = Some(merged);
    out
}

fn probe_future_rows(
    bound: &DateBound,
    executor: &dyn Executor,
    report: &mut GuardrailReport,
    warnings: &mut Vec<String>,
) {
    let Ok(t) = executor.execute(&guardrails::future_rows_probe(bound), 1) else {
        return;
    };
    let n = t.rows.first().and_then(|r| r.first()).and_then(Value::as_i64).unwrap_or(0);
    if n > 0 {
        let msg = format!(
            "{n} row(s) in {}.{} are dated after {} and were excluded",
            bound.table, bound.column, bound.upper
        );
        if !warnings.contains(&msg) {
            report.add(GuardrailKind::DateBound, format!("anomaly: {msg}"));
            warnings.push(msg);
        }
    }
}

fn narrate(table: &ResultTable, report: &GuardrailReport, merge_note: Option<&str>) -> String {
    let mut s = format!(
        "The query returned {} row{}",
        table.rows.len(),
        if table.rows.len() == 1 { "" } else { "s" }
    );
    if !table.columns.is_empty() {
        let _ = write!(s, " with columns {}", table.columns.join(", "));
    }
    s.push('.');
    if let Some(first) = table.rows.first() {
        let pairs: Vec<String> = table
            .columns
            .iter()
            .zip(first)
            .map(|(c, v)| format!("{c} = {}", cell(v)))
            .collect();
        let _ = write!(s, " First row: {}.", pairs.join(", "));
    }
    if let Some(m) = merge_note {
        let _ = write!(s, " The {m}.");
    }
    for n in &report.notes {
        let _ = write!(s, " Note: {}.", n.note);
    }
    s
}

/// Generate, guard, validate and execute with at most `max_retries + 1`
/// generation calls. Never panics on model output: an unusable reply is a
/// syntax error for that round.
pub fn run_with_retry(question: &str, history: &[String], ctx: &T2sContext, config: &T2sConfig) -> T2sResult {
    let mut attempts: Vec<SqlAttempt> = Vec::new();
    let mut report = GuardrailReport::default();
    let mut warnings = Vec::new();
    let mut hints: Vec<String> = Vec::new();
    let mut failure: Option<SqlAttempt> = None;
    let mut empty_columns: Option<Vec<String>> = None;

    for round in 1..=config.max_retries + 1 {
        let prompt = build_prompt(ctx.schema, question, history, failure.as_ref(), &hints);
        let statements = match ctx.generator.generate(&prompt) {
            Ok(reply) => extract_sql(&reply),
            Err(e) => {
                let a = SqlAttempt {
                    round,
                    step: 1,
                    sql_text: String::new(),
                    validation: Validation::ExecutionError,
                    error_message: Some(format!("generation failed: {e}")),
                    rows: None,
                };
                failure = Some(a.clone());
                attempts.push(a);
                continue;
            }
        };
        let outcome = run_round(round, question, statements, ctx, config, &mut report, &mut warnings);
        let last = outcome.attempts.last().cloned().expect("a round records at least one attempt");
        attempts.extend(outcome.attempts);
        if let Some(table) = outcome.table {
            let hint = chart::hint_from_question(question);
            let chart = decide_chart(&table, hint, question);
            let narrative = narrate(&table, &report, outcome.merge_note.as_deref());
            return T2sResult {
                attempts,
                final_state: T2sFinal::Answered,
                table: Some(table),
                chart,
                narrative,
                guardrails: report,
                warnings,
                hints,
            };
        }
        if last.validation.is_terminal() {
            let kind = if last.validation == Validation::NotReadOnly {
                GuardrailKind::ReadonlyReject
            } else {
                GuardrailKind::ColumnAuthorization
            };
            let msg = last.error_message.clone().unwrap_or_default();
            report.add(kind, msg.clone());
            return T2sResult {
                attempts,
                final_state: T2sFinal::Rejected,
                table: None,
                chart: ChartDecision::none("query rejected"),
                narrative: format!("The generated query was rejected and not executed: {msg}."),
                guardrails: report,
                warnings,
                hints,
            };
        }
        if last.validation == Validation::EmptyResult {
            empty_columns = outcome.empty_columns.or(empty_columns);
            for h in introspect_on_empty(&last, ctx.schema, ctx.executor) {
                if !hints.contains(&h) {
                    hints.push(h);
                }
            }
        }
        failure = Some(last);
    }

    let rounds = config.max_retries + 1;
    let last = attempts.last().map(|a| a.validation);
    if last == Some(Validation::SyntaxError) {
        let tables = ctx.schema.table_names().join(", ");
        return T2sResult {
            attempts,
            final_state: T2sFinal::ReformulationSuggested,
            table: None,
            chart: ChartDecision::none("no result"),
            narrative: format!(
                "The question could not be turned into valid SQL after {rounds} attempt(s). \
                 Try rephrasing it with the table or column names involved (available tables: {tables})."
            ),
            guardrails: report,
            warnings,
            hints,
        };
    }
    let placeholder = ResultTable {
        columns: empty_columns.unwrap_or_else(|| vec!["result".into()]),
        rows: Vec::new(),
    };
    T2sResult {
        attempts,
        final_state: T2sFinal::FallbackPlaceholder,
        table: Some(placeholder),
        chart: ChartDecision::none("no rows to plot; summarised as text"),
        narrative: format!(
            "No matching rows were found after {rounds} attempt(s); an empty table is shown in place of a result."
        ),
        guardrails: report,
        warnings,
        hints,
    }
}

#[cfg(test)]
mod tests {
    use super::fixture::*;
    use super::*;
    use crate::providers::mock::ScriptedLlm;

    fn schema(exec: &SqliteExecutor) -> SchemaContext {
        fixture_schema(exec, Dialect::Generic).unwrap()
    }

    fn fenced(sql: &str) -> String {
        format!("```sql\n{sql}\n```")
    }

    #[test]
    fn prompt_shows_schema_and_hides_withheld_columns() {
        let exec = fixture_executor().unwrap();
        let s = schema(&exec);
        let p = build_prompt(&s, "how many orders?", &[], None, &[]);
        assert!(p.contains("Dialect: generic"));
        assert!(p.contains("TABLE orders (order_id INTEGER"));
        assert!(p.contains("distance REAL [unit: metres]"));
        assert!(p.contains("Question: how many orders?"));
        assert!(!p.contains("email"));
        assert!(!p.contains("ana@example.com"));
        assert!(!p.contains("Correction"));
    }

    #[test]
    fn prompt_carries_failed_sql_verbatim() {
        let exec = fixture_executor().unwrap();
        let s = schema(&exec);
        let failed = SqlAttempt {
            round: 1,
            step: 1,
            sql_text: "SELEC * FROMM orders".into(),
            validation: Validation::SyntaxError,
            error_message: Some("near \"SELEC\": syntax error".into()),
            rows: None,
        };
        let p = build_prompt(&s, "q", &[], Some(&failed), &[]);
        let corr = p.find("Correction:").unwrap();
        assert!(p[corr..].contains("SELEC * FROMM orders"));
        assert!(p[corr..].contains("near \"SELEC\": syntax error"));
    }

    #[test]
    fn prompt_without_samples_omits_sample_block() {
        let s = SchemaContext {
            dialect: Dialect::MysqlLike,
            tables: vec![TableSchema {
                name: "t".into(),
                columns: vec![ColumnInfo { name: "a".into(), sql_type: "INT".into(), unit: None }],
                sample_rows: vec![],
            }],
            authorized_columns: BTreeSet::from(["t.a".to_string()]),
        };
        let p = build_prompt(&s, "q", &[], None, &[]);
        assert!(!p.contains("Sample rows"));
        assert!(p.contains("Dialect: mysql-like"));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn extract_sql_handles_fences_and_bare_text() {
        assert_eq!(extract_sql("SQL: SELECT 1"), vec!["SELECT 1"]);
        assert_eq!(
            extract_sql("plan:\n```sql\nSELECT 1\n```\nthen\n```sql\nSELECT 2\n```"),
            vec!["SELECT 1", "SELECT 2"]
        );
    }

    #[test]
    fn validate_orders_checks() {
        let exec = RecordingExecutor::new(fixture_executor().unwrap());
        let s = schema(exec.inner());
        let v = |q: &str| validate_sql(q, &s, &exec, 100).validation;
        assert_eq!(v("DROP TABLE users"), Validation::NotReadOnly);
        assert_eq!(v("SELECT email FROM customers"), Validation::Unauthorized);
        assert_eq!(exec.calls(), 0);
        assert_eq!(
            v("SELECT * FROM orders WHERE status LIKE '%pending%'"),
            Validation::EmptyResult
        );
        assert_eq!(v("SELECT nope FROM orders"), Validation::SyntaxError);
        assert_eq!(v("SELECT COUNT(*) FROM orders"), Validation::Ok);
        assert_eq!(
            validate_sql("SELECT 1", &s, &OfflineExecutor, 1).validation,
            Validation::ExecutionError
        );
    }

    #[test]
    fn introspection_lists_status_values() {
        let exec = fixture_executor().unwrap();
        let s = schema(&exec);
        let failed = SqlAttempt {
            round: 1,
            step: 1,
            sql_text: "SELECT * FROM orders WHERE status = 'pending' AND total > 3".into(),
            validation: Validation::EmptyResult,
            error_message: None,
            rows: None,
        };
        assert_eq!(
            introspect_on_empty(&failed, &s, &exec),
            vec!["orders.status ∈ {closed, open, shipped}"]
        );
        let numeric = SqlAttempt {
            sql_text: "SELECT * FROM orders WHERE total > 10000".into(),
            ..failed.clone()
        };
        assert!(introspect_on_empty(&numeric, &s, &exec).is_empty());
        let two = SqlAttempt {
            sql_text: "SELECT * FROM shipments WHERE origin = 'X' OR LOWER(destination) LIKE 'y%'".into(),
            ..failed.clone()
        };
        let h = introspect_on_empty(&two, &s, &exec);
        assert_eq!(h.len(), 2);
        assert!(h[0].starts_with("shipments.origin ∈ {Bergen, Oslo"));
        let withheld = SqlAttempt {
            sql_text: "SELECT country FROM customers WHERE email = 'x'".into(),
            ..failed
        };
        assert!(introspect_on_empty(&withheld, &s, &exec).is_empty());
    }

    #[test]
    fn empty_result_recovers_with_introspected_values() {
        let exec = RecordingExecutor::new(fixture_executor().unwrap());
        let s = schema(exec.inner());
        let llm = ScriptedLlm::new([
            fenced("SELECT order_id FROM orders WHERE status LIKE '%pending%'"),
            fenced("SELECT order_id FROM orders WHERE status = 'open'"),
        ]);
        let clock = FixedClock(fixture_now());
        let ctx = T2sContext { schema: &s, generator: &llm, executor: &exec, clock: &clock };
        let r = run_with_retry("which orders are pending?", &[], &ctx, &T2sConfig::default());
        assert_eq!(r.final_state, T2sFinal::Answered);
        assert_eq!(r.attempts.len(), 2);
        assert_eq!(r.attempts[0].validation, Validation::EmptyResult);
        assert!(llm.prompts()[1].contains("orders.status ∈ {closed, open, shipped}"));
        assert_eq!(r.table.unwrap().rows.len(), 5);
        assert!(exec.statements().iter().all(|q| check_read_only(q).is_ok()));
    }

    #[test]
    fn persistent_syntax_errors_suggest_reformulation() {
        let exec = fixture_executor().unwrap();
        let s = schema(&exec);
        let llm = ScriptedLlm::constant("SELEC oops FROMM");
        let clock = FixedClock(fixture_now());
        let ctx = T2sContext { schema: &s, generator: &llm, executor: &exec, clock: &clock };
        let r = run_with_retry("q", &[], &ctx, &T2sConfig::default());
        assert_eq!(llm.calls(), 3);
        assert_eq!(r.final_state, T2sFinal::ReformulationSuggested);
        assert!(r.attempts.iter().all(|a| a.rows.is_none()));
    }

    #[test]
    fn write_statement_is_rejected_without_retry() {
        let exec = RecordingExecutor::new(fixture_executor().unwrap());
        let s = schema(exec.inner());
        let llm = ScriptedLlm::constant("UPDATE orders SET status = 'x'");
        let clock = FixedClock(fixture_now());
        let ctx = T2sContext { schema: &s, generator: &llm, executor: &exec, clock: &clock };
        let r = run_with_retry("q", &[], &ctx, &T2sConfig::default());
        assert_eq!(r.final_state, T2sFinal::Rejected);
        assert_eq!(llm.calls(), 1);
        assert_eq!(exec.calls(), 0);
        assert!(r.guardrails.has(GuardrailKind::ReadonlyReject));
    }

    #[test]
    fn merge_is_a_left_join_on_first_shared_column() {
        let l = ResultTable {
            columns: vec!["album".into(), "revenue".into()],
            rows: vec![vec!["A".into(), 3.into()], vec!["B".into(), 2.into()]],
        };
        let r = ResultTable {
            columns: vec!["Album".into(), "country".into()],
            rows: vec![vec!["A".into(), "Brazil".into()]],
        };
        let (key, m) = merge_tables(&l, &r).unwrap();
        assert_eq!(key, "album");
        assert_eq!(m.columns, vec!["album", "revenue", "country"]);
        assert_eq!(m.rows[1], vec![Value::from("B"), 2.into(), Value::Null]);
    }

    #[test]
    fn dialect_round_trips() {
        for d in [Dialect::Generic, Dialect::MysqlLike, Dialect::BigqueryLike] {
            assert_eq!(d.as_str().parse::<Dialect>().unwrap(), d);
            assert_eq!(serde_json::to_value(d).unwrap(), Value::from(d.as_str()));
        }
    }
}
