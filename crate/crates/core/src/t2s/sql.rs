//! A small, lossless SQL lexer with a statement classifier and a column
//! extractor.
//!
//! The lexer keeps whitespace and comments as tokens, so any rewrite that
//! splices token byte ranges preserves the rest of the statement verbatim.
//! Analysis is not a grammar: it only needs statement type, table references
//! with their aliases, and the column identifiers a statement reads.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SqlError {
    #[error("unterminated {what} starting at byte {offset}")]
    Unterminated { what: &'static str, offset: usize },
    #[error("empty statement")]
    Empty,
    #[error("unbalanced parentheses")]
    Unbalanced,
    #[error("only one statement is allowed")]
    MultipleStatements,
    #[error("statement starts with {0}; only SELECT queries are allowed")]
    NotSelect(String),
    #[error("keyword {0} is not allowed in a read-only query")]
    Forbidden(String),
    #[error("unrecognised statement starting with {0:?}")]
    Unrecognised(String),
}

impl SqlError {
    /// True for errors that make the text unparseable rather than unsafe.
    pub fn is_syntax(&self) -> bool {
        matches!(
            self,
            SqlError::Unterminated { .. }
                | SqlError::Empty
                | SqlError::Unbalanced
                | SqlError::Unrecognised(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokKind {
    Whitespace,
    Comment,
    Word,
    QuotedIdent,
    Str,
    Number,
    Param,
    Punct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tok {
    pub kind: TokKind,
    pub start: usize,
    pub end: usize,
}

impl Tok {
    pub fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.start..self.end]
    }

    pub fn is_trivia(&self) -> bool {
        matches!(self.kind, TokKind::Whitespace | TokKind::Comment)
    }
}

const MULTI_PUNCT: &[&str] = &["<=", ">=", "<>", "!=", "==", "||", "::"];

/// Tokenizes `sql`; concatenating all token texts reproduces the input.
pub fn lex(sql: &str) -> Result<Vec<Tok>, SqlError> {
    let bytes = sql.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let next_char = |i: usize| sql[i..].chars().next().unwrap();
    while i < sql.len() {
        let c = next_char(i);
        let start = i;
        let kind;
        if c.is_whitespace() {
            while i < sql.len() && next_char(i).is_whitespace() {
                i += next_char(i).len_utf8();
            }
            kind = TokKind::Whitespace;
        } else if sql[i..].starts_with("--") {
            i = sql[i..].find('\n').map_or(sql.len(), |p| i + p);
            kind = TokKind::Comment;
        } else if sql[i..].starts_with("/*") {
            let end = sql[i + 2..].find("*/").ok_or(SqlError::Unterminated {
                what: "comment",
                offset: start,
            })?;
            i += 2 + end + 2;
            kind = TokKind::Comment;
        } else if c == '\'' {
            i += 1;
            loop {
                match sql[i..].find('\'') {
                    None => {
                        return Err(SqlError::Unterminated {
                            what: "string literal",
                            offset: start,
                        })
                    }
                    Some(p) => {
                        i += p + 1;
                        if bytes.get(i) == Some(&b'\'') {
                            i += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
            kind = TokKind::Str;
        } else if matches!(c, '"' | '`' | '[') {
            let close = if c == '[' { ']' } else { c };
            let end = sql[i + 1..].find(close).ok_or(SqlError::Unterminated {
                what: "quoted identifier",
                offset: start,
            })?;
            i += 1 + end + 1;
            kind = TokKind::QuotedIdent;
        } else if c.is_ascii_digit()
            || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit()))
        {
            while i < sql.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < sql.len() && matches!(bytes[i], b'e' | b'E') {
                let mut j = i + 1;
                if j < sql.len() && matches!(bytes[j], b'+' | b'-') {
                    j += 1;
                }
                if j < sql.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < sql.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            kind = TokKind::Number;
        } else if c.is_alphabetic() || c == '_' {
            while i < sql.len() {
                let d = next_char(i);
                if d.is_alphanumeric() || d == '_' || d == '$' {
                    i += d.len_utf8();
                } else {
                    break;
                }
            }
            kind = TokKind::Word;
        } else if matches!(c, '?' | ':' | '@' | '$')
            && sql[i + 1..]
                .chars()
                .next()
                .is_some_and(|d| d.is_alphanumeric() || d == '_')
            && !sql[i..].starts_with("::")
        {
            i += 1;
            while i < sql.len() && (next_char(i).is_alphanumeric() || next_char(i) == '_') {
                i += next_char(i).len_utf8();
            }
            kind = TokKind::Param;
        } else if let Some(p) = MULTI_PUNCT.iter().find(|p| sql[i..].starts_with(**p)) {
            i += p.len();
            kind = TokKind::Punct;
        } else {
            i += c.len_utf8();
            kind = TokKind::Punct;
        }
        toks.push(Tok {
            kind,
            start,
            end: i,
        });
    }
    Ok(toks)
}

/// Keywords that never appear in a read-only query (function-call uses such
/// as `REPLACE(...)` are exempt).
pub const FORBIDDEN: &[&str] = &[
    "ALTER", "ANALYZE", "ATTACH", "CALL", "COMMIT", "COPY", "CREATE", "DELETE", "DETACH", "DROP",
    "EXEC", "EXECUTE", "GRANT", "INSERT", "INTO", "LOAD", "LOCK", "MERGE", "PRAGMA", "REINDEX",
    "RENAME", "REPLACE", "REVOKE", "ROLLBACK", "SAVEPOINT", "SET", "TRUNCATE", "UPDATE", "UPSERT",
    "VACUUM",
];

/// Statement heads that are valid SQL but not queries.
const OTHER_STATEMENTS: &[&str] = &[
    "ABORT", "BEGIN", "CHECKPOINT", "CLUSTER", "COMMENT", "DEALLOCATE", "DECLARE", "DESCRIBE",
    "DISCARD", "DO", "END", "EXPLAIN", "FLUSH", "HANDLER", "IMPORT", "KILL", "LISTEN", "NOTIFY",
    "OPTIMIZE", "PREPARE", "REFRESH", "RELEASE", "RESET", "SHOW", "START", "TABLE", "USE", "VALUES",
];

/// Reserved words that are never column names. Non-reserved words such as
/// `date` or `first` are treated as identifiers, so a column with such a name
/// is still subject to authorization.
const KEYWORDS: &[&str] = &[
    "ALL", "AND", "ANY", "AS", "ASC", "BETWEEN", "BY", "CASE", "CAST", "COLLATE", "CROSS",
    "CURRENT_DATE", "CURRENT_TIME", "CURRENT_TIMESTAMP", "DESC", "DISTINCT", "ELSE", "END",
    "ESCAPE", "EXCEPT", "EXISTS", "FALSE", "FETCH", "FROM", "FULL", "GLOB", "GROUP", "HAVING",
    "ILIKE", "IN", "INNER", "INTERSECT", "IS", "ISNULL", "JOIN", "LEFT", "LIKE", "LIMIT",
    "NATURAL", "NOT", "NOTNULL", "NULL", "OFFSET", "ON", "OR", "ORDER", "OUTER", "OVER",
    "PARTITION", "RECURSIVE", "REGEXP", "RIGHT", "SELECT", "THEN", "TRUE", "UNION", "USING",
    "VALUES", "WHEN", "WHERE", "WINDOW", "WITH",
];

/// Keywords that end a FROM list.
const CLAUSE_END: &[&str] = &[
    "WHERE", "GROUP", "HAVING", "ORDER", "LIMIT", "OFFSET", "UNION", "EXCEPT", "INTERSECT", "ON",
    "USING", "WINDOW", "FETCH",
];

pub fn is_keyword(word: &str) -> bool {
    let up = word.to_ascii_uppercase();
    KEYWORDS.contains(&up.as_str()) || FORBIDDEN.contains(&up.as_str())
}

/// Identifier text without quoting, lowercased.
pub fn ident_name(src: &str, tok: &Tok) -> String {
    let t = tok.text(src);
    let inner = if tok.kind == TokKind::QuotedIdent {
        &t[1..t.len() - 1]
    } else {
        t
    };
    inner.to_lowercase()
}

/// Lexed statement with indices of the significant (non-trivia) tokens.
#[derive(Debug, Clone)]
pub struct Parsed<'a> {
    pub src: &'a str,
    pub toks: Vec<Tok>,
    pub sig: Vec<usize>,
}

impl<'a> Parsed<'a> {
    pub fn new(src: &'a str) -> Result<Self, SqlError> {
        let toks = lex(src)?;
        let sig = (0..toks.len()).filter(|&i| !toks[i].is_trivia()).collect();
        Ok(Self { src, toks, sig })
    }

    /// The `k`-th significant token.
    pub fn at(&self, k: usize) -> Option<&Tok> {
        self.sig.get(k).map(|&i| &self.toks[i])
    }

    pub fn text(&self, k: usize) -> &'a str {
        self.at(k).map_or("", |t| t.text(self.src))
    }

    pub fn is_kw(&self, k: usize, kw: &str) -> bool {
        self.at(k)
            .is_some_and(|t| t.kind == TokKind::Word && t.text(self.src).eq_ignore_ascii_case(kw))
    }

    pub fn is_punct(&self, k: usize, p: &str) -> bool {
        self.at(k)
            .is_some_and(|t| t.kind == TokKind::Punct && t.text(self.src) == p)
    }

    pub fn is_ident(&self, k: usize) -> bool {
        self.at(k).is_some_and(|t| match t.kind {
            TokKind::QuotedIdent => true,
            TokKind::Word => !is_keyword(t.text(self.src)),
            _ => false,
        })
    }

    pub fn len(&self) -> usize {
        self.sig.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sig.is_empty()
    }

    /// Parenthesis depth before each significant token.
    pub fn depths(&self) -> Result<Vec<usize>, SqlError> {
        let mut depth = 0usize;
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            if self.is_punct(k, ")") {
                depth = depth.checked_sub(1).ok_or(SqlError::Unbalanced)?;
            }
            out.push(depth);
            if self.is_punct(k, "(") {
                depth += 1;
            }
        }
        if depth != 0 {
            return Err(SqlError::Unbalanced);
        }
        Ok(out)
    }
}

/// Accepts exactly one SELECT statement, optionally led by a WITH clause and
/// followed by semicolons.
pub fn check_read_only(sql: &str) -> Result<(), SqlError> {
    let p = Parsed::new(sql)?;
    let mut end = p.len();
    while end > 0 && p.is_punct(end - 1, ";") {
        end -= 1;
    }
    if end == 0 {
        return Err(SqlError::Empty);
    }
    if (0..end).any(|k| p.is_punct(k, ";")) {
        return Err(SqlError::MultipleStatements);
    }
    p.depths()?;
    let mut first = 0;
    while p.is_punct(first, "(") {
        first += 1;
    }
    let head = p.text(first).to_ascii_uppercase();
    if head != "SELECT" && head != "WITH" {
        let known = FORBIDDEN.contains(&head.as_str()) || OTHER_STATEMENTS.contains(&head.as_str());
        return Err(if known {
            SqlError::NotSelect(head)
        } else {
            SqlError::Unrecognised(p.text(first).to_string())
        });
    }
    for k in 0..end {
        let t = p.at(k).unwrap();
        if t.kind != TokKind::Word {
            continue;
        }
        let up = t.text(sql).to_ascii_uppercase();
        if FORBIDDEN.contains(&up.as_str()) && !p.is_punct(k + 1, "(") {
            return Err(SqlError::Forbidden(up));
        }
    }
    if head == "WITH" && !(0..end).any(|k| p.is_kw(k, "SELECT")) {
        return Err(SqlError::NotSelect("WITH".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRef {
    pub name: String,
    pub alias: Option<String>,
}

/// A column read by the statement. `tok` is the significant-token index of
/// the column name (or `*`); `qual_tok` that of the qualifier, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRef {
    pub qualifier: Option<String>,
    pub name: String,
    pub star: bool,
    pub tok: usize,
    pub qual_tok: Option<usize>,
    /// Clause keyword governing the reference at its own depth.
    pub clause: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Analysis {
    pub tables: Vec<TableRef>,
    pub ctes: BTreeSet<String>,
    pub derived: BTreeSet<String>,
    pub output_aliases: BTreeSet<String>,
    pub columns: Vec<ColumnRef>,
}

#[derive(Debug, Clone, Default)]
struct Frame {
    clause: String,
    in_from: bool,
    expect_table: bool,
    /// Set when this frame is a derived table whose alias follows `)`.
    derived_table: bool,
}

/// Collects table references, CTE names, output aliases and column reads.
pub fn analyze(p: &Parsed) -> Analysis {
    let mut a = Analysis::default();
    let mut frames = vec![Frame::default()];
    let mut k = 0;
    let n = p.len();
    let mut expect_derived_alias = false;

    while k < n {
        let t = *p.at(k).unwrap();
        let text = t.text(p.src);
        let up = text.to_ascii_uppercase();
        let frame = frames.last_mut().unwrap();

        if expect_derived_alias {
            expect_derived_alias = false;
            let mut j = k;
            if p.is_kw(j, "AS") {
                j += 1;
            }
            if p.is_ident(j) {
                a.derived.insert(ident_name(p.src, p.at(j).unwrap()));
                k = j + 1;
                continue;
            }
        }

        if t.kind == TokKind::Punct {
            match text {
                "(" => {
                    let derived_table = frame.expect_table;
                    frame.expect_table = false;
                    let clause = frame.clause.clone();
                    frames.push(Frame {
                        clause,
                        derived_table,
                        ..Frame::default()
                    });
                }
                ")" => {
                    if frames.len() > 1 {
                        let f = frames.pop().unwrap();
                        expect_derived_alias = f.derived_table;
                    }
                }
                "," => {
                    if frame.in_from {
                        frame.expect_table = true;
                    }
                }
                "*" => {
                    let prev_is_list_start = k == 0
                        || p.is_punct(k - 1, ",")
                        || p.is_kw(k - 1, "SELECT")
                        || p.is_kw(k - 1, "DISTINCT")
                        || p.is_kw(k - 1, "ALL");
                    if prev_is_list_start {
                        a.columns.push(ColumnRef {
                            qualifier: None,
                            name: "*".into(),
                            star: true,
                            tok: k,
                            qual_tok: None,
                            clause: frame.clause.clone(),
                        });
                    }
                }
                _ => {}
            }
            k += 1;
            continue;
        }

        if t.kind == TokKind::Word && is_keyword(text) {
            match up.as_str() {
                "FROM" | "JOIN" => {
                    frame.clause = up.clone();
                    frame.in_from = true;
                    frame.expect_table = true;
                }
                "AS" => {
                    if p.is_ident(k + 1) {
                        a.output_aliases.insert(ident_name(p.src, p.at(k + 1).unwrap()));
                        k += 2;
                        continue;
                    }
                }
                _ => {
                    if CLAUSE_END.contains(&up.as_str()) {
                        frame.in_from = false;
                        frame.expect_table = false;
                    }
                    if matches!(
                        up.as_str(),
                        "SELECT" | "WHERE" | "GROUP" | "HAVING" | "ORDER" | "ON" | "LIMIT"
                            | "WITH" | "USING" | "WINDOW" | "PARTITION"
                    ) {
                        frame.clause = up.clone();
                    }
                }
            }
            k += 1;
            continue;
        }

        if !matches!(t.kind, TokKind::Word | TokKind::QuotedIdent) {
            k += 1;
            continue;
        }

        // Identifier, possibly dotted.
        let mut parts = vec![k];
        while p.is_punct(parts[parts.len() - 1] + 1, ".") {
            let nxt = parts[parts.len() - 1] + 2;
            if p.is_punct(nxt, "*") || p.is_ident(nxt) || p.at(nxt).is_some_and(|t| t.kind == TokKind::Word) {
                parts.push(nxt);
            } else {
                break;
            }
        }
        let after = parts[parts.len() - 1] + 1;

        if frame.expect_table {
            frame.expect_table = false;
            let name = ident_name(p.src, p.at(parts[parts.len() - 1]).unwrap());
            let mut j = after;
            if p.is_kw(j, "AS") {
                j += 1;
            }
            let alias = if p.is_ident(j) {
                let al = ident_name(p.src, p.at(j).unwrap());
                j += 1;
                Some(al)
            } else {
                j = after;
                None
            };
            a.tables.push(TableRef { name, alias });
            k = j;
            continue;
        }

        if p.is_punct(after, "(") {
            // function call
            k = after;
            continue;
        }
        if parts.len() == 1 && p.is_kw(after, "AS") && p.is_punct(after + 1, "(") {
            a.ctes.insert(ident_name(p.src, &t));
            k = after + 1;
            continue;
        }

        let last = parts[parts.len() - 1];
        let star = p.is_punct(last, "*");
        let (qualifier, qual_tok) = if parts.len() >= 2 {
            let q = parts[parts.len() - 2];
            (Some(ident_name(p.src, p.at(q).unwrap())), Some(q))
        } else {
            (None, None)
        };
        a.columns.push(ColumnRef {
            qualifier,
            name: if star {
                "*".into()
            } else {
                ident_name(p.src, p.at(last).unwrap())
            },
            star,
            tok: last,
            qual_tok,
            clause: frame.clause.clone(),
        });
        k = after;
    }
    a
}

/// Column lookup used for resolution: table name → ordered column names.
pub type ColumnCatalog = BTreeMap<String, Vec<String>>;

impl Analysis {
    /// Base tables of the statement that exist in `catalog`, first-seen order.
    pub fn base_tables(&self, catalog: &ColumnCatalog) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.tables {
            if !self.ctes.contains(&t.name)
                && catalog.contains_key(&t.name)
                && !out.contains(&t.name)
            {
                out.push(t.name.clone());
            }
        }
        out
    }

    /// Base table a qualifier (alias or table name) refers to.
    pub fn resolve_qualifier(&self, q: &str, catalog: &ColumnCatalog) -> Option<String> {
        if self.derived.contains(q) {
            return None;
        }
        for t in &self.tables {
            if t.alias.as_deref() == Some(q) {
                return (!self.ctes.contains(&t.name) && catalog.contains_key(&t.name))
                    .then(|| t.name.clone());
            }
        }
        self.tables
            .iter()
            .find(|t| t.name == q)
            .filter(|t| !self.ctes.contains(&t.name) && catalog.contains_key(&t.name))
            .map(|t| t.name.clone())
    }

    /// `(table, column)` pairs a reference may read. Unqualified names resolve
    /// to every base table of the statement that has such a column; output
    /// aliases and unknown names resolve to nothing.
    pub fn resolve(&self, c: &ColumnRef, catalog: &ColumnCatalog) -> Vec<(String, String)> {
        let tables: Vec<String> = match &c.qualifier {
            Some(q) => self.resolve_qualifier(q, catalog).into_iter().collect(),
            None => {
                if !c.star && (self.output_aliases.contains(&c.name) || self.ctes.contains(&c.name)) {
                    return Vec::new();
                }
                self.base_tables(catalog)
            }
        };
        let mut out = Vec::new();
        for t in tables {
            let cols = &catalog[&t];
            if c.star {
                out.extend(cols.iter().map(|col| (t.clone(), col.clone())));
            } else if cols.contains(&c.name) {
                out.push((t.clone(), c.name.clone()));
            }
        }
        out
    }

    /// Every `table.column` the statement may read.
    pub fn read_set(&self, catalog: &ColumnCatalog) -> BTreeSet<String> {
        self.columns
            .iter()
            .flat_map(|c| self.resolve(c, catalog))
            .map(|(t, c)| format!("{t}.{c}"))
            .collect()
    }
}

/// Columns read by `sql` that are not in `authorized` (`table.column`, lowercase).
pub fn unauthorized_columns(
    sql: &str,
    catalog: &ColumnCatalog,
    authorized: &BTreeSet<String>,
) -> Result<Vec<String>, SqlError> {
    let p = Parsed::new(sql)?;
    Ok(analyze(&p)
        .read_set(catalog)
        .into_iter()
        .filter(|c| !authorized.contains(c))
        .collect())
}

/// Quotes a string literal for SQL.
pub fn quote_literal(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// Value of a string literal token.
pub fn unquote_literal(s: &str) -> String {
    s[1..s.len() - 1].replace("''", "'")
}
