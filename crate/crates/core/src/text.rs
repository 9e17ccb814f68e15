//! Rule-based tokenization shared by chunking, BM25 and the lexical scorers.
//!
//! The default scheme emits maximal runs of letters/digits as word tokens and
//! every other non-whitespace character as a one-character punctuation token.
//! Offsets are reported both in bytes (for slicing) and in Unicode scalar
//! values (the unit used by chunk provenance and evaluation spans).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Version tag of [`STOP_WORDS`]; bump whenever the list changes.
pub const STOP_WORDS_VERSION: &str = "en-basic-1";

/// Function words ignored by the lexical overlap scorer.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "before", "but", "by", "can", "could", "did", "do", "does", "for", "from", "had", "has",
    "have", "he", "her", "his", "how", "i", "if", "in", "into", "is", "it", "its", "may", "me",
    "more", "most", "my", "no", "not", "of", "on", "or", "our", "should", "so", "such",
    "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "those",
    "to", "was", "we", "were", "what", "when", "where", "which", "who", "whom", "why", "will",
    "with", "would", "you", "your",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerId {
    /// Letter/digit runs plus single punctuation marks.
    #[default]
    Default,
}

impl TokenizerId {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerId::Default => "default",
        }
    }
}

impl fmt::Display for TokenizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown tokenizer id `{0}`")]
pub struct UnknownTokenizer(pub String);

impl FromStr for TokenizerId {
    type Err = UnknownTokenizer;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(TokenizerId::Default),
            other => Err(UnknownTokenizer(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Punct,
}

/// One token with both byte and character offsets (half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub start_byte: usize,
    pub end_byte: usize,
    pub start_char: usize,
    pub end_char: usize,
}

impl Token {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start_byte..self.end_byte]
    }
}

pub fn tokenize(text: &str, tokenizer: TokenizerId) -> Vec<Token> {
    match tokenizer {
        TokenizerId::Default => tokenize_default(text),
    }
}

fn tokenize_default(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word: Option<(usize, usize)> = None;
    let mut char_idx = 0usize;

    for (byte_idx, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if word.is_none() {
                word = Some((byte_idx, char_idx));
            }
        } else {
            if let Some((sb, sc)) = word.take() {
                tokens.push(Token {
                    kind: TokenKind::Word,
                    start_byte: sb,
                    end_byte: byte_idx,
                    start_char: sc,
                    end_char: char_idx,
                });
            }
            if !ch.is_whitespace() {
                tokens.push(Token {
                    kind: TokenKind::Punct,
                    start_byte: byte_idx,
                    end_byte: byte_idx + ch.len_utf8(),
                    start_char: char_idx,
                    end_char: char_idx + 1,
                });
            }
        }
        char_idx += 1;
    }
    if let Some((sb, sc)) = word {
        tokens.push(Token {
            kind: TokenKind::Word,
            start_byte: sb,
            end_byte: text.len(),
            start_char: sc,
            end_char: char_idx,
        });
    }
    tokens
}

pub fn count_tokens(text: &str, tokenizer: TokenizerId) -> usize {
    tokenize(text, tokenizer).len()
}

/// Lowercased word tokens, in order, duplicates kept. These are the BM25 terms.
pub fn index_terms(text: &str) -> Vec<String> {
    tokenize_default(text)
        .iter()
        .filter(|t| t.kind == TokenKind::Word)
        .map(|t| t.text(text).to_lowercase())
        .collect()
}

pub fn is_stop_word(term: &str) -> bool {
    STOP_WORDS.contains(&term)
}

/// Distinct lowercased word tokens minus stop words.
pub fn content_terms(text: &str) -> BTreeSet<String> {
    index_terms(text)
        .into_iter()
        .filter(|t| !is_stop_word(t))
        .collect()
}

/// `|content(left) ∩ content(right)| / |content(left)|`, or 0 when the left
/// side has no content terms.
pub fn lexical_overlap_score(left: &str, right: &str) -> f64 {
    let lhs = content_terms(left);
    if lhs.is_empty() {
        return 0.0;
    }
    let rhs = content_terms(right);
    let shared = lhs.iter().filter(|t| rhs.contains(*t)).count();
    shared as f64 / lhs.len() as f64
}

/// Byte offset of the `char_idx`-th character (or `text.len()` past the end).
pub fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices()
        .nth(char_idx)
        .map(|(b, _)| b)
        .unwrap_or(text.len())
}
