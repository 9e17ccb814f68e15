//! Document ingestion: overlapping token windows with exact provenance.
//!
//! A document is tokenized once; chunk `k` covers tokens
//! `[k * stride, min(k * stride + window, n))` with `stride = window - overlap`,
//! and chunking stops after the chunk that reaches the final token. Character
//! spans are laid out so that the chunks tile the source text: the first chunk
//! starts at character 0, every non-final chunk ends where the first token it
//! does not contain begins, and the last chunk runs to the end of the text.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::text::{self, TokenizerId};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("invalid chunk policy: {0}")]
    Policy(String),
    #[error("configuration error: {0}")]
    Config(#[from] text::UnknownTokenizer),
    #[error("document `{doc_id}` is empty")]
    EmptyDocument { doc_id: String },
    #[error("document id must be non-empty (line {line})")]
    MissingDocId { line: usize },
    #[error("malformed JSONL at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate doc_id `{doc_id}`: first at line {first_line} ({first_source}), again at line {second_line} ({second_source})")]
    DuplicateDocId {
        doc_id: String,
        first_line: usize,
        first_source: String,
        second_line: usize,
        second_source: String,
    },
    #[error("chunk store {path}: {message}")]
    Store { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub source_uri: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: String::new(),
            text: text.into(),
            source_uri: String::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_source(mut self, uri: impl Into<String>) -> Self {
        self.source_uri = uri.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub window_tokens: usize,
    pub overlap_tokens: usize,
    pub tokenizer_id: TokenizerId,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            window_tokens: 1000,
            overlap_tokens: 150,
            tokenizer_id: TokenizerId::Default,
        }
    }
}

impl ChunkPolicy {
    pub fn new(window_tokens: usize, overlap_tokens: usize) -> Result<Self, IngestError> {
        let policy = Self {
            window_tokens,
            overlap_tokens,
            ..Self::default()
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.window_tokens == 0 {
            return Err(IngestError::Policy("window_tokens must be at least 1".into()));
        }
        if self.overlap_tokens >= self.window_tokens {
            return Err(IngestError::Policy(format!(
                "overlap_tokens ({}) must be smaller than window_tokens ({})",
                self.overlap_tokens, self.window_tokens
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window_tokens - self.overlap_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub seq: usize,
    pub start_token: usize,
    pub end_token: usize,
    pub start_char: usize,
    pub end_char: usize,
    pub text: String,
}

impl Chunk {
    pub fn token_len(&self) -> usize {
        self.end_token - self.start_token
    }

    /// True when `[start, end)` shares at least one character with this chunk.
    pub fn overlaps_chars(&self, start: usize, end: usize) -> bool {
        self.start_char < end && start < self.end_char
    }
}

/// Content-addressed chunk id: first 16 hex digits of sha256(doc_id, seq).
pub fn chunk_id(doc_id: &str, seq: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(doc_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update(seq.to_string().as_bytes());
    let digest = hasher.finalize();
    hex::encode(&digest[..8])
}

pub fn count_tokens(text: &str, tokenizer_id: &str) -> Result<usize, IngestError> {
    let id: TokenizerId = tokenizer_id.parse()?;
    Ok(text::count_tokens(text, id))
}

pub fn chunk_document(doc: &Document, policy: &ChunkPolicy) -> Result<Vec<Chunk>, IngestError> {
    policy.validate()?;
    let tokens = text::tokenize(&doc.text, policy.tokenizer_id);
    if tokens.is_empty() {
        return Err(IngestError::EmptyDocument {
            doc_id: doc.doc_id.clone(),
        });
    }

    let n = tokens.len();
    let stride = policy.stride();
    let total_chars = doc.text.chars().count();
    let mut chunks = Vec::with_capacity(n.div_ceil(stride));
    let mut seq = 0;
    loop {
        let start_token = seq * stride;
        let end_token = (start_token + policy.window_tokens).min(n);
        let last = end_token == n;

        let (start_byte, start_char) = if seq == 0 {
            (0, 0)
        } else {
            (tokens[start_token].start_byte, tokens[start_token].start_char)
        };
        let (end_byte, end_char) = if last {
            (doc.text.len(), total_chars)
        } else {
            (tokens[end_token].start_byte, tokens[end_token].start_char)
        };

        chunks.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, seq),
            doc_id: doc.doc_id.clone(),
            seq,
            start_token,
            end_token,
            start_char,
            end_char,
            text: doc.text[start_byte..end_byte].to_string(),
        });
        if last {
            break;
        }
        seq += 1;
    }
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocInfo {
    pub doc_id: String,
    pub title: String,
    pub source_uri: String,
}

/// In-memory view of a chunk store plus per-document metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkStore {
    pub chunks: Vec<Chunk>,
    pub docs: BTreeMap<String, DocInfo>,
}

impl ChunkStore {
    pub fn from_documents(docs: &[Document], policy: &ChunkPolicy) -> Result<Self, IngestError> {
        policy.validate()?;
        let per_doc: Vec<Vec<Chunk>> = docs
            .par_iter()
            .map(|d| chunk_document(d, policy))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            chunks: per_doc.into_iter().flatten().collect(),
            docs: docs
                .iter()
                .map(|d| {
                    (
                        d.doc_id.clone(),
                        DocInfo {
                            doc_id: d.doc_id.clone(),
                            title: d.title.clone(),
                            source_uri: d.source_uri.clone(),
                        },
                    )
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.chunk_id == chunk_id)
    }

    pub fn index_by_id(&self) -> HashMap<&str, &Chunk> {
        self.chunks.iter().map(|c| (c.chunk_id.as_str(), c)).collect()
    }

    /// Sidecar holding document titles and source URIs next to the store.
    pub fn docs_path(store: &Path) -> PathBuf {
        let mut name = store.file_name().unwrap_or_default().to_os_string();
        name.push(".docs");
        store.with_file_name(name)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let chunks: Vec<Chunk> = read_jsonl(path)?;
        let docs_path = Self::docs_path(path);
        let docs = if docs_path.exists() {
            read_jsonl::<DocInfo>(&docs_path)?
                .into_iter()
                .map(|d| (d.doc_id.clone(), d))
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(Self { chunks, docs })
    }

    /// Writes the store and its sidecar through temp files renamed into place.
    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        write_jsonl_atomic(path, &self.chunks)?;
        let docs: Vec<&DocInfo> = self.docs.values().collect();
        write_jsonl_atomic(&Self::docs_path(path), &docs)
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::Store {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl_atomic<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IngestError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        for row in rows {
            serde_json::to_writer(&mut w, row).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| IngestError::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub docs: usize,
    pub chunks: usize,
    pub tokens: usize,
    pub chunk_tokens: usize,
}

/// Parses a JSONL corpus, rejecting malformed lines and duplicate ids.
pub fn read_corpus(input: &Path) -> Result<Vec<Document>, IngestError> {
    let file = File::open(input).map_err(|e| IngestError::Store {
        path: input.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut docs: Vec<Document> = Vec::new();
    let mut seen: HashMap<String, (usize, usize)> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if doc.doc_id.is_empty() {
            return Err(IngestError::MissingDocId { line: line_no });
        }
        if let Some(&(first_line, idx)) = seen.get(&doc.doc_id) {
            return Err(IngestError::DuplicateDocId {
                doc_id: doc.doc_id.clone(),
                first_line,
                first_source: docs[idx].source_uri.clone(),
                second_line: line_no,
                second_source: doc.source_uri.clone(),
            });
        }
        seen.insert(doc.doc_id.clone(), (line_no, docs.len()));
        docs.push(doc);
    }
    Ok(docs)
}

pub fn corpus_stats(docs: &[Document], store: &ChunkStore, policy: &ChunkPolicy) -> CorpusStats {
    CorpusStats {
        docs: docs.len(),
        chunks: store.chunks.len(),
        tokens: docs
            .iter()
            .map(|d| text::count_tokens(&d.text, policy.tokenizer_id))
            .sum(),
        chunk_tokens: store.chunks.iter().map(Chunk::token_len).sum(),
    }
}

/// Chunks a JSONL corpus and writes the chunk store. Nothing is written unless
/// every document is valid.
pub fn ingest_corpus(
    input: &Path,
    policy: &ChunkPolicy,
    store_path: &Path,
) -> Result<CorpusStats, IngestError> {
    policy.validate()?;
    let docs = read_corpus(input)?;
    let store = ChunkStore::from_documents(&docs, policy)?;
    store.write(store_path)?;
    Ok(corpus_stats(&docs, &store, policy))
}
