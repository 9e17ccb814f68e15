//! Hybrid sparse + dense retrieval with a candidate → rerank → snippet funnel.
//!
//! Both legs index the same chunk set. Chunks are held sorted by `chunk_id`,
//! so internal ordinals order exactly like ids and every tie-break by ordinal
//! is a tie-break by `chunk_id`.

pub mod fusion;
pub mod hnsw;
pub mod sparse;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ingest::{Chunk, ChunkPolicy, ChunkStore, DocInfo, IngestError};
use crate::providers::{Embedder, ProviderError, Reranker};
use crate::text;

pub use fusion::{reciprocal_rank_fusion, DEFAULT_RRF_K};
pub use hnsw::{Hnsw, HnswParams};
pub use sparse::{Bm25Params, SparseIndex};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("chunk store is empty")]
    EmptyStore,
    #[error("embedder returned dimension {got} for chunk {chunk_id}, expected {expected}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        chunk_id: String,
    },
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("embedding failed: {0}")]
    Provider(#[from] ProviderError),
    #[error("index manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Store(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub bm25: Bm25Params,
    pub hnsw: HnswParams,
    /// Depth taken from each leg before fusion.
    pub leg_depth: usize,
    pub n_candidates: usize,
    pub top_n: usize,
    pub rrf_k: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            bm25: Bm25Params::default(),
            hnsw: HnswParams::default(),
            leg_depth: 200,
            n_candidates: 200,
            top_n: 50,
            rrf_k: DEFAULT_RRF_K,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        self.bm25.validate().map_err(RetrievalError::Config)?;
        self.hnsw.validate().map_err(RetrievalError::Config)?;
        if self.leg_depth == 0 || self.n_candidates == 0 || self.top_n == 0 {
            return Err(RetrievalError::Config(
                "leg_depth, n_candidates and top_n must be positive".into(),
            ));
        }
        if !(self.rrf_k >= 0.0) {
            return Err(RetrievalError::Config("rrf_k must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub chunk_id: String,
    pub sparse_score: f64,
    pub dense_score: f64,
    pub fused_score: f64,
    pub rerank_score: Option<f64>,
    pub rank: usize,
    pub sparse_rank: Option<usize>,
    pub dense_rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnippetOrigin {
    #[default]
    Internal,
    /// Came from the web-search fallback rather than the local index.
    External,
}

/// A selected passage handed to generation, with the provenance needed to cite it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub chunk_id: String,
    pub doc_id: String,
    pub seq: usize,
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
    pub title: String,
    pub source_uri: String,
    pub rank: usize,
    pub fused_score: f64,
    pub rerank_score: Option<f64>,
    #[serde(default)]
    pub origin: SnippetOrigin,
}

/// Result of the rerank stage; `degraded` explains a fallback to fused order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub snippets: Vec<Snippet>,
    pub degraded: Option<String>,
}

/// Configuration snapshot persisted next to a saved index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub chunk_count: usize,
    pub doc_count: usize,
    pub chunking: Option<ChunkPolicy>,
    pub dim: usize,
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub k1: f64,
    pub b: f64,
    pub retrieval: RetrievalConfig,
}

/// Immutable hybrid index over a chunk store. Safe to share across threads.
pub struct IndexHandle {
    chunks: Vec<Chunk>,
    docs: BTreeMap<String, DocInfo>,
    ids: BTreeMap<String, u32>,
    sparse: SparseIndex,
    dense: Hnsw,
    config: RetrievalConfig,
    chunking: Option<ChunkPolicy>,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for IndexHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IndexHandle")
            .field("chunks", &self.chunks.len())
            .field("dim", &self.dense.dim())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

const EMBED_BATCH: usize = 64;

/// Indexes every chunk of the store in both legs.
pub fn build_indexes(
    store: &ChunkStore,
    embedder: Arc<dyn Embedder>,
    config: &RetrievalConfig,
) -> Result<IndexHandle, RetrievalError> {
    build_indexes_with_policy(store, None, embedder, config)
}

pub fn build_indexes_with_policy(
    store: &ChunkStore,
    chunking: Option<ChunkPolicy>,
    embedder: Arc<dyn Embedder>,
    config: &RetrievalConfig,
) -> Result<IndexHandle, RetrievalError> {
    config.validate()?;
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let mut chunks = store.chunks.clone();
    chunks.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
    if let Some(w) = chunks.windows(2).find(|w| w[0].chunk_id == w[1].chunk_id) {
        return Err(RetrievalError::DuplicateChunk(w[0].chunk_id.clone()));
    }

    let sparse = SparseIndex::build(chunks.iter().map(|c| c.text.as_str()), config.bm25);

    let dim = embedder.dimension();
    let mut dense = Hnsw::new(dim, config.hnsw);
    for batch in chunks.chunks(EMBED_BATCH) {
        let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
        let vectors = embedder.embed(&texts)?;
        if vectors.len() != batch.len() {
            return Err(RetrievalError::Provider(ProviderError::Decode(format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                batch.len()
            ))));
        }
        for (chunk, v) in batch.iter().zip(vectors) {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                    chunk_id: chunk.chunk_id.clone(),
                });
            }
            dense.insert(&v);
        }
    }

    let ids = chunks
        .iter()
        .enumerate()
        .map(|(i, c)| (c.chunk_id.clone(), i as u32))
        .collect();
    Ok(IndexHandle {
        chunks,
        docs: store.docs.clone(),
        ids,
        sparse,
        dense,
        config: *config,
        chunking,
        embedder,
    })
}

impl IndexHandle {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn sparse(&self) -> &SparseIndex {
        &self.sparse
    }

    pub fn dense(&self) -> &Hnsw {
        &self.dense
    }

    /// Chunks in ordinal (`chunk_id`) order.
    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.ordinal(chunk_id).map(|i| &self.chunks[i as usize])
    }

    pub fn ordinal(&self, chunk_id: &str) -> Option<u32> {
        self.ids.get(chunk_id).copied()
    }

    pub fn doc_info(&self, doc_id: &str) -> Option<&DocInfo> {
        self.docs.get(doc_id)
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            format_version: INDEX_FORMAT_VERSION,
            chunk_count: self.chunks.len(),
            doc_count: self.docs.len(),
            chunking: self.chunking,
            dim: self.dense.dim(),
            m: self.config.hnsw.m,
            ef_construction: self.config.hnsw.ef_construction,
            ef_search: self.config.hnsw.ef_search,
            k1: self.config.bm25.k1,
            b: self.config.bm25.b,
            retrieval: self.config,
        }
    }

    /// BM25 of the query against one chunk; `None` for unknown ids.
    pub fn bm25_score(&self, query: &str, chunk_id: &str) -> Option<f64> {
        let doc = self.ordinal(chunk_id)?;
        Some(self.sparse.score(&text::index_terms(query), doc))
    }

    pub fn search_sparse(&self, query: &str, k: usize) -> Vec<RetrievalCandidate> {
        let terms = text::index_terms(query);
        self.sparse
            .search(&terms, k)
            .into_iter()
            .enumerate()
            .map(|(i, (doc, score))| RetrievalCandidate {
                chunk_id: self.chunks[doc as usize].chunk_id.clone(),
                sparse_score: score,
                dense_score: 0.0,
                fused_score: 0.0,
                rerank_score: None,
                rank: i + 1,
                sparse_rank: Some(i + 1),
                dense_rank: None,
            })
            .collect()
    }

    fn dense_hits(&self, query_vector: &[f32], k: usize) -> Vec<(u32, f32)> {
        if k >= self.dense.len() {
            return self.dense.scan(query_vector);
        }
        let mut hits = self
            .dense
            .search(query_vector, k, self.config.hnsw.ef_search);
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits
    }

    pub fn search_dense(&self, query_vector: &[f32], k: usize) -> Vec<RetrievalCandidate> {
        self.dense_hits(query_vector, k)
            .into_iter()
            .enumerate()
            .map(|(i, (doc, sim))| RetrievalCandidate {
                chunk_id: self.chunks[doc as usize].chunk_id.clone(),
                sparse_score: 0.0,
                dense_score: f64::from(sim),
                fused_score: 0.0,
                rerank_score: None,
                rank: i + 1,
                sparse_rank: None,
                dense_rank: Some(i + 1),
            })
            .collect()
    }

    /// Top `leg_depth` from each leg, fused by reciprocal rank, truncated to
    /// `n_candidates`. Sparse entries with no lexical match do not enter the
    /// fusion. A failing query embedding degrades to the sparse leg alone.
    pub fn hybrid_retrieve(&self, query: &str, n_candidates: usize) -> Vec<RetrievalCandidate> {
        let depth = self.config.leg_depth;
        let terms = text::index_terms(query);
        let sparse_scores = self.sparse.score_all(&terms);
        let mut sparse_leg: Vec<u32> = (0..self.chunks.len() as u32)
            .filter(|&d| sparse_scores[d as usize] > 0.0)
            .collect();
        sparse_leg.sort_by(|a, b| {
            sparse_scores[*b as usize]
                .total_cmp(&sparse_scores[*a as usize])
                .then(a.cmp(b))
        });
        sparse_leg.truncate(depth);

        let query_vec = match self.embedder.embed(&[query]) {
            Ok(mut v) if v.len() == 1 && v[0].len() == self.dense.dim() => {
                let mut q = v.remove(0);
                hnsw::normalize(&mut q);
                Some(q)
            }
            Ok(_) => {
                log::warn!("query embedding had the wrong shape; using the sparse leg only");
                None
            }
            Err(e) => {
                log::warn!("query embedding failed ({e}); using the sparse leg only");
                None
            }
        };
        let dense_leg: Vec<u32> = query_vec
            .as_ref()
            .map(|q| self.dense_hits(q, depth).into_iter().map(|(d, _)| d).collect())
            .unwrap_or_default();

        let fused = reciprocal_rank_fusion(&[sparse_leg, dense_leg], self.config.rrf_k);
        fused
            .into_iter()
            .take(n_candidates)
            .enumerate()
            .map(|(i, (doc, score, ranks))| RetrievalCandidate {
                chunk_id: self.chunks[doc as usize].chunk_id.clone(),
                sparse_score: sparse_scores[doc as usize],
                dense_score: query_vec
                    .as_ref()
                    .map_or(0.0, |q| f64::from(self.dense.similarity(q, doc))),
                fused_score: score,
                rerank_score: None,
                rank: i + 1,
                sparse_rank: ranks[0],
                dense_rank: ranks[1],
            })
            .collect()
    }

    fn snippet(&self, cand: &RetrievalCandidate, rank: usize) -> Option<Snippet> {
        let chunk = self.chunk(&cand.chunk_id)?;
        let doc = self.docs.get(&chunk.doc_id);
        Some(Snippet {
            chunk_id: chunk.chunk_id.clone(),
            doc_id: chunk.doc_id.clone(),
            seq: chunk.seq,
            text: chunk.text.clone(),
            start_char: chunk.start_char,
            end_char: chunk.end_char,
            title: doc.map(|d| d.title.clone()).unwrap_or_default(),
            source_uri: doc.map(|d| d.source_uri.clone()).unwrap_or_default(),
            rank,
            fused_score: cand.fused_score,
            rerank_score: cand.rerank_score,
            origin: SnippetOrigin::Internal,
        })
    }

    /// Scores every candidate with the reranker and keeps the best `top_n`.
    /// A provider failure keeps the fused order instead.
    pub fn rerank_and_select(
        &self,
        query: &str,
        candidates: &[RetrievalCandidate],
        reranker: &dyn Reranker,
        top_n: usize,
    ) -> Selection {
        let passages: Vec<&str> = candidates
            .iter()
            .filter_map(|c| self.chunk(&c.chunk_id).map(|ch| ch.text.as_str()))
            .collect();
        let scored = match reranker.rerank(query, &passages) {
            Ok(s) if s.len() != candidates.len() => Err(format!(
                "reranker returned {} scores for {} passages",
                s.len(),
                candidates.len()
            )),
            Ok(s) if s.iter().any(|x| !x.is_finite()) => {
                Err("reranker returned a non-finite score".to_string())
            }
            Ok(s) => Ok(s),
            Err(e) => Err(e.to_string()),
        };

        let (ordered, degraded): (Vec<RetrievalCandidate>, Option<String>) = match scored {
            Ok(scores) => {
                let mut c: Vec<RetrievalCandidate> = candidates
                    .iter()
                    .zip(scores)
                    .map(|(c, s)| RetrievalCandidate {
                        rerank_score: Some(s),
                        ..c.clone()
                    })
                    .collect();
                c.sort_by(|a, b| {
                    b.rerank_score
                        .unwrap_or(0.0)
                        .total_cmp(&a.rerank_score.unwrap_or(0.0))
                        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
                });
                (c, None)
            }
            Err(msg) => {
                log::warn!("rerank failed, keeping fused order: {msg}");
                (candidates.to_vec(), Some(msg))
            }
        };

        let snippets = ordered
            .iter()
            .take(top_n)
            .enumerate()
            .filter_map(|(i, c)| self.snippet(c, i + 1))
            .collect();
        Selection { snippets, degraded }
    }

    /// Writes the index directory: manifest, chunk store, sparse and dense sidecars.
    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        std::fs::create_dir_all(dir)?;
        let store = ChunkStore {
            chunks: self.chunks.clone(),
            docs: self.docs.clone(),
        };
        store.write(&dir.join("chunks.jsonl"))?;
        write_json(&dir.join("sparse.json"), &self.sparse)?;
        write_json(&dir.join("dense.json"), &self.dense)?;
        write_json(&dir.join("manifest.json"), &self.manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, RetrievalError> {
        let manifest: IndexManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::Manifest(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.dim != embedder.dimension() {
            return Err(RetrievalError::Manifest(format!(
                "index dimension {} does not match embedder dimension {}",
                manifest.dim,
                embedder.dimension()
            )));
        }
        let store = ChunkStore::load(&dir.join("chunks.jsonl"))?;
        let sparse: SparseIndex = read_json(&dir.join("sparse.json"))?;
        let dense: Hnsw = read_json(&dir.join("dense.json"))?;
        if store.len() != manifest.chunk_count
            || sparse.num_docs() != manifest.chunk_count
            || dense.len() != manifest.chunk_count
        {
            return Err(RetrievalError::Manifest(
                "chunk counts disagree between manifest and sidecars".into(),
            ));
        }
        let ids = store
            .chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.chunk_id.clone(), i as u32))
            .collect();
        Ok(Self {
            chunks: store.chunks,
            docs: store.docs,
            ids,
            sparse,
            dense,
            config: manifest.retrieval,
            chunking: manifest.chunking,
            embedder,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RetrievalError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer(std::io::BufWriter::new(tmp.as_file()), value)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RetrievalError> {
    let file = std::fs::File::open(path)
        .map_err(|e| RetrievalError::Manifest(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Document;
    use crate::providers::{HashEmbedder, IdentityReranker, LexicalReranker, Unavailable};

    fn store(texts: &[&str]) -> ChunkStore {
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("doc{i}"), *t).with_source(format!("file://doc{i}")))
            .collect();
        ChunkStore::from_documents(&docs, &ChunkPolicy::default()).unwrap()
    }

    fn handle(texts: &[&str]) -> IndexHandle {
        build_indexes(
            &store(texts),
            Arc::new(HashEmbedder::new(64)),
            &RetrievalConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn every_chunk_lands_in_both_legs() {
        let h = handle(&["alpha beta", "gamma delta", "epsilon"]);
        assert_eq!(h.sparse().doc_lengths.len(), 3);
        assert_eq!(h.dense().len(), 3);
    }

    #[test]
    fn punctuation_chunk_is_dense_only() {
        let h = handle(&["?!? ...", "words here"]);
        let id = h
            .chunks()
            .iter()
            .find(|c| c.text.starts_with('?'))
            .unwrap()
            .chunk_id
            .clone();
        let ord = h.ordinal(&id).unwrap();
        assert!(h.sparse().postings.values().flatten().all(|p| p.doc != ord));
        assert_eq!(h.sparse().doc_lengths[ord as usize], 0);
        assert_eq!(h.dense().len(), 2);
    }

    #[test]
    fn empty_store_is_rejected() {
        let err = build_indexes(
            &ChunkStore::default(),
            Arc::new(HashEmbedder::new(64)),
            &RetrievalConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RetrievalError::EmptyStore));
    }

    struct Wrong;
    impl Embedder for Wrong {
        fn dimension(&self) -> usize {
            16
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
            Ok(texts.iter().map(|_| vec![1.0; 8]).collect())
        }
    }

    #[test]
    fn embedder_dimension_mismatch() {
        let err = build_indexes(&store(&["a b"]), Arc::new(Wrong), &RetrievalConfig::default())
            .unwrap_err();
        assert!(matches!(err, RetrievalError::DimensionMismatch { expected: 16, got: 8, .. }));
    }

    #[test]
    fn singleton_corpus_ranks_its_chunk_first() {
        let h = handle(&["lonely chunk"]);
        assert_eq!(h.search_sparse("unrelated query", 5).len(), 1);
        let q = deterministic_vec("anything");
        assert_eq!(h.search_dense(&q, 5)[0].rank, 1);
        assert_eq!(h.hybrid_retrieve("lonely", 200).len(), 1);
    }

    fn deterministic_vec(t: &str) -> Vec<f32> {
        crate::providers::deterministic_embed(t, 64)
    }

    #[test]
    fn stored_vector_is_its_own_nearest_neighbour() {
        let h = handle(&["red fox", "blue whale", "green turtle"]);
        let target = h.chunks()[1].text.clone();
        let hits = h.search_dense(&deterministic_vec(&target), 1);
        assert_eq!(hits[0].chunk_id, h.chunks()[1].chunk_id);
        assert!((hits[0].dense_score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn small_corpus_returns_everything_in_order() {
        let h = handle(&["pending orders", "orders shipped", "invoices", "pending refunds"]);
        let c = h.hybrid_retrieve("pending orders", 200);
        assert_eq!(c.len(), 4);
        assert!(c.windows(2).all(|w| w[0].fused_score >= w[1].fused_score));
        assert_eq!(c.iter().map(|x| x.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
    }

    #[test]
    fn identity_rerank_keeps_fused_order() {
        let h = handle(&["pending orders", "orders shipped", "invoices", "pending refunds"]);
        let c = h.hybrid_retrieve("pending orders", 200);
        let sel = h.rerank_and_select("pending orders", &c, &IdentityReranker, 50);
        let got: Vec<&str> = sel.snippets.iter().map(|s| s.chunk_id.as_str()).collect();
        let want: Vec<&str> = c.iter().map(|s| s.chunk_id.as_str()).collect();
        assert_eq!(got, want);
        assert!(sel.degraded.is_none());
    }

    #[test]
    fn lexical_rerank_promotes_full_query_match() {
        let h = handle(&[
            "refund requests",
            "orders shipped yesterday",
            "late pending orders need review today",
            "pending",
        ]);
        let c = h.hybrid_retrieve("pending orders review", 200);
        let sel = h.rerank_and_select("pending orders review", &c, &LexicalReranker, 50);
        assert!(sel.snippets[0].text.contains("pending orders need review"));
        assert_eq!(sel.snippets[0].rerank_score, Some(1.0));
    }

    #[test]
    fn rerank_failure_falls_back_to_fused_order() {
        let h = handle(&["a b", "b c", "c d"]);
        let c = h.hybrid_retrieve("b", 200);
        let sel = h.rerank_and_select("b", &c, &Unavailable, 50);
        assert!(sel.degraded.is_some());
        assert_eq!(sel.snippets.len(), c.len());
        assert_eq!(sel.snippets[0].chunk_id, c[0].chunk_id);
        assert!(sel.snippets.iter().all(|s| s.rerank_score.is_none()));
    }

    #[test]
    fn fewer_candidates_than_top_n_are_not_padded() {
        let texts: Vec<String> = (0..30).map(|i| format!("term{i} shared")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let h = handle(&refs);
        let c = h.hybrid_retrieve("shared", 200);
        assert_eq!(c.len(), 30);
        let sel = h.rerank_and_select("shared", &c, &LexicalReranker, 50);
        assert_eq!(sel.snippets.len(), 30);
    }

    #[test]
    fn snippets_carry_provenance() {
        let h = handle(&["pending orders"]);
        let c = h.hybrid_retrieve("pending", 10);
        let s = &h.rerank_and_select("pending", &c, &LexicalReranker, 5).snippets[0];
        assert_eq!(s.source_uri, "file://doc0");
        assert_eq!((s.start_char, s.end_char), (0, 14));
    }
}
