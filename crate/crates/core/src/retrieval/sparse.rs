//! Okapi BM25 over an inverted index of chunk terms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1 > 0.0) {
            return Err(format!("k1 must be positive, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(format!("b must lie in [0, 1], got {}", self.b));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index keyed by lowercased term. Documents are dense ordinals;
/// postings are sorted by ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_lengths: Vec<u32>,
    pub avg_doc_length: f64,
    pub params: Bm25Params,
}

impl SparseIndex {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        for (doc, text) in texts.into_iter().enumerate() {
            let terms = text::index_terms(text);
            doc_lengths.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        Self {
            postings,
            doc_lengths,
            avg_doc_length,
            params,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_frequency(&self, term: &str, doc: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&doc, |x| x.doc).ok().map(|i| p[i].tf))
            .unwrap_or(0)
    }

    fn saturation(&self, tf: f64, doc: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let dl = f64::from(self.doc_lengths[doc as usize]);
        let norm = if self.avg_doc_length > 0.0 {
            1.0 - b + b * dl / self.avg_doc_length
        } else {
            1.0
        };
        tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 of `query_terms` against one document. Repeated query terms count
    /// once per occurrence; absent terms contribute nothing.
    pub fn score(&self, query_terms: &[String], doc: u32) -> f64 {
        query_terms
            .iter()
            .map(|t| {
                let tf = self.term_frequency(t, doc);
                if tf == 0 {
                    0.0
                } else {
                    self.idf(t) * self.saturation(f64::from(tf), doc)
                }
            })
            .sum()
    }

    /// Scores for every document, accumulated through the postings lists.
    pub fn score_all(&self, query_terms: &[String]) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_docs()];
        for t in query_terms {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let idf = self.idf(t);
            for p in list {
                acc[p.doc as usize] += idf * self.saturation(f64::from(p.tf), p.doc);
            }
        }
        acc
    }

    /// Top `k` documents by score, ties broken by ordinal. Zero-score documents
    /// are ranked after every match, so `k >= num_docs()` returns everything.
    pub fn search(&self, query_terms: &[String], k: usize) -> Vec<(u32, f64)> {
        let scores = self.score_all(query_terms);
        let mut ranked: Vec<(u32, f64)> = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| (i as u32, s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(q: &str) -> Vec<String> {
        text::index_terms(q)
    }

    fn toy() -> SparseIndex {
        SparseIndex::build(
            [
                "orders pending review",
                "shipped orders and closed orders",
                "returns are closed",
            ],
            Bm25Params::default(),
        )
    }

    #[test]
    fn absent_terms_score_zero() {
        let idx = toy();
        assert_eq!(idx.score(&terms("zebra"), 0), 0.0);
        assert_eq!(idx.score(&terms("pending"), 1), 0.0);
    }

    #[test]
    fn pending_matches_hand_evaluation() {
        // N = 3, n(pending) = 1, doc 0 has 3 terms, avgdl = (3 + 5 + 3) / 3
        let idx = toy();
        let idf = (1.0f64 + (3.0 - 1.0 + 0.5) / (1.0 + 0.5)).ln();
        let avgdl = 11.0 / 3.0;
        let norm = 1.0 - 0.75 + 0.75 * 3.0 / avgdl;
        let expected = idf * (1.0 * 2.2) / (1.0 + 1.2 * norm);
        let got = idx.score(&terms("pending"), 0);
        assert!((got - expected).abs() <= 1e-12 * expected, "{got} vs {expected}");
    }

    #[test]
    fn duplicate_query_terms_double_the_score() {
        let idx = toy();
        let one = idx.score(&terms("closed"), 2);
        let two = idx.score(&terms("closed closed"), 2);
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn postings_are_sorted_and_scores_agree() {
        let idx = toy();
        for list in idx.postings.values() {
            assert!(list.windows(2).all(|w| w[0].doc < w[1].doc));
        }
        let q = terms("closed orders pending");
        let all = idx.score_all(&q);
        for d in 0..3 {
            assert!((all[d] - idx.score(&q, d as u32)).abs() < 1e-12);
        }
    }

    #[test]
    fn search_returns_everything_when_k_is_large() {
        let idx = toy();
        let hits = idx.search(&terms("orders"), 10);
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].0, 1);
        assert_eq!(hits[2], (2, 0.0));
    }

    #[test]
    fn punctuation_only_documents_have_no_postings() {
        let idx = SparseIndex::build(["!!! ...", "real words"], Bm25Params::default());
        assert_eq!(idx.doc_lengths, [0, 2]);
        assert!(idx.postings.values().flatten().all(|p| p.doc == 1));
    }

    #[test]
    fn parameter_validation() {
        assert!(Bm25Params { k1: 0.0, b: 0.5 }.validate().is_err());
        assert!(Bm25Params { k1: 1.0, b: 1.5 }.validate().is_err());
        assert!(Bm25Params::default().validate().is_ok());
    }
}
