//! Hierarchical navigable small-world graph for cosine nearest neighbours.
//!
//! Vectors are L2-normalized on insert, so similarity is a dot product and
//! distance is `1 - similarity`. Node levels come from a seeded ChaCha stream,
//! which makes the graph a pure function of the insertion sequence and seed.
//! Neighbour lists are chosen with the diversity heuristic and topped up with
//! the closest pruned candidates when the heuristic leaves slots free.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 keeps `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
            seed: 0x5eed,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.m < 2 {
            return Err(format!("M must be at least 2, got {}", self.m));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err("ef_construction and ef_search must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    dist: f32,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hnsw {
    params: HnswParams,
    dim: usize,
    vectors: Vec<f32>,
    /// `links[node][layer]` holds neighbour ids.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    #[serde(skip, default = "default_rng")]
    rng: Option<ChaCha8Rng>,
}

fn default_rng() -> Option<ChaCha8Rng> {
    None
}

pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Hnsw {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        Self {
            params,
            dim,
            vectors: Vec::new(),
            links: Vec::new(),
            entry: None,
            rng: Some(ChaCha8Rng::seed_from_u64(params.seed)),
        }
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Cosine similarity between a normalized query and a stored vector.
    pub fn similarity(&self, query: &[f32], id: u32) -> f32 {
        dot(query, self.vector(id))
    }

    fn dist(&self, query: &[f32], id: u32) -> f32 {
        1.0 - dot(query, self.vector(id))
    }

    fn dist_between(&self, a: u32, b: u32) -> f32 {
        1.0 - dot(self.vector(a), self.vector(b))
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn top_layer(&self, id: u32) -> usize {
        self.links[id as usize].len() - 1
    }

    fn random_level(&mut self) -> usize {
        let ml = 1.0 / (self.params.m as f64).ln();
        let seed = self.params.seed;
        let rng = self
            .rng
            .get_or_insert_with(|| ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
        let u: f64 = rng.random::<f64>();
        let u = 1.0 - u; // (0, 1]
        (-u.ln() * ml).floor() as usize
    }

    /// Appends a vector and links it into the graph; returns its id.
    ///
    /// # Panics
    /// If the vector length differs from the index dimension.
    pub fn insert(&mut self, vector: &[f32]) -> u32 {
        assert_eq!(vector.len(), self.dim, "vector dimension mismatch");
        let id = self.links.len() as u32;
        let mut v = vector.to_vec();
        normalize(&mut v);
        self.vectors.extend_from_slice(&v);
        let level = self.random_level();
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(id);
            return id;
        };

        let top = self.top_layer(entry);
        let mut ep = Scored {
            dist: self.dist(&v, entry),
            id: entry,
        };
        for layer in (level + 1..=top).rev() {
            ep = self.greedy(&v, ep, layer);
        }

        let mut eps = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let candidates = self.search_layer(&v, &eps, self.params.ef_construction, layer);
            let neighbours = self.select_neighbours(&candidates, self.params.m);
            self.links[id as usize][layer] = neighbours.iter().map(|s| s.id).collect();
            for n in &neighbours {
                self.link(n.id, id, layer);
            }
            eps = candidates;
        }

        if level > top {
            self.entry = Some(id);
        }
        id
    }

    fn link(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.max_links(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let mut scored: Vec<Scored> = self.links[from as usize][layer]
            .iter()
            .map(|&n| Scored {
                dist: self.dist_between(from, n),
                id: n,
            })
            .collect();
        scored.sort();
        let kept = self.select_neighbours(&scored, cap);
        self.links[from as usize][layer] = kept.iter().map(|s| s.id).collect();
    }

    /// Diversity heuristic over candidates sorted by ascending distance.
    fn select_neighbours(&self, sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut chosen: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned: Vec<Scored> = Vec::new();
        for &c in sorted {
            if chosen.len() >= m {
                break;
            }
            if chosen.iter().all(|r| self.dist_between(c.id, r.id) > c.dist) {
                chosen.push(c);
            } else {
                pruned.push(c);
            }
        }
        for p in pruned {
            if chosen.len() >= m {
                break;
            }
            chosen.push(p);
        }
        chosen
    }

    fn greedy(&self, query: &[f32], mut best: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in &self.links[best.id as usize][layer] {
                let cand = Scored {
                    dist: self.dist(query, n),
                    id: n,
                };
                if cand < best {
                    best = cand;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes by ascending distance.
    fn search_layer(&self, query: &[f32], eps: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        let mut frontier: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut found: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in eps {
            if !visited[e.id as usize] {
                visited[e.id as usize] = true;
                frontier.push(Reverse(e));
                found.push(e);
            }
        }
        while found.len() > ef {
            found.pop();
        }

        while let Some(Reverse(current)) = frontier.pop() {
            let worst = found.peek().copied();
            if let Some(w) = worst {
                if found.len() >= ef && current > w {
                    break;
                }
            }
            for &n in &self.links[current.id as usize][layer] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let cand = Scored {
                    dist: self.dist(query, n),
                    id: n,
                };
                let admit = found.len() < ef || found.peek().is_some_and(|w| cand < *w);
                if admit {
                    frontier.push(Reverse(cand));
                    found.push(cand);
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        found.into_sorted_vec()
    }

    /// Approximate top-`k` by cosine similarity: `(id, similarity)` pairs,
    /// best first. The beam width is `max(ef, k)`.
    pub fn search(&self, query: &[f32], k: usize, ef: usize) -> Vec<(u32, f32)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut q = query.to_vec();
        normalize(&mut q);
        let mut ep = Scored {
            dist: self.dist(&q, entry),
            id: entry,
        };
        for layer in (1..=self.top_layer(entry)).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let found = self.search_layer(&q, &[ep], ef.max(k), 0);
        found
            .into_iter()
            .take(k)
            .map(|s| (s.id, 1.0 - s.dist))
            .collect()
    }

    /// Every node scored against the query, best first.
    pub fn scan(&self, query: &[f32]) -> Vec<(u32, f32)> {
        let mut q = query.to_vec();
        normalize(&mut q);
        let mut all: Vec<Scored> = (0..self.len() as u32)
            .map(|id| Scored {
                dist: self.dist(&q, id),
                id,
            })
            .collect();
        all.sort();
        all.into_iter().map(|s| (s.id, 1.0 - s.dist)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    #[test]
    fn single_vector_is_found() {
        let mut h = Hnsw::new(8, HnswParams::default());
        h.insert(&unit(8, 3));
        let hits = h.search(&unit(8, 3), 5, 10);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 0);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_match_ranks_first() {
        let mut h = Hnsw::new(8, HnswParams::default());
        for i in 0..8 {
            let mut v = unit(8, i);
            v[(i + 1) % 8] = 0.5;
            h.insert(&v);
        }
        let mut q = unit(8, 5);
        q[6] = 0.5;
        assert_eq!(h.search(&q, 3, 16)[0].0, 5);
    }

    #[test]
    fn same_seed_same_graph() {
        let build = || {
            let mut h = Hnsw::new(8, HnswParams::default());
            for i in 0..200u32 {
                let v: Vec<f32> = (0..8).map(|d| ((i * 7 + d * 13) % 17) as f32 + 0.1).collect();
                h.insert(&v);
            }
            h
        };
        let (a, b) = (build(), build());
        assert_eq!(a.links, b.links);
        assert_eq!(a.entry, b.entry);
    }

    #[test]
    fn neighbour_lists_respect_caps() {
        let mut h = Hnsw::new(4, HnswParams { m: 4, ..HnswParams::default() });
        for i in 0..300u32 {
            let v = [(i % 7) as f32, (i % 11) as f32, (i % 13) as f32, 1.0];
            h.insert(&v);
        }
        for node in &h.links {
            for (layer, list) in node.iter().enumerate() {
                assert!(list.len() <= h.max_links(layer));
            }
        }
    }
}
