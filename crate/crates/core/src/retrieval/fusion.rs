//! Reciprocal rank fusion: `fused(d) = Σ_leg 1 / (c + rank_leg(d))` with
//! 1-based ranks. Only rank positions matter, so legs with incomparable score
//! scales combine without calibration.

use std::collections::BTreeMap;

pub const DEFAULT_RRF_K: f64 = 60.0;

/// Fuses ranked id lists. Returns `(id, fused, per-leg 1-based ranks)` sorted
/// by fused score descending, ties broken by the caller-supplied key.
pub fn reciprocal_rank_fusion<K: Ord + Clone>(
    legs: &[Vec<K>],
    c: f64,
) -> Vec<(K, f64, Vec<Option<usize>>)> {
    let mut table: BTreeMap<K, Vec<Option<usize>>> = BTreeMap::new();
    for (leg_idx, leg) in legs.iter().enumerate() {
        for (pos, id) in leg.iter().enumerate() {
            let ranks = table
                .entry(id.clone())
                .or_insert_with(|| vec![None; legs.len()]);
            if ranks[leg_idx].is_none() {
                ranks[leg_idx] = Some(pos + 1);
            }
        }
    }
    let mut fused: Vec<(K, f64, Vec<Option<usize>>)> = table
        .into_iter()
        .map(|(id, ranks)| {
            let score = ranks
                .iter()
                .flatten()
                .map(|&r| 1.0 / (c + r as f64))
                .sum();
            (id, score, ranks)
        })
        .collect();
    fused.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    fused
}
