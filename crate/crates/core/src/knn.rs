//! Brute-force nearest-neighbor selection by dot-product similarity.

use std::cmp::Ordering;

use crate::numerics::dot;

/// Returns the `k` candidate ids with the highest similarity to `anchor`,
/// most similar first. Equal similarities resolve to the lower id.
///
/// `candidates` yields `(id, feature)`; fewer than `k` candidates returns all.
pub fn top_k_similar<'a, I>(anchor: &[f64], candidates: I, k: usize) -> Vec<usize>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .map(|(id, feat)| (id, dot(anchor, feat)))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
        b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    scored.into_iter().map(|(id, _)| id).collect()
}
