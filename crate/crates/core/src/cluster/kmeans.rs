//! Lloyd's k-means with k-means++ seeding, and cluster-count estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KcodError, Result};
use crate::numerics::{derive_seed, squared_euclidean};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 100,
            restarts: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = squared_euclidean(point, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_euclidean(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], k: usize, max_iter: usize, seed: u64) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = points[0].as_ref().len();
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dist = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p.as_ref(), &centroids);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dist.push(d);
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        // Empty clusters take the point farthest from its centroid.
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let far = (0..points.len())
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a donor cluster");
            sizes[assignments[far]] -= 1;
            assignments[far] = empty;
            sizes[empty] = 1;
            dist[far] = 0.0;
            changed = true;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a].iter_mut().zip(p.as_ref()).for_each(|(s, v)| *s += v);
        }
        for (c, s) in sums.into_iter().enumerate() {
            centroids[c] = s.into_iter().map(|v| v / sizes[c] as f64).collect();
        }
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| squared_euclidean(p.as_ref(), &centroids[a]))
            .sum();
        history.push(inertia);
        if !changed {
            break;
        }
    }
    KMeansResult {
        assignments,
        centroids,
        inertia: *history.last().expect("at least one iteration"),
        history,
    }
}

/// Best-inertia result over `cfg.restarts` seeded runs.
pub fn kmeans<P: AsRef<[f64]> + Sync>(points: &[P], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 {
        return Err(KcodError::Parameter("k must be >= 1".into()));
    }
    if cfg.k > points.len() {
        return Err(KcodError::Parameter(format!(
            "k = {} exceeds the {} points",
            cfg.k,
            points.len()
        )));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(KcodError::Parameter("points differ in dimension".into()));
    }
    let runs: Vec<KMeansResult> = (0..cfg.restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| lloyd(points, cfg.k, cfg.max_iter, derive_seed(cfg.seed, r)))
        .collect();
    let mut best: Option<KMeansResult> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters whose size reaches the mean size `n / k_prime`, never below 1.
pub fn count_confident_clusters(sizes: &[usize], n: usize) -> usize {
    let k_prime = sizes.len();
    sizes.iter().filter(|&&s| s * k_prime >= n).count().max(1)
}

/// Over-cluster with `k_prime` centroids and count the well-populated clusters.
pub fn estimate_k<P: AsRef<[f64]> + Sync>(features: &[P], k_prime: usize, seed: u64) -> Result<usize> {
    let result = kmeans(features, &KMeansConfig::new(k_prime, seed))?;
    Ok(count_confident_clusters(&result.sizes(), features.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 3.0], vec![-2.0, 5.0]];
        let r = kmeans(&pts, &KMeansConfig::new(3, 0)).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut sorted = r.assignments.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn two_pairs() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![50.0, 0.0], vec![50.0, 1.0]];
        let r = kmeans(&pts, &KMeansConfig::new(2, 4)).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let c = &r.centroids[r.assignments[0]];
        assert_eq!(c, &vec![0.0, 0.5]);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![0.0]; 3];
        assert!(matches!(kmeans(&pts, &KMeansConfig::new(4, 0)), Err(KcodError::Parameter(_))));
        assert!(matches!(kmeans(&pts, &KMeansConfig::new(0, 0)), Err(KcodError::Parameter(_))));
    }

    #[test]
    fn duplicate_points_do_not_leave_empty_clusters() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let r = kmeans(&pts, &KMeansConfig::new(3, 2)).unwrap();
        assert!(r.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn confident_count_examples() {
        assert_eq!(count_confident_clusters(&[30, 25, 20, 15, 4, 3, 2, 1, 0, 0], 100), 4);
        assert_eq!(count_confident_clusters(&[10; 10], 100), 10);
        assert_eq!(count_confident_clusters(&[1, 1, 1], 300), 1);
    }
}
