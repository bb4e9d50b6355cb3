//! Clustering and representation metrics.
//!
//! Labels need not be contiguous; every function re-indexes internally.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{KcodError, Result};
use crate::numerics::{cosine_sim, euclidean};

/// Ids with aligned labels; the unit `cmd evaluate` matches on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl Labeling {
    pub fn new(ids: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(KcodError::Parameter(format!(
                "{} ids but {} labels",
                ids.len(),
                labels.len()
            )));
        }
        Ok(Labeling { ids, labels })
    }

    pub fn from_pairs(pairs: Vec<(String, usize)>) -> Self {
        let (ids, labels) = pairs.into_iter().unzip();
        Labeling { ids, labels }
    }

    /// Labels of `self`, reordered to follow `reference.ids`.
    pub fn aligned_to(&self, reference: &Labeling) -> Result<Vec<usize>> {
        let mut by_id = BTreeMap::new();
        for (id, &l) in self.ids.iter().zip(&self.labels) {
            if by_id.insert(id.as_str(), l).is_some() {
                return Err(KcodError::Alignment(format!("duplicate id {id}")));
            }
        }
        if by_id.len() != reference.ids.len() {
            if let Some(extra) = by_id.keys().find(|id| !reference.ids.iter().any(|r| r == *id)) {
                return Err(KcodError::Alignment(format!("id {extra} is not in the reference")));
            }
        }
        reference
            .ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| KcodError::Alignment(format!("missing id {id}")))
            })
            .collect()
    }
}

fn check_aligned(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(KcodError::Parameter(format!(
            "labelings differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Dense re-indexing in ascending label order.
fn reindex(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let distinct: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let dense = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    (dense, distinct)
}

/// Rows follow sorted truth labels, columns sorted predicted labels.
struct Contingency {
    counts: Vec<Vec<usize>>,
    truth_labels: Vec<usize>,
    pred_labels: Vec<usize>,
    n: usize,
}

impl Contingency {
    fn new(pred: &[usize], truth: &[usize]) -> Self {
        let (p, pred_labels) = reindex(pred);
        let (t, truth_labels) = reindex(truth);
        let mut counts = vec![vec![0usize; pred_labels.len()]; truth_labels.len()];
        for (&pi, &ti) in p.iter().zip(&t) {
            counts[ti][pi] += 1;
        }
        Contingency {
            counts,
            truth_labels,
            pred_labels,
            n: pred.len(),
        }
    }

    fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        (0..self.pred_labels.len())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// Optimal truth-row → predicted-column matching.
    fn matching(&self) -> Vec<Option<usize>> {
        let weights: Vec<Vec<f64>> = self
            .counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect();
        hungarian_max(&weights)
    }
}

/// Maximum-weight one-to-one assignment of rows to columns of a rectangular
/// matrix (zero-padded to square). Returns each row's column, `None` when the
/// row was matched to padding.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let top = weights
        .iter()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max);
    let cost = |i: usize, j: usize| -> f64 {
        let w = if i < rows && j < cols { weights[i][j] } else { 0.0 };
        top - w
    };

    // Shortest augmenting path with potentials; 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Fraction of points correct under the best one-to-one cluster→class mapping.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_aligned(pred, truth)?;
    if pred.is_empty() {
        return Err(KcodError::UndefinedMetric("accuracy of an empty labeling".into()));
    }
    let table = Contingency::new(pred, truth);
    let matched: usize = table
        .matching()
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| table.counts[r][c]))
        .sum();
    Ok(matched as f64 / table.n as f64)
}

/// The optimal mapping as `predicted label → true label`; clusters left
/// without a class are absent.
pub fn optimal_mapping(pred: &[usize], truth: &[usize]) -> Result<BTreeMap<usize, usize>> {
    check_aligned(pred, truth)?;
    let table = Contingency::new(pred, truth);
    Ok(table
        .matching()
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (table.pred_labels[c], table.truth_labels[r])))
        .collect())
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_aligned(pred, truth)?;
    if pred.len() < 2 {
        return Err(KcodError::UndefinedMetric("ARI needs at least 2 points".into()));
    }
    let table = Contingency::new(pred, truth);
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let expected = a * b / comb2(table.n);
    let max = (a + b) / 2.0;
    if max == expected {
        // Both partitions trivial in the same way (all singletons or one block).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNormalization {
    #[default]
    Geometric,
    Arithmetic,
}

fn entropy(sums: &[usize], n: usize) -> f64 {
    sums.iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Geometric)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    check_aligned(pred, truth)?;
    if pred.is_empty() {
        return Err(KcodError::UndefinedMetric("NMI of an empty labeling".into()));
    }
    let table = Contingency::new(pred, truth);
    let n = table.n as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let (ht, hp) = (entropy(&rows, table.n), entropy(&cols, table.n));
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNormalization::Geometric => (ht * hp).sqrt(),
        NmiNormalization::Arithmetic => (ht + hp) / 2.0,
    };
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Mean silhouette with Euclidean distance; singleton clusters score 0.
pub fn silhouette<P: AsRef<[f64]> + Sync>(features: &[P], assignments: &[usize]) -> Result<f64> {
    if features.len() != assignments.len() {
        return Err(KcodError::Parameter(format!(
            "{} features but {} assignments",
            features.len(),
            assignments.len()
        )));
    }
    let (dense, labels) = reindex(assignments);
    let k = labels.len();
    if k < 2 {
        return Err(KcodError::UndefinedMetric(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let mut sizes = vec![0usize; k];
    for &c in &dense {
        sizes[c] += 1;
    }
    let scores: Vec<f64> = (0..features.len())
        .into_par_iter()
        .map(|i| {
            let own = dense[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let fi = features[i].as_ref();
            for (j, fj) in features.iter().enumerate() {
                if j != i {
                    sums[dense[j]] += euclidean(fi, fj.as_ref());
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / features.len() as f64)
}

/// Per-class centroids (arithmetic means), keyed by label.
fn centroids<P: AsRef<[f64]>>(features: &[P], labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    if features.len() != labels.len() {
        return Err(KcodError::Parameter(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        let f = f.as_ref();
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; f.len()], 0));
        entry.0.iter_mut().zip(f).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

const NEAREST_CENTERS: usize = 3;

/// `(intra, inter)`: mean `1 − cos` of samples to their class centre, and of
/// each centre to its three nearest other centres (all others below 4 classes).
pub fn intra_inter_distances<P: AsRef<[f64]>>(features: &[P], labels: &[usize]) -> Result<(f64, f64)> {
    let centers = centroids(features, labels)?;
    if centers.len() < 2 {
        return Err(KcodError::Parameter("distance analysis needs >= 2 classes".into()));
    }
    let mut intra = 0.0;
    for (f, l) in features.iter().zip(labels) {
        intra += 1.0 - cosine_sim(f.as_ref(), &centers[l])?;
    }
    intra /= features.len() as f64;

    let list: Vec<&Vec<f64>> = centers.values().collect();
    let take = if list.len() > NEAREST_CENTERS { NEAREST_CENTERS } else { list.len() - 1 };
    let mut inter = 0.0;
    for (i, ci) in list.iter().enumerate() {
        let mut sims = Vec::with_capacity(list.len() - 1);
        for (j, cj) in list.iter().enumerate() {
            if i != j {
                sims.push(cosine_sim(ci, cj)?);
            }
        }
        sims.sort_by(|a, b| b.total_cmp(a));
        inter += sims[..take].iter().map(|s| 1.0 - s).sum::<f64>() / take as f64;
    }
    inter /= list.len() as f64;
    Ok((intra, inter))
}

/// Intra-distances at or below this are treated as zero.
pub const COMPACTNESS_EPS: f64 = 1e-12;

/// Ratio of class `class`'s mean centre-to-other-centres distance to its mean
/// member-to-centre distance. `+inf` when the class has collapsed.
pub fn compactness_ratio<P: AsRef<[f64]>>(features: &[P], labels: &[usize], class: usize) -> Result<f64> {
    let centers = centroids(features, labels)?;
    compactness_from_centers(features, labels, &centers, class)
}

fn compactness_from_centers<P: AsRef<[f64]>>(
    features: &[P],
    labels: &[usize],
    centers: &BTreeMap<usize, Vec<f64>>,
    class: usize,
) -> Result<f64> {
    if centers.len() < 2 {
        return Err(KcodError::Parameter("compactness needs >= 2 classes".into()));
    }
    let center = centers
        .get(&class)
        .ok_or_else(|| KcodError::Parameter(format!("class {class} has no members")))?;
    let mut sep = 0.0;
    for (l, other) in centers {
        if *l != class {
            sep += 1.0 - cosine_sim(center, other)?;
        }
    }
    sep /= (centers.len() - 1) as f64;
    let (mut spread, mut count) = (0.0, 0usize);
    for (f, &l) in features.iter().zip(labels) {
        if l == class {
            spread += 1.0 - cosine_sim(f.as_ref(), center)?;
            count += 1;
        }
    }
    spread /= count as f64;
    if spread <= COMPACTNESS_EPS {
        return Ok(f64::INFINITY);
    }
    Ok(sep / spread)
}

pub fn per_class_compactness<P: AsRef<[f64]>>(
    features: &[P],
    labels: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let centers = centroids(features, labels)?;
    centers
        .keys()
        .map(|&c| Ok((c, compactness_from_centers(features, labels, &centers, c)?)))
        .collect()
}

/// Rows are true classes, columns the predicted clusters matched to each class
/// (then any unmatched clusters).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<usize>,
    /// Predicted cluster in each column; `None` where a class got no cluster.
    pub columns: Vec<Option<usize>>,
    pub counts: Vec<Vec<usize>>,
    pub percent: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn diagonal_sum(&self) -> usize {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class");
        for (i, col) in self.columns.iter().enumerate() {
            match col {
                Some(c) => out.push_str(&format!(",cluster_{c}")),
                None => out.push_str(&format!(",unmatched_{i}")),
            }
        }
        out.push('\n');
        for (class, row) in self.classes.iter().zip(&self.percent) {
            out.push_str(&class.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| KcodError::io(path, e))
    }
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize]) -> Result<ConfusionMatrix> {
    check_aligned(pred, truth)?;
    let table = Contingency::new(pred, truth);
    let matching = table.matching();
    let mut order: Vec<Option<usize>> = matching.clone();
    let matched: BTreeSet<usize> = matching.iter().flatten().copied().collect();
    order.extend((0..table.pred_labels.len()).filter(|c| !matched.contains(c)).map(Some));

    let counts: Vec<Vec<usize>> = table
        .counts
        .iter()
        .map(|row| order.iter().map(|c| c.map_or(0, |c| row[c])).collect())
        .collect();
    let percent = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| 100.0 * c as f64 / total as f64).collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        classes: table.truth_labels.clone(),
        columns: order.iter().map(|c| c.map(|c| table.pred_labels[c])).collect(),
        counts,
        percent,
    })
}

fn ratios_with_inf<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    #[serde(untagged)]
    enum Ratio {
        Finite(f64),
        Text(&'static str),
    }
    s.collect_map(map.iter().map(|(k, &v)| {
        let r = if v.is_finite() { Ratio::Finite(v) } else { Ratio::Text("inf") };
        (k.to_string(), r)
    }))
}

/// Every metric for one prediction against ground truth. Infinite
/// compactness ratios serialize as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    /// Absent when the prediction has a single cluster.
    pub sc: Option<f64>,
    pub intra_dist: f64,
    pub inter_dist: f64,
    #[serde(serialize_with = "ratios_with_inf")]
    pub per_class_compactness: BTreeMap<usize, f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Builds the report. Distances and compactness use the true classes;
/// silhouette uses the predicted clusters.
pub fn evaluate<P: AsRef<[f64]> + Sync>(
    features: &[P],
    pred: &[usize],
    truth: &[usize],
    norm: NmiNormalization,
) -> Result<EvalReport> {
    check_aligned(pred, truth)?;
    if features.len() != pred.len() {
        return Err(KcodError::Parameter("features and labelings differ in length".into()));
    }
    let sc = match silhouette(features, pred) {
        Ok(v) => Some(v),
        Err(KcodError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let (intra_dist, inter_dist) = intra_inter_distances(features, truth)?;
    Ok(EvalReport {
        n: pred.len(),
        acc: clustering_accuracy(pred, truth)?,
        ari: ari(pred, truth)?,
        nmi: nmi_with(pred, truth, norm)?,
        sc,
        intra_dist,
        inter_dist,
        per_class_compactness: per_class_compactness(features, truth)?,
        confusion: confusion_matrix(pred, truth)?.counts,
    })
}
