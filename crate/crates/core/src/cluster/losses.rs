//! Batch losses of the clustering stage.
//!
//! A batch of `N` samples is encoded twice under independent dropout masks,
//! giving `2N` instance views (`0..N` original, `N..2N` augmented, view `v`
//! pairs with `(v + N) mod 2N`) and two `N × C` cluster-probability matrices.

use serde::{Deserialize, Serialize};

use crate::error::{KcodError, Result};
use crate::knn::top_k_similar;
use crate::numerics::{dot, log_sum_exp, norm, Mat64};

#[derive(Debug, Clone)]
pub struct ClusterBatchState {
    n: usize,
    c: usize,
    features: Vec<Vec<f64>>,
    g_orig: Mat64,
    g_aug: Mat64,
}

impl ClusterBatchState {
    const TOL: f64 = 1e-6;

    /// Validates shapes, unit-norm features and probability rows.
    pub fn new(features: Vec<Vec<f64>>, g_orig: Mat64, g_aug: Mat64) -> Result<Self> {
        let state = Self::new_unvalidated(features, g_orig, g_aug)?;
        for (v, f) in state.features.iter().enumerate() {
            if (norm(f) - 1.0).abs() > Self::TOL {
                return Err(KcodError::Parameter(format!("view {v} is not unit-norm")));
            }
        }
        for g in [&state.g_orig, &state.g_aug] {
            for r in 0..g.rows() {
                let row = g.row(r);
                if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > Self::TOL {
                    return Err(KcodError::Parameter(format!(
                        "cluster row {r} is not a probability vector"
                    )));
                }
            }
        }
        Ok(state)
    }

    /// Checks shapes only; the losses stay well defined off the sphere and
    /// simplex, which is what finite-difference probing needs.
    pub fn new_unvalidated(features: Vec<Vec<f64>>, g_orig: Mat64, g_aug: Mat64) -> Result<Self> {
        let n = g_orig.rows();
        let c = g_orig.cols();
        if g_aug.rows() != n || g_aug.cols() != c {
            return Err(KcodError::Parameter(format!(
                "cluster matrices differ in shape: {}x{} vs {}x{}",
                n,
                c,
                g_aug.rows(),
                g_aug.cols()
            )));
        }
        if features.len() != 2 * n {
            return Err(KcodError::Parameter(format!(
                "expected {} instance views for a batch of {n}, got {}",
                2 * n,
                features.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(KcodError::Parameter("instance views must share one positive dim".into()));
        }
        Ok(ClusterBatchState {
            n,
            c,
            features,
            g_orig,
            g_aug,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn clusters(&self) -> usize {
        self.c
    }

    pub fn views(&self) -> usize {
        2 * self.n
    }

    pub fn partner(&self, view: usize) -> usize {
        (view + self.n) % (2 * self.n)
    }

    pub fn feature(&self, view: usize) -> &[f64] {
        &self.features[view]
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn g_orig(&self) -> &Mat64 {
        &self.g_orig
    }

    pub fn g_aug(&self) -> &Mat64 {
        &self.g_aug
    }

    /// Cluster probabilities of a view.
    pub fn g_row(&self, view: usize) -> &[f64] {
        if view < self.n {
            self.g_orig.row(view)
        } else {
            self.g_aug.row(view - self.n)
        }
    }

    pub fn g_rows(&self) -> Vec<&[f64]> {
        (0..self.views()).map(|v| self.g_row(v)).collect()
    }
}

/// One contrastive term: loss and its gradient with respect to each similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrads {
    pub loss: f64,
    pub d_positive: f64,
    pub d_negatives: Vec<f64>,
}

/// `−log( e^{s⁺/τ} / (e^{s⁺/τ} + Σ_k e^{s_k/τ}) )` and its partials:
/// `∂/∂s_k = (1/τ)·e^{s_k/τ} / denominator`, `∂/∂s⁺ = (1/τ)(e^{s⁺/τ}/denominator − 1)`.
pub fn contrastive_from_similarities(positive: f64, negatives: &[f64], tau: f64) -> SimilarityGrads {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(positive / tau);
    logits.extend(negatives.iter().map(|s| s / tau));
    let lse = log_sum_exp(&logits);
    SimilarityGrads {
        loss: lse - positive / tau,
        d_positive: ((logits[0] - lse).exp() - 1.0) / tau,
        d_negatives: logits[1..].iter().map(|l| (l - lse).exp() / tau).collect(),
    }
}

/// Adds one anchor's contrastive term (dot-product similarities) with weight
/// `weight` and accumulates gradients into `grads` for anchor, positive and
/// every negative.
fn contrast_anchor(
    features: &[Vec<f64>],
    anchor: usize,
    positive: usize,
    negatives: &[usize],
    tau: f64,
    weight: f64,
    grads: &mut [Vec<f64>],
) -> f64 {
    let fa = &features[anchor];
    let pos_sim = dot(fa, &features[positive]);
    let neg_sims: Vec<f64> = negatives.iter().map(|&k| dot(fa, &features[k])).collect();
    let term = contrastive_from_similarities(pos_sim, &neg_sims, tau);
    let pairs = std::iter::once((positive, term.d_positive))
        .chain(negatives.iter().copied().zip(term.d_negatives.iter().copied()));
    for (k, ds) in pairs {
        let w = weight * ds;
        for d in 0..fa.len() {
            let (a_val, k_val) = (features[anchor][d], features[k][d]);
            grads[anchor][d] += w * k_val;
            grads[k][d] += w * a_val;
        }
    }
    weight * term.loss
}

#[derive(Debug, Clone)]
pub struct ClusterLevelOutput {
    pub loss: f64,
    pub grad_orig: Mat64,
    pub grad_aug: Mat64,
}

/// Contrast over the `2C` cluster columns: column `i` of the original matrix
/// pairs with column `i` of the augmented one; cosine similarity; mean over
/// all `2C` anchors.
pub fn cluster_level_loss(state: &ClusterBatchState, tau: f64) -> Result<ClusterLevelOutput> {
    let (n, c) = (state.n, state.c);
    if c < 2 {
        return Err(KcodError::Parameter("cluster-level loss needs C >= 2".into()));
    }
    if !(tau > 0.0) {
        return Err(KcodError::Parameter("cluster temperature must be > 0".into()));
    }
    let columns: Vec<Vec<f64>> = (0..c)
        .map(|j| state.g_orig.column(j))
        .chain((0..c).map(|j| state.g_aug.column(j)))
        .collect();
    let norms: Vec<f64> = columns.iter().map(|y| norm(y)).collect();
    if let Some(j) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(KcodError::Degenerate(format!(
            "cluster column {j} has no probability mass"
        )));
    }
    let unit: Vec<Vec<f64>> = columns
        .iter()
        .zip(&norms)
        .map(|(y, nv)| y.iter().map(|v| v / nv).collect())
        .collect();
    let m = 2 * c;
    let sims: Vec<Vec<f64>> = (0..m)
        .map(|a| (0..m).map(|b| dot(&unit[a], &unit[b])).collect())
        .collect();

    let weight = 1.0 / m as f64;
    let mut col_grads = vec![vec![0.0; n]; m];
    let mut loss = 0.0;
    for a in 0..m {
        let p = (a + c) % m;
        let others: Vec<usize> = (0..m).filter(|&k| k != a && k != p).collect();
        let neg_sims: Vec<f64> = others.iter().map(|&k| sims[a][k]).collect();
        let term = contrastive_from_similarities(sims[a][p], &neg_sims, tau);
        loss += weight * term.loss;
        let pairs = std::iter::once((p, term.d_positive))
            .chain(others.iter().copied().zip(term.d_negatives.iter().copied()));
        for (k, ds) in pairs {
            let w = weight * ds;
            let s = sims[a][k];
            // ∂cos(y_a, y_k)/∂y_a = (ŷ_k − cos·ŷ_a)/‖y_a‖, symmetric for y_k.
            for r in 0..n {
                col_grads[a][r] += w * (unit[k][r] - s * unit[a][r]) / norms[a];
                col_grads[k][r] += w * (unit[a][r] - s * unit[k][r]) / norms[k];
            }
        }
    }
    let mut grad_orig = Mat64::zeros(n, c);
    let mut grad_aug = Mat64::zeros(n, c);
    for j in 0..c {
        for r in 0..n {
            grad_orig.set(r, j, col_grads[j][r]);
            grad_aug.set(r, j, col_grads[c + j][r]);
        }
    }
    Ok(ClusterLevelOutput {
        loss,
        grad_orig,
        grad_aug,
    })
}

#[derive(Debug, Clone)]
pub struct InstanceOutput {
    pub loss: f64,
    /// Gradient with respect to each of the `2N` views.
    pub grads: Vec<Vec<f64>>,
}

/// Standard `2N`-view InfoNCE: positive is the partner view, the denominator
/// covers all other `2N − 1` views. Mean over anchors.
pub fn instance_level_loss(state: &ClusterBatchState, tau: f64) -> Result<InstanceOutput> {
    if state.n < 2 {
        return Err(KcodError::Parameter("instance-level loss needs N >= 2".into()));
    }
    if !(tau > 0.0) {
        return Err(KcodError::Parameter("temperature must be > 0".into()));
    }
    let m = state.views();
    let dim = state.features[0].len();
    let weight = 1.0 / m as f64;
    let mut grads = vec![vec![0.0; dim]; m];
    let mut loss = 0.0;
    for a in 0..m {
        let p = state.partner(a);
        let negatives: Vec<usize> = (0..m).filter(|&k| k != a && k != p).collect();
        loss += contrast_anchor(&state.features, a, p, &negatives, tau, weight, &mut grads);
    }
    Ok(InstanceOutput { loss, grads })
}

/// Views (other than `anchor` and `partner`) whose cluster-probability dot
/// product with the anchor is strictly below `threshold`. Views at or above
/// the threshold are presumed same-cluster and never pushed away.
pub fn filter_false_negatives(
    anchor: usize,
    partner: Option<usize>,
    probs: &[&[f64]],
    threshold: f64,
) -> Vec<usize> {
    let ga = probs[anchor];
    (0..probs.len())
        .filter(|&k| k != anchor && Some(k) != partner)
        .filter(|&k| dot(ga, probs[k]) < threshold)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegativeSet {
    pub anchor: usize,
    pub positive: usize,
    /// Hardest first.
    pub negatives: Vec<usize>,
}

/// The `k_neg` candidates most similar to the anchor feature (ties to the lower index).
pub fn knn_hard_negatives(
    anchor: usize,
    positive: usize,
    candidates: &[usize],
    features: &[Vec<f64>],
    k_neg: usize,
) -> HardNegativeSet {
    let negatives = top_k_similar(
        &features[anchor],
        candidates.iter().map(|&k| (k, features[k].as_slice())),
        k_neg,
    );
    HardNegativeSet {
        anchor,
        positive,
        negatives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KccConfig {
    pub threshold: f64,
    pub k_neg: usize,
    pub temperature: f64,
    pub cluster_temperature: f64,
    pub reg_weight: f64,
}

impl Default for KccConfig {
    fn default() -> Self {
        KccConfig {
            threshold: 0.7,
            k_neg: 400,
            temperature: 0.5,
            cluster_temperature: 1.0,
            reg_weight: 1.0,
        }
    }
}

impl KccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(KcodError::Parameter(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.k_neg == 0 {
            return Err(KcodError::Parameter("K_neg must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.cluster_temperature > 0.0) {
            return Err(KcodError::Parameter("temperatures must be > 0".into()));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(KcodError::Parameter("regularizer weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KccOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub hard_negatives: Vec<HardNegativeSet>,
}

/// Instance contrast restricted to `H_i = {partner} ∪ N_i`, where `N_i` are the
/// `k_neg` hardest views that survive the false-negative filter. Anchors with
/// an empty `N_i` contribute zero. Mean over the `2N` anchors.
pub fn kcc_loss(state: &ClusterBatchState, cfg: &KccConfig) -> Result<KccOutput> {
    cfg.validate()?;
    let m = state.views();
    let dim = state.features[0].len();
    let probs = state.g_rows();
    let weight = 1.0 / m as f64;
    let mut grads = vec![vec![0.0; dim]; m];
    let mut loss = 0.0;
    let mut sets = Vec::with_capacity(m);
    for a in 0..m {
        let p = state.partner(a);
        let candidates = filter_false_negatives(a, Some(p), &probs, cfg.threshold);
        let set = knn_hard_negatives(a, p, &candidates, &state.features, cfg.k_neg);
        if !set.negatives.is_empty() {
            loss += contrast_anchor(
                &state.features,
                a,
                p,
                &set.negatives,
                cfg.temperature,
                weight,
                &mut grads,
            );
        }
        sets.push(set);
    }
    Ok(KccOutput {
        loss,
        grads,
        hard_negatives: sets,
    })
}

/// `log C + Σ_c p̄_c log p̄_c` with `p̄` the column mean of `g`: zero for
/// balanced usage, `log C` when one cluster takes everything.
pub fn entropy_regularizer(g: &Mat64) -> (f64, Mat64) {
    let (n, c) = (g.rows(), g.cols());
    let mean: Vec<f64> = (0..c)
        .map(|j| (0..n).map(|r| g.get(r, j)).sum::<f64>() / n as f64)
        .collect();
    let neg_entropy: f64 = mean
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let mut grad = Mat64::zeros(n, c);
    for j in 0..c {
        let d = (mean[j].max(f64::MIN_POSITIVE).ln() + 1.0) / n as f64;
        for r in 0..n {
            grad.set(r, j, d);
        }
    }
    ((c as f64).ln() + neg_entropy, grad)
}
