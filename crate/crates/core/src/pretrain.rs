//! IND pre-training: cross-entropy plus the K-nearest-neighbor contrastive
//! objective over a dynamically refreshed same-class queue.
//!
//! For an anchor `f_i` with label `y_i`, the positives `K_i` are the `K`
//! queue entries of class `y_i` most similar to `f_i`, and each positive is
//! contrasted against every queue entry of a different class:
//!
//! ```text
//! L = Σ_i  −1/|K_i| Σ_{j∈K_i} log( exp(f_i·f_j/τ) / (exp(f_i·f_j/τ) + Σ_{k: y_k≠y_i} exp(f_i·f_k/τ)) )
//! ```
//!
//! With `K` at least the same-class population this is the supervised
//! contrastive objective; smaller `K` only pulls each anchor toward its nearest
//! same-class neighbours, which leaves room for intra-class spread.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{KcodError, Result};
use crate::knn::top_k_similar;
use crate::model::{AdamState, EncoderModel, HeadGradients};
use crate::numerics::{derive_seed, dot, log_sum_exp, softmax_unchecked};

/// Same-class samples enqueued per batch sample on every refresh.
pub const REFRESH_PER_SAMPLE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub feature: Vec<f64>,
    pub label: usize,
    /// Index of the training sample the entry was encoded from.
    pub source: usize,
}

/// Fixed-capacity FIFO of encoded features. Entries are constants to the loss.
#[derive(Debug, Clone)]
pub struct ContrastQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl ContrastQueue {
    pub fn new(capacity: usize) -> Self {
        ContrastQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn for_batch_size(batch_size: usize) -> Self {
        Self::new(REFRESH_PER_SAMPLE * batch_size)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &QueueEntry {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, entry: QueueEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }
}

/// Sample indices grouped by label.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    members: BTreeMap<usize, Vec<usize>>,
}

impl ClassIndex {
    pub fn new(labels: &[usize]) -> Self {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            members.entry(l).or_default().push(i);
        }
        ClassIndex { members }
    }

    pub fn members(&self, label: usize) -> &[usize] {
        self.members.get(&label).map_or(&[], Vec::as_slice)
    }
}

/// For every batch sample, encodes [`REFRESH_PER_SAMPLE`] random training
/// samples of its class with the current model and enqueues them.
///
/// The anchor itself is excluded from its own draw whenever its class has
/// another member. Draws are without replacement while the class is large
/// enough, then with replacement.
pub fn refresh_queue<R: Rng>(
    queue: &mut ContrastQueue,
    model: &EncoderModel,
    batch: &[usize],
    data: &Dataset,
    classes: &ClassIndex,
    rng: &mut R,
) -> Result<()> {
    for &anchor in batch {
        let label = data.samples[anchor].label;
        let members = classes.members(label);
        if members.is_empty() {
            return Err(KcodError::Dataset(format!(
                "class {label} has no training examples"
            )));
        }
        let pool: Vec<usize> = if members.len() > 1 {
            members.iter().copied().filter(|&m| m != anchor).collect()
        } else {
            members.to_vec()
        };
        let picks: Vec<usize> = if pool.len() >= REFRESH_PER_SAMPLE {
            index::sample(rng, pool.len(), REFRESH_PER_SAMPLE)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            let mut p = pool.clone();
            while p.len() < REFRESH_PER_SAMPLE {
                p.push(pool[rng.random_range(0..pool.len())]);
            }
            p
        };
        for src in picks {
            let act = model.encode(&data.samples[src].features)?;
            queue.push(QueueEntry {
                feature: act.f,
                label,
                source: src,
            });
        }
    }
    Ok(())
}

/// Queue indices of the `k` same-class entries most similar to `anchor`
/// (ties to the lower queue index). Entries encoded from `exclude_source`
/// are skipped.
pub fn knn_same_class(
    anchor: &[f64],
    queue: &ContrastQueue,
    label: usize,
    k: usize,
    exclude_source: Option<usize>,
) -> Vec<usize> {
    let candidates = queue
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == label && Some(e.source) != exclude_source)
        .map(|(i, e)| (i, e.feature.as_slice()));
    top_k_similar(anchor, candidates, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KclConfig {
    /// Number of nearest same-class positives; `usize::MAX` gives the SCL limit.
    pub k: usize,
    pub temperature: f64,
    pub ce_weight: f64,
}

impl Default for KclConfig {
    fn default() -> Self {
        KclConfig {
            k: 3,
            temperature: 0.5,
            ce_weight: 1.0,
        }
    }
}

impl KclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(KcodError::Parameter("KCL needs K >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(KcodError::Parameter("KCL temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KclAnchor<'a> {
    pub feature: &'a [f64],
    pub label: usize,
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KclOutput {
    /// Sum over anchors.
    pub loss: f64,
    /// Gradient of `loss` with respect to each anchor feature.
    pub grads: Vec<Vec<f64>>,
    /// Anchors that had at least one positive.
    pub active: usize,
}

pub fn kcl_loss(anchors: &[KclAnchor<'_>], queue: &ContrastQueue, cfg: &KclConfig) -> Result<KclOutput> {
    cfg.validate()?;
    if queue.is_empty() {
        return Err(KcodError::EmptyObjective("contrast queue is empty".into()));
    }
    let tau = cfg.temperature;
    let mut loss = 0.0;
    let mut active = 0;
    let mut grads = Vec::with_capacity(anchors.len());
    for a in anchors {
        let mut grad = vec![0.0; a.feature.len()];
        let positives = knn_same_class(a.feature, queue, a.label, cfg.k, a.source);
        if positives.is_empty() {
            grads.push(grad);
            continue;
        }
        active += 1;
        let negatives: Vec<&QueueEntry> = queue.iter().filter(|e| e.label != a.label).collect();
        let neg_logits: Vec<f64> = negatives
            .iter()
            .map(|e| dot(a.feature, &e.feature) / tau)
            .collect();
        let weight = 1.0 / positives.len() as f64;
        let mut neg_coeff = vec![0.0; negatives.len()];
        let mut logits = Vec::with_capacity(negatives.len() + 1);
        for &p in &positives {
            let pos = queue.get(p);
            let pos_logit = dot(a.feature, &pos.feature) / tau;
            logits.clear();
            logits.push(pos_logit);
            logits.extend_from_slice(&neg_logits);
            let lse = log_sum_exp(&logits);
            loss += weight * (lse - pos_logit);
            // d/ds of (lse − s_pos): softmax weights, minus one on the positive.
            let c_pos = (pos_logit - lse).exp() - 1.0;
            for (d, q) in grad.iter_mut().zip(&pos.feature) {
                *d += weight * c_pos * q / tau;
            }
            for (c, nl) in neg_coeff.iter_mut().zip(&neg_logits) {
                *c += weight * (nl - lse).exp();
            }
        }
        for (c, e) in neg_coeff.iter().zip(&negatives) {
            for (d, q) in grad.iter_mut().zip(&e.feature) {
                *d += c * q / tau;
            }
        }
        grads.push(grad);
    }
    if active == 0 {
        return Err(KcodError::EmptyObjective(
            "no anchor has a same-class entry in the queue".into(),
        ));
    }
    Ok(KclOutput {
        loss,
        grads,
        active,
    })
}

/// Softmax cross-entropy and its gradient `softmax(logits) − onehot(label)`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(KcodError::Parameter(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax_unchecked(logits, 1.0);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kcl: KclConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 5e-3,
            kcl: KclConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub ce_loss: f64,
    pub kcl_loss: f64,
    pub total_loss: f64,
}

/// Maps arbitrary IND labels onto classifier indices `0..n` in ascending order.
pub fn label_index(data: &Dataset) -> BTreeMap<usize, usize> {
    data.classes()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect()
}

/// Joint CE + KCL training on labeled IND data. Losses in the log are
/// per-sample means over the epoch.
pub fn pretrain(
    model: &mut EncoderModel,
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainEpoch>> {
    cfg.kcl.validate()?;
    if cfg.batch_size == 0 {
        return Err(KcodError::Parameter("batch size must be >= 1".into()));
    }
    let classes = label_index(data);
    if classes.len() < 2 {
        return Err(KcodError::Dataset("pre-training needs >= 2 IND classes".into()));
    }
    if classes.len() != model.dims().ind_classes {
        return Err(KcodError::Parameter(format!(
            "model classifier has {} outputs, IND data has {} classes",
            model.dims().ind_classes,
            classes.len()
        )));
    }
    let targets: Vec<usize> = data.samples.iter().map(|s| classes[&s.label]).collect();
    let class_index = ClassIndex::new(&data.labels());
    let mut queue = ContrastQueue::for_batch_size(cfg.batch_size);
    let mut adam = AdamState::new(model.num_params(), cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let n = data.len();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut ce_sum, mut kcl_sum) = (0.0, 0.0);

        for batch in order.chunks(cfg.batch_size) {
            refresh_queue(&mut queue, model, batch, data, &class_index, &mut rng)?;
            let acts = batch
                .iter()
                .map(|&i| model.encode(&data.samples[i].features))
                .collect::<Result<Vec<_>>>()?;
            let anchors: Vec<KclAnchor<'_>> = batch
                .iter()
                .zip(&acts)
                .map(|(&i, a)| KclAnchor {
                    feature: &a.f,
                    label: data.samples[i].label,
                    source: Some(i),
                })
                .collect();
            let kcl = match kcl_loss(&anchors, &queue, &cfg.kcl) {
                Ok(out) => Some(out),
                Err(KcodError::EmptyObjective(_)) => None,
                Err(e) => return Err(e),
            };
            drop(anchors);

            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.zero_grads();
            for (b, (&i, act)) in batch.iter().zip(&acts).enumerate() {
                let (ce, dce) = ce_loss(&act.logits_ind, targets[i])?;
                ce_sum += ce;
                let mut up = HeadGradients::zeros(model.dims());
                up.logits_ind = dce.iter().map(|g| g * cfg.kcl.ce_weight * scale).collect();
                if let Some(k) = &kcl {
                    up.f = k.grads[b].iter().map(|g| g * scale).collect();
                }
                model.backward_into(act, &up, &mut grads)?;
            }
            if let Some(k) = &kcl {
                kcl_sum += k.loss;
            }
            model.apply_adam(&mut adam, &grads)?;
        }
        let ce = ce_sum / n as f64;
        let kcl = kcl_sum / n as f64;
        log.push(PretrainEpoch {
            epoch,
            ce_loss: ce,
            kcl_loss: kcl,
            total_loss: cfg.kcl.ce_weight * ce + kcl,
        });
    }
    Ok(log)
}

pub fn write_pretrain_csv(log: &[PretrainEpoch], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,ce_loss,kcl_loss,total_loss\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.ce_loss, e.kcl_loss, e.total_loss);
    }
    fs::write(path, out).map_err(|e| KcodError::io(path, e))
}
