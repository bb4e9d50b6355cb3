//! Clustering-stage training on unlabeled OOD data and inference.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KMeansConfig};
use super::losses::{
    cluster_level_loss, entropy_regularizer, instance_level_loss, kcc_loss, ClusterBatchState,
    KccConfig,
};
use crate::data_io::Dataset;
use crate::error::{KcodError, Result};
use crate::metrics::silhouette;
use crate::model::{AdamState, EncoderModel, HeadGradients};
use crate::numerics::{argmax, derive_seed, Mat64};

/// Which objective terms are active.
///
/// | mode          | cluster-level | instance term | regularizer | inference |
/// |---------------|---------------|---------------|-------------|-----------|
/// | `kcod`        | yes           | KCC           | yes         | argmax g  |
/// | `kcod_wo_kcc` | yes           | InfoNCE       | yes         | argmax g  |
/// | `instance_only` | no          | InfoNCE       | no          | k-means f |
/// | `cluster_only` | yes          | none          | yes         | argmax g  |
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    #[default]
    Kcod,
    KcodWoKcc,
    InstanceOnly,
    ClusterOnly,
}

impl ClusterMode {
    pub const ALL: [ClusterMode; 4] = [
        ClusterMode::Kcod,
        ClusterMode::KcodWoKcc,
        ClusterMode::InstanceOnly,
        ClusterMode::ClusterOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMode::Kcod => "kcod",
            ClusterMode::KcodWoKcc => "kcod_wo_kcc",
            ClusterMode::InstanceOnly => "instance_only",
            ClusterMode::ClusterOnly => "cluster_only",
        }
    }

    fn uses_cluster_head(self) -> bool {
        self != ClusterMode::InstanceOnly
    }
}

impl fmt::Display for ClusterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClusterMode {
    type Err = KcodError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| KcodError::Parameter(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub mode: ClusterMode,
    pub kcc: KccConfig,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            dropout: 0.1,
            mode: ClusterMode::Kcod,
            kcc: KccConfig::default(),
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        self.kcc.validate()?;
        if self.batch_size < 2 {
            return Err(KcodError::Parameter("cluster batch size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(KcodError::Parameter("learning rate must be > 0".into()));
        }
        if !(self.dropout > 0.0 && self.dropout < 1.0) {
            return Err(KcodError::Parameter(format!(
                "dropout must be in (0, 1) to produce two views, got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-batch mean losses of one epoch and the end-of-epoch SC.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterEpoch {
    pub epoch: usize,
    pub clu_loss: f64,
    /// KCC loss in `kcod`, InfoNCE otherwise (0 in `cluster_only`).
    pub contrast_loss: f64,
    pub reg: f64,
    pub sc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    /// Highest-SC epoch, or the input model if no epoch had a defined SC.
    pub best: EncoderModel,
    pub best_epoch: Option<usize>,
    pub final_model: EncoderModel,
    pub log: Vec<ClusterEpoch>,
}

/// Cluster id of one input: argmax of the cluster head, lowest index on ties.
pub fn assign(model: &EncoderModel, x: &[f64]) -> Result<usize> {
    Ok(argmax(&model.encode(x)?.g))
}

/// Instance features of every sample, without dropout.
pub fn encode_features(model: &EncoderModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples
        .iter()
        .map(|s| Ok(model.encode(&s.features)?.f))
        .collect()
}

/// Encoder representations `z` of every sample, without dropout.
pub fn encode_representations(model: &EncoderModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples
        .iter()
        .map(|s| Ok(model.encode(&s.features)?.z))
        .collect()
}

/// Cluster ids for a dataset: argmax of g, or k-means on f for `instance_only`.
pub fn predict(model: &EncoderModel, data: &Dataset, mode: ClusterMode, seed: u64) -> Result<Vec<usize>> {
    if mode.uses_cluster_head() {
        return data.samples.iter().map(|s| assign(model, &s.features)).collect();
    }
    let feats = encode_features(model, data)?;
    let k = model.dims().clusters;
    Ok(kmeans(&feats, &KMeansConfig::new(k, seed))?.assignments)
}

fn epoch_sc(model: &EncoderModel, data: &Dataset, mode: ClusterMode, seed: u64) -> Result<Option<f64>> {
    let pred = predict(model, data, mode, seed)?;
    let feats = encode_features(model, data)?;
    match silhouette(&feats, &pred) {
        Ok(v) => Ok(Some(v)),
        Err(KcodError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct BatchLosses {
    clu: f64,
    contrast: f64,
    reg: f64,
}

fn train_batch(
    model: &mut EncoderModel,
    adam: &mut AdamState,
    data: &Dataset,
    batch: &[usize],
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<BatchLosses> {
    let n = batch.len();
    let mut orig = Vec::with_capacity(n);
    let mut aug = Vec::with_capacity(n);
    for (b, &i) in batch.iter().enumerate() {
        let (va, vb) = model.two_views(&data.samples[i].features, derive_seed(seed, b as u64))?;
        orig.push(va);
        aug.push(vb);
    }
    let features: Vec<Vec<f64>> = orig.iter().chain(&aug).map(|a| a.f.clone()).collect();
    let g_orig = Mat64::from_rows(&orig.iter().map(|a| a.g.clone()).collect::<Vec<_>>())?;
    let g_aug = Mat64::from_rows(&aug.iter().map(|a| a.g.clone()).collect::<Vec<_>>())?;
    let state = ClusterBatchState::new(features, g_orig, g_aug)?;

    let dims = *model.dims();
    let mut up_orig = vec![HeadGradients::zeros(&dims); n];
    let mut up_aug = vec![HeadGradients::zeros(&dims); n];
    let mut losses = BatchLosses {
        clu: 0.0,
        contrast: 0.0,
        reg: 0.0,
    };

    if cfg.mode.uses_cluster_head() {
        let clu = cluster_level_loss(&state, cfg.kcc.cluster_temperature)?;
        losses.clu = clu.loss;
        let (reg_a, grad_a) = entropy_regularizer(state.g_orig());
        let (reg_b, grad_b) = entropy_regularizer(state.g_aug());
        losses.reg = reg_a + reg_b;
        let w = cfg.kcc.reg_weight;
        for r in 0..n {
            for c in 0..dims.clusters {
                up_orig[r].g[c] = clu.grad_orig.get(r, c) + w * grad_a.get(r, c);
                up_aug[r].g[c] = clu.grad_aug.get(r, c) + w * grad_b.get(r, c);
            }
        }
    }
    let view_grads = match cfg.mode {
        ClusterMode::Kcod => {
            let out = kcc_loss(&state, &cfg.kcc)?;
            losses.contrast = out.loss;
            Some(out.grads)
        }
        ClusterMode::KcodWoKcc | ClusterMode::InstanceOnly => {
            let out = instance_level_loss(&state, cfg.kcc.temperature)?;
            losses.contrast = out.loss;
            Some(out.grads)
        }
        ClusterMode::ClusterOnly => None,
    };
    if let Some(grads) = view_grads {
        for (v, g) in grads.into_iter().enumerate() {
            if v < n {
                up_orig[v].f = g;
            } else {
                up_aug[v - n].f = g;
            }
        }
    }
    let total = losses.clu + losses.contrast + cfg.kcc.reg_weight * losses.reg;
    if !total.is_finite() {
        return Err(KcodError::Divergence(format!("cluster loss became {total}")));
    }

    let mut grads = model.zero_grads();
    for (act, up) in orig.iter().zip(&up_orig).chain(aug.iter().zip(&up_aug)) {
        model.backward_into(act, up, &mut grads)?;
    }
    model.apply_adam(adam, &grads)?;
    Ok(losses)
}

/// Trains `model` on `data` (labels unused) and keeps the best-SC checkpoint.
pub fn cluster_train(model: &EncoderModel, data: &Dataset, cfg: &ClusterConfig) -> Result<ClusterOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(KcodError::Dataset("clustering needs at least 2 samples".into()));
    }
    let mut current = model.clone();
    current.set_dropout_rate(cfg.dropout)?;
    let mut adam = AdamState::new(current.num_params(), cfg.learning_rate);
    let mut best = model.clone();
    let mut best_sc: Option<f64> = None;
    let mut best_epoch = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut clu, mut contrast, mut reg, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let batch_seed = derive_seed(epoch_seed, b as u64 + 1);
            let l = train_batch(&mut current, &mut adam, data, batch, cfg, batch_seed)?;
            clu += l.clu;
            contrast += l.contrast;
            reg += l.reg;
            batches += 1;
        }
        let sc = epoch_sc(&current, data, cfg.mode, derive_seed(epoch_seed, 0))?;
        if let Some(v) = sc {
            if best_sc.is_none_or(|b| v > b) {
                best_sc = Some(v);
                best_epoch = Some(epoch);
                best = current.clone();
            }
        }
        let denom = batches.max(1) as f64;
        log.push(ClusterEpoch {
            epoch,
            clu_loss: clu / denom,
            contrast_loss: contrast / denom,
            reg: reg / denom,
            sc,
        });
    }
    Ok(ClusterOutcome {
        best,
        best_epoch,
        final_model: current,
        log,
    })
}

/// `epoch,clu_loss,<kcc_loss|ins_loss>,reg,sc`, one row per epoch; undefined SC is empty.
pub fn write_cluster_csv(log: &[ClusterEpoch], mode: ClusterMode, path: &Path) -> Result<()> {
    let contrast = if mode == ClusterMode::Kcod { "kcc_loss" } else { "ins_loss" };
    let mut out = format!("epoch,clu_loss,{contrast},reg,sc\n");
    for e in log {
        let sc = e.sc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.clu_loss, e.contrast_loss, e.reg, sc
        ));
    }
    fs::write(path, out).map_err(|e| KcodError::io(path, e))
}
