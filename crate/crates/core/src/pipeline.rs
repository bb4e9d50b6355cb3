//! File-level stages: generate, pretrain, cluster, evaluate, and the
//! end-to-end run with an optional hyper-parameter sweep.
//!
//! Every stage reads and writes plain JSON, JSONL or CSV in a directory, so
//! runs are inspectable and any stage can be re-entered from its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    cluster_train, encode_features, encode_representations, estimate_k, predict,
    write_cluster_csv, ClusterConfig, ClusterMode, KccConfig,
};
use crate::data_io::{
    gen_blobs, load_id_labels, save_assignments, save_jsonl, split_ind_ood, Assignment, BlobSpec,
    Dataset, SplitSpec,
};
use crate::error::{KcodError, Result};
use crate::metrics::{confusion_matrix, evaluate, EvalReport, Labeling, NmiNormalization};
use crate::model::{EncoderModel, ModelDims};
use crate::pretrain::{pretrain, write_pretrain_csv, KclConfig, PretrainConfig};

pub const IND_FILE: &str = "ind.jsonl";
pub const OOD_FILE: &str = "ood.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt.json";
pub const PRETRAIN_CSV: &str = "pretrain_loss.csv";
pub const CLUSTER_CKPT: &str = "cluster.ckpt.json";
pub const CLUSTER_SUMMARY: &str = "cluster.json";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const SC_CSV: &str = "sc_curve.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_DIR: &str = "sweep";

/// Every knob of a run. One `seed` drives data, initialization and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub signal_dims: Option<usize>,
    pub nuisance_sigma: Option<f64>,
    pub ood_ratio: f64,

    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub instance_dim: usize,

    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub k_kcl: usize,
    pub ce_weight: f64,
    /// Temperature of both KCL and the instance/KCC contrast.
    pub tau: f64,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub mode: ClusterMode,
    pub k_neg: usize,
    pub threshold: f64,
    pub tau_clu: f64,
    pub reg_weight: f64,
    /// Cluster count; taken from the data manifest when absent.
    pub c: Option<usize>,
    /// Replace the cluster count by `estimate_k` with `K' = 2C`.
    pub estimate_c: bool,

    pub nmi: NmiNormalization,
}

impl Default for RunConfig {
    fn default() -> Self {
        let kcl = KclConfig::default();
        let pre = PretrainConfig::default();
        let clu = ClusterConfig::default();
        RunConfig {
            seed: 0,
            classes: 10,
            per_class: 100,
            dim: 16,
            center_scale: 8.0,
            noise_sigma: 1.0,
            signal_dims: Some(5),
            nuisance_sigma: Some(4.0),
            ood_ratio: 0.3,
            hidden_dim: ModelDims::DEFAULT_HIDDEN,
            feature_dim: ModelDims::DEFAULT_FEATURE,
            instance_dim: ModelDims::DEFAULT_INSTANCE,
            pretrain_epochs: pre.epochs,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.learning_rate,
            k_kcl: kcl.k,
            ce_weight: kcl.ce_weight,
            tau: kcl.temperature,
            epochs: clu.epochs,
            batch: clu.batch_size,
            lr: clu.learning_rate,
            dropout: clu.dropout,
            mode: clu.mode,
            k_neg: clu.kcc.k_neg,
            threshold: clu.kcc.threshold,
            tau_clu: clu.kcc.cluster_temperature,
            reg_weight: clu.kcc.reg_weight,
            c: None,
            estimate_c: false,
            nmi: NmiNormalization::Geometric,
        }
    }
}

impl RunConfig {
    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.classes,
            per_class: self.per_class,
            dim: self.dim,
            center_scale: self.center_scale,
            noise_sigma: self.noise_sigma,
            signal_dims: self.signal_dims,
            nuisance_sigma: self.nuisance_sigma,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ood_ratio: self.ood_ratio,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            learning_rate: self.pretrain_lr,
            kcl: KclConfig {
                k: self.k_kcl,
                temperature: self.tau,
                ce_weight: self.ce_weight,
            },
            seed: self.seed,
        }
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            dropout: self.dropout,
            mode: self.mode,
            kcc: KccConfig {
                threshold: self.threshold,
                k_neg: self.k_neg,
                temperature: self.tau,
                cluster_temperature: self.tau_clu,
                reg_weight: self.reg_weight,
            },
            seed: self.seed,
        }
    }

    /// Dimensions of the model built for pre-training. The cluster head is
    /// replaced once the OOD cluster count is known.
    pub fn model_dims(&self, input: usize, ind_classes: usize) -> ModelDims {
        ModelDims {
            input,
            hidden: self.hidden_dim,
            feature: self.feature_dim,
            instance: self.instance_dim,
            clusters: ind_classes.max(2),
            ind_classes,
        }
    }

    /// Checks every field before any work is done.
    pub fn validate(&self) -> Result<()> {
        let param = |m: String| Err(KcodError::Parameter(m));
        if !(self.ood_ratio > 0.0 && self.ood_ratio < 1.0) {
            return param(format!("ood_ratio must be in (0, 1), got {}", self.ood_ratio));
        }
        if self.classes < 4 || self.per_class == 0 || self.dim == 0 {
            return param("need >= 4 classes, >= 1 sample per class and dim >= 1".into());
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 || self.instance_dim == 0 {
            return param("layer widths must be >= 1".into());
        }
        if self.pretrain_batch == 0 {
            return param("pretrain batch must be >= 1".into());
        }
        if !(self.pretrain_lr > 0.0) {
            return param("pretrain learning rate must be > 0".into());
        }
        if !(self.ce_weight >= 0.0) {
            return param("CE weight must be >= 0".into());
        }
        if let Some(c) = self.c {
            if c < 2 {
                return param(format!("cluster count must be >= 2, got {c}"));
            }
        }
        self.pretrain_config().kcl.validate()?;
        self.cluster_config().validate()?;
        let blobs = self.blob_spec();
        if !(2..=self.dim).contains(&blobs.signal_dims()) {
            return param(format!(
                "signal_dims must be in [2, {}], got {}",
                self.dim,
                blobs.signal_dims()
            ));
        }
        Ok(())
    }
}

/// What `generate` produced; written next to the data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub blobs: BlobSpec,
    pub split: SplitSpec,
    pub ind_classes: Vec<usize>,
    pub ood_classes: Vec<usize>,
    pub ind_samples: usize,
    pub ood_samples: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Outcome of the clustering stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub mode: ClusterMode,
    pub clusters: usize,
    /// Set when the count came from `estimate_k`.
    pub estimated_from: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_sc: Option<f64>,
    pub final_sc: Option<f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| KcodError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| KcodError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| KcodError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KcodError::io(dir, e))
}

/// Reads a `RunConfig` JSON file; unknown or mistyped keys are parameter errors.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| KcodError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| KcodError::Parameter(format!("{}: {e}", path.display())))
}

/// Synthesizes the blobs, splits them, and writes `ind.jsonl`, `ood.jsonl`
/// and `manifest.json` into `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(Dataset, Dataset, Manifest)> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data = gen_blobs(&cfg.blob_spec())?;
    let (ind, ood) = split_ind_ood(&data, &cfg.split_spec())?;
    save_jsonl(&ind, &out.join(IND_FILE))?;
    save_jsonl(&ood, &out.join(OOD_FILE))?;
    let manifest = Manifest {
        blobs: cfg.blob_spec(),
        split: cfg.split_spec(),
        ind_classes: ind.classes(),
        ood_classes: ood.classes(),
        ind_samples: ind.len(),
        ood_samples: ood.len(),
    };
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    Ok((ind, ood, manifest))
}

/// CE + KCL pre-training from a fresh model; writes the checkpoint and the
/// per-epoch loss CSV.
pub fn run_pretrain(cfg: &RunConfig, ind: &Dataset, out: &Path) -> Result<EncoderModel> {
    cfg.validate()?;
    let input = ind
        .dim()
        .ok_or_else(|| KcodError::Dataset("IND set is empty".into()))?;
    let dims = cfg.model_dims(input, ind.classes().len());
    let mut model = EncoderModel::new(dims, cfg.dropout, cfg.seed)?;
    let log = pretrain(&mut model, ind, &cfg.pretrain_config())?;
    ensure_dir(out)?;
    model.save(&out.join(PRETRAIN_CKPT))?;
    write_pretrain_csv(&log, &out.join(PRETRAIN_CSV))?;
    Ok(model)
}

/// Cluster count used by the clustering stage: `cfg.c`, else the manifest
/// hint, else the number of distinct labels in the OOD file.
pub fn cluster_count(cfg: &RunConfig, ood: &Dataset, hint: Option<usize>) -> usize {
    cfg.c.or(hint).unwrap_or_else(|| ood.classes().len())
}

/// Trains the clustering stage from a pre-trained model and writes the
/// best-SC checkpoint, the assignments, the SC curve and a summary.
pub fn run_cluster(
    cfg: &RunConfig,
    pretrained: &EncoderModel,
    ood: &Dataset,
    hint: Option<usize>,
    out: &Path,
) -> Result<(EncoderModel, ClusterSummary)> {
    cfg.validate()?;
    if ood.len() < 2 {
        return Err(KcodError::Dataset("clustering needs at least 2 OOD samples".into()));
    }
    let guess = cluster_count(cfg, ood, hint);
    let (clusters, estimated_from) = if cfg.estimate_c {
        let k_prime = (2 * guess).min(ood.len());
        let z = encode_representations(pretrained, ood)?;
        (estimate_k(&z, k_prime, cfg.seed)?.max(2), Some(k_prime))
    } else {
        (guess, None)
    };
    if clusters < 2 || clusters > ood.len() {
        return Err(KcodError::Parameter(format!(
            "cluster count {clusters} must be in [2, {}]",
            ood.len()
        )));
    }
    let model = pretrained.with_cluster_head(clusters, cfg.seed)?;
    let ccfg = cfg.cluster_config();
    let outcome = cluster_train(&model, ood, &ccfg)?;
    let pred = predict(&outcome.best, ood, cfg.mode, cfg.seed)?;

    ensure_dir(out)?;
    outcome.best.save(&out.join(CLUSTER_CKPT))?;
    write_cluster_csv(&outcome.log, cfg.mode, &out.join(SC_CSV))?;
    let assignments: Vec<Assignment> = ood
        .samples
        .iter()
        .zip(&pred)
        .map(|(s, &cluster)| Assignment {
            id: s.id.clone(),
            cluster,
        })
        .collect();
    save_assignments(&assignments, &out.join(ASSIGNMENTS_FILE))?;
    let summary = ClusterSummary {
        mode: cfg.mode,
        clusters,
        estimated_from,
        best_epoch: outcome.best_epoch,
        best_sc: outcome.best_epoch.and_then(|e| outcome.log[e].sc),
        final_sc: outcome.log.last().and_then(|e| e.sc),
    };
    write_json(&summary, &out.join(CLUSTER_SUMMARY))?;
    Ok((outcome.best, summary))
}

/// Scores `pred` against the labels of `truth`. Distances and silhouette use
/// the instance features of `model`, or the raw inputs without one.
pub fn run_evaluate(
    pred: &[(String, usize)],
    truth: &Dataset,
    model: Option<&EncoderModel>,
    norm: NmiNormalization,
    out: &Path,
) -> Result<EvalReport> {
    let reference = Labeling::new(
        truth.samples.iter().map(|s| s.id.clone()).collect(),
        truth.labels(),
    )?;
    let aligned = Labeling::from_pairs(pred.to_vec()).aligned_to(&reference)?;
    let features = match model {
        Some(m) => encode_features(m, truth)?,
        None => truth.samples.iter().map(|s| s.features.clone()).collect(),
    };
    let report = evaluate(&features, &aligned, &reference.labels, norm)?;
    ensure_dir(out)?;
    fs::write(out.join(REPORT_FILE), report.to_json()?)
        .map_err(|e| KcodError::io(out.join(REPORT_FILE), e))?;
    confusion_matrix(&aligned, &reference.labels)?.write_csv(&out.join(CONFUSION_CSV))?;
    Ok(report)
}

/// Loads an assignments or dataset file as `(id, label)` pairs.
pub fn load_predictions(path: &Path) -> Result<Vec<(String, usize)>> {
    load_id_labels(path)
}

/// generate, pretrain, cluster and evaluate into one directory, starting
/// with `run.json`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    write_json(cfg, &out.join(RUN_FILE))?;
    let (ind, ood, manifest) = generate(cfg, out)?;
    let pretrained = run_pretrain(cfg, &ind, out)?;
    let (best, _) = run_cluster(cfg, &pretrained, &ood, Some(manifest.ood_classes.len()), out)?;
    let pred = load_predictions(&out.join(ASSIGNMENTS_FILE))?;
    run_evaluate(&pred, &ood, Some(&best), cfg.nmi, out)
}

/// One point of the sweep: a single hyper-parameter moved off the base run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub param: &'static str,
    pub value: String,
    pub config: RunConfig,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.param, self.value)
    }
}

pub const SWEEP_K_KCL: [usize; 5] = [1, 3, 5, 7, 9];
pub const SWEEP_THRESHOLD: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
/// KCC neighbour counts for batches far below 400; the last one saturates.
pub const SWEEP_K_NEG: [usize; 5] = [8, 16, 32, 64, 400];

/// One-factor grids around `base` over the KCL K, the filter threshold
/// and the KCC K.
pub fn sweep_grid(base: &RunConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for k in SWEEP_K_KCL {
        cells.push(SweepCell {
            param: "k_kcl",
            value: k.to_string(),
            config: RunConfig { k_kcl: k, ..base.clone() },
        });
    }
    for t in SWEEP_THRESHOLD {
        cells.push(SweepCell {
            param: "threshold",
            value: t.to_string(),
            config: RunConfig { threshold: t, ..base.clone() },
        });
    }
    for k in SWEEP_K_NEG {
        cells.push(SweepCell {
            param: "k_neg",
            value: k.to_string(),
            config: RunConfig { k_neg: k, ..base.clone() },
        });
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: String,
    pub k_kcl: usize,
    pub threshold: f64,
    pub k_neg: usize,
    pub report: EvalReport,
}

/// Runs every cell of `sweep_grid(base)` in `out/sweep/<param>-<value>`, at
/// most `threads` at a time, and writes `out/sweep.csv` in grid order.
pub fn run_sweep(base: &RunConfig, out: &Path, threads: Option<usize>) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let cells = sweep_grid(base);
    let root = out.join(SWEEP_DIR);
    ensure_dir(&root)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| KcodError::Parameter(format!("thread pool: {e}")))?;
    let reports: Vec<Result<EvalReport>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_pipeline(&cell.config, &root.join(cell.dir_name())))
            .collect()
    });
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, report) in cells.into_iter().zip(reports) {
        rows.push(SweepRow {
            param: cell.param,
            value: cell.value,
            k_kcl: cell.config.k_kcl,
            threshold: cell.config.threshold,
            k_neg: cell.config.k_neg,
            report: report?,
        });
    }
    write_sweep_csv(&rows, &out.join(SWEEP_CSV))?;
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("param,value,k_kcl,threshold,k_neg,acc,ari,nmi,sc\n");
    for r in rows {
        let sc = r.report.sc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.param, r.value, r.k_kcl, r.threshold, r.k_neg, r.report.acc, r.report.ari, r.report.nmi, sc
        );
    }
    fs::write(path, out).map_err(|e| KcodError::io(path, e))
}

/// `manifest.json` beside a data file, when present.
pub fn manifest_beside(data_file: &Path) -> Option<PathBuf> {
    let p = data_file.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
    p.is_file().then_some(p)
}
