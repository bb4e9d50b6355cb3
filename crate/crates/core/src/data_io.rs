//! Synthetic datasets, the class-level IND/OOD split, and JSONL file I/O.
//!
//! One record per line:
//!
//! ```text
//! {"id":"s00042","label":3,"role":"ood","features":[0.125,-1.5,...]}
//! ```
//!
//! Floats are written in shortest round-trip form, so `save` followed by
//! `load` reproduces every feature bit-for-bit.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KcodError, Result};
use crate::numerics::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ind,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledSample {
    pub id: String,
    pub label: usize,
    pub role: Role,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.label)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Parameters of the Gaussian-blob generator.
///
/// With `signal_dims = Some(m)` the class centers live in the first `m`
/// coordinates only and the remaining coordinates are pure noise with
/// standard deviation `nuisance_sigma` (default `noise_sigma`). Every class
/// shares that structure, so it is learnable from some classes and
/// transferable to the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub signal_dims: Option<usize>,
    #[serde(default)]
    pub nuisance_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 10,
            per_class: 100,
            dim: 16,
            center_scale: 4.0,
            noise_sigma: 1.0,
            signal_dims: None,
            nuisance_sigma: None,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn signal_dims(&self) -> usize {
        self.signal_dims.unwrap_or(self.dim)
    }

    /// Noise standard deviation of each coordinate.
    pub fn noise_scales(&self) -> Vec<f64> {
        let nuisance = self.nuisance_sigma.unwrap_or(self.noise_sigma);
        (0..self.dim)
            .map(|d| if d < self.signal_dims() { self.noise_sigma } else { nuisance })
            .collect()
    }
}

/// Class centers uniform on a sphere of radius `center_scale` (within the
/// signal coordinates), plus Gaussian noise.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(KcodError::Parameter("gen_blobs needs >= 2 classes".into()));
    }
    if spec.dim < 2 {
        return Err(KcodError::Parameter("gen_blobs needs dim >= 2".into()));
    }
    let sigmas = [Some(spec.noise_sigma), spec.nuisance_sigma];
    if sigmas.iter().flatten().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(KcodError::Parameter("noise levels must be finite and >= 0".into()));
    }
    if !(spec.center_scale > 0.0) || !spec.center_scale.is_finite() {
        return Err(KcodError::Parameter("center_scale must be > 0".into()));
    }
    let m = spec.signal_dims();
    if m < 2 || m > spec.dim {
        return Err(KcodError::Parameter(format!(
            "signal_dims must be in [2, {}], got {m}",
            spec.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = Vec::with_capacity(spec.classes);
    while centers.len() < spec.classes {
        let raw: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&raw);
        if n > 1e-9 {
            let mut c: Vec<f64> = raw.iter().map(|v| v / n * spec.center_scale).collect();
            c.resize(spec.dim, 0.0);
            centers.push(c);
        }
    }
    let scales = spec.noise_scales();
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let features = center
                .iter()
                .zip(&scales)
                .map(|(c, s)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    c + s * eps
                })
                .collect();
            samples.push(LabeledSample {
                id: format!("s{:05}", samples.len()),
                label,
                role: Role::Ind,
                features,
            });
        }
    }
    Ok(Dataset { samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ood_ratio: f64,
    pub seed: u64,
}

/// Number of OOD classes for a split of `total` classes.
pub fn ood_class_count(total: usize, ood_ratio: f64) -> usize {
    (total as f64 * ood_ratio).round() as usize
}

/// Class-level split: `round(classes * ood_ratio)` classes become OOD, the rest IND.
pub fn split_ind_ood(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.ood_ratio > 0.0 && spec.ood_ratio < 1.0) {
        return Err(KcodError::Parameter(format!(
            "ood_ratio must be in (0, 1), got {}",
            spec.ood_ratio
        )));
    }
    let mut classes = dataset.classes();
    let n_ood = ood_class_count(classes.len(), spec.ood_ratio);
    if n_ood < 2 || classes.len() - n_ood.min(classes.len()) < 2 {
        return Err(KcodError::Parameter(format!(
            "split of {} classes at ratio {} leaves fewer than 2 classes on one side",
            classes.len(),
            spec.ood_ratio
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    classes.shuffle(&mut rng);
    let ood: BTreeSet<usize> = classes[..n_ood].iter().copied().collect();
    let (mut ind_set, mut ood_set) = (Vec::new(), Vec::new());
    for s in &dataset.samples {
        let mut s = s.clone();
        if ood.contains(&s.label) {
            s.role = Role::Ood;
            ood_set.push(s);
        } else {
            s.role = Role::Ind;
            ind_set.push(s);
        }
    }
    Ok((Dataset::new(ind_set), Dataset::new(ood_set)))
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| KcodError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| KcodError::io(path, e))?;
    }
    out.flush().map_err(|e| KcodError::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| KcodError::io(path, e))?;
    let mut samples: Vec<LabeledSample> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| KcodError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: LabeledSample =
            serde_json::from_str(&line).map_err(|e| KcodError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: e.to_string(),
            })?;
        let schema = |message: String| KcodError::Schema {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        if sample.features.is_empty() {
            return Err(schema("empty feature vector".into()));
        }
        if let Some(first) = samples.first() {
            if first.features.len() != sample.features.len() {
                return Err(schema(format!(
                    "feature dim {} differs from dim {} of the first record",
                    sample.features.len(),
                    first.features.len()
                )));
            }
        }
        samples.push(sample);
    }
    Ok(Dataset { samples })
}

/// One line of an assignments file: `{"id": ..., "cluster": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    pub cluster: usize,
}

pub fn save_assignments(assignments: &[Assignment], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| KcodError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for a in assignments {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n").map_err(|e| KcodError::io(path, e))?;
    }
    out.flush().map_err(|e| KcodError::io(path, e))
}

#[derive(Deserialize)]
struct IdLabelRecord {
    id: String,
    cluster: Option<usize>,
    label: Option<usize>,
}

/// Reads `(id, label)` pairs from either an assignments file (`cluster` key)
/// or a dataset file (`label` key).
pub fn load_id_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| KcodError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| KcodError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: IdLabelRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let label = rec
            .cluster
            .or(rec.label)
            .ok_or_else(|| parse_err("record has neither \"cluster\" nor \"label\"".into()))?;
        out.push((rec.id, label));
    }
    Ok(out)
}
