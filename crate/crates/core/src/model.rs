//! The trainable encoder.
//!
//! ```text
//! x ──W1,ReLU,dropout──▶ h ──W2──▶ z ─┬─Wf──▶ u ──/‖u‖──▶ f   instance head
//!                                    ├─Wg──▶ softmax ──▶ g   cluster head
//!                                    └─Wc──▶ logits_ind      IND classifier (CE)
//! ```
//!
//! Parameters live in one flat buffer so that the optimizer, checkpointing,
//! and the finite-difference checks can treat the model as a single vector.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KcodError, Result};
use crate::numerics::{derive_seed, dot, norm, softmax_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub instance: usize,
    pub clusters: usize,
    pub ind_classes: usize,
}

impl ModelDims {
    pub const DEFAULT_HIDDEN: usize = 64;
    pub const DEFAULT_FEATURE: usize = 32;
    pub const DEFAULT_INSTANCE: usize = 16;

    pub fn new(input: usize, clusters: usize, ind_classes: usize) -> Self {
        ModelDims {
            input,
            hidden: Self::DEFAULT_HIDDEN,
            feature: Self::DEFAULT_FEATURE,
            instance: Self::DEFAULT_INSTANCE,
            clusters,
            ind_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.input,
            self.hidden,
            self.feature,
            self.instance,
            self.clusters,
            self.ind_classes,
        ];
        if all.contains(&0) {
            return Err(KcodError::Parameter(format!(
                "all model dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Layer {
    Hidden,
    Feature,
    Instance,
    Cluster,
    Classifier,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Hidden,
        Layer::Feature,
        Layer::Instance,
        Layer::Cluster,
        Layer::Classifier,
    ];

    fn name(self) -> &'static str {
        match self {
            Layer::Hidden => "hidden",
            Layer::Feature => "feature",
            Layer::Instance => "instance_head",
            Layer::Cluster => "cluster_head",
            Layer::Classifier => "classifier",
        }
    }

    /// (out, in)
    fn shape(self, d: &ModelDims) -> (usize, usize) {
        match self {
            Layer::Hidden => (d.hidden, d.input),
            Layer::Feature => (d.feature, d.hidden),
            Layer::Instance => (d.instance, d.feature),
            Layer::Cluster => (d.clusters, d.feature),
            Layer::Classifier => (d.ind_classes, d.feature),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    weight: usize,
    bias: usize,
    out: usize,
    inp: usize,
}

#[derive(Debug, Clone)]
struct ParamLayout {
    slots: [Slot; 5],
    len: usize,
}

impl ParamLayout {
    fn new(dims: &ModelDims) -> Self {
        let mut offset = 0;
        let slots = Layer::ALL.map(|layer| {
            let (out, inp) = layer.shape(dims);
            let slot = Slot {
                weight: offset,
                bias: offset + out * inp,
                out,
                inp,
            };
            offset += out * inp + out;
            slot
        });
        ParamLayout { slots, len: offset }
    }

    fn slot(&self, layer: Layer) -> Slot {
        self.slots[layer as usize]
    }
}

/// `out = W·input + b` for one layer stored in a flat buffer.
fn affine(params: &[f64], s: Slot, input: &[f64]) -> Vec<f64> {
    let w = &params[s.weight..s.weight + s.out * s.inp];
    let b = &params[s.bias..s.bias + s.out];
    (0..s.out)
        .map(|o| b[o] + dot(&w[o * s.inp..(o + 1) * s.inp], input))
        .collect()
}

/// Accumulates `dW += upstream ⊗ input`, `db += upstream` and returns `Wᵀ·upstream`.
fn affine_backward(
    params: &[f64],
    grads: &mut [f64],
    s: Slot,
    input: &[f64],
    upstream: &[f64],
) -> Vec<f64> {
    let mut down = vec![0.0; s.inp];
    for o in 0..s.out {
        let u = upstream[o];
        if u == 0.0 {
            continue;
        }
        grads[s.bias + o] += u;
        let row = s.weight + o * s.inp;
        for i in 0..s.inp {
            grads[row + i] += u * input[i];
            down[i] += u * params[row + i];
        }
    }
    down
}

/// Inverted-dropout mask on the hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    rate: f64,
    seed: u64,
}

impl DropoutMask {
    pub fn sample(units: usize, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KcodError::Parameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = (0..units).map(|_| rng.random::<f64>() >= rate).collect();
        Ok(DropoutMask { keep, rate, seed })
    }

    pub fn units(&self) -> usize {
        self.keep.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len().max(1) as f64
    }

    fn scale(&self, unit: usize) -> f64 {
        if self.keep[unit] {
            1.0 / (1.0 - self.rate)
        } else {
            0.0
        }
    }
}

/// Outputs of one forward pass together with the activations backward needs.
#[derive(Debug, Clone)]
pub struct Activations {
    pub z: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub cluster_logits: Vec<f64>,
    pub logits_ind: Vec<f64>,
    version: u64,
    x: Vec<f64>,
    hidden_scale: Vec<f64>,
    hidden: Vec<f64>,
    instance_norm: f64,
}

/// Upstream gradients arriving at the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub logits_ind: Vec<f64>,
}

impl HeadGradients {
    pub fn zeros(dims: &ModelDims) -> Self {
        HeadGradients {
            f: vec![0.0; dims.instance],
            g: vec![0.0; dims.clusters],
            logits_ind: vec![0.0; dims.ind_classes],
        }
    }
}

/// Gradient buffer with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(Vec<f64>);

impl ParamGrads {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&g| g == 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    dims: ModelDims,
    dropout_rate: f64,
    layout: ParamLayout,
    params: Vec<f64>,
    init_seed: u64,
    steps: u64,
    version: u64,
}

impl EncoderModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(dims: ModelDims, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims, dropout_rate)?;
        model.init_seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in Layer::ALL {
            let s = model.layout.slot(layer);
            let bound = (6.0 / (s.inp + s.out) as f64).sqrt();
            for w in &mut model.params[s.weight..s.weight + s.out * s.inp] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(dims: ModelDims, dropout_rate: f64) -> Result<Self> {
        dims.validate()?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(KcodError::Parameter(format!(
                "dropout rate must be in [0, 1), got {dropout_rate}"
            )));
        }
        let layout = ParamLayout::new(&dims);
        Ok(EncoderModel {
            dims,
            dropout_rate,
            params: vec![0.0; layout.len],
            layout,
            init_seed: 0,
            steps: 0,
            version: 0,
        })
    }

    /// Scale applied to the Glorot init of a replacement cluster head, so that
    /// its first assignments are soft.
    pub const FRESH_HEAD_GAIN: f64 = 0.1;

    /// Copy of this model with a freshly initialized `clusters`-way cluster head;
    /// every other layer is kept.
    pub fn with_cluster_head(&self, clusters: usize, seed: u64) -> Result<Self> {
        let dims = ModelDims { clusters, ..self.dims };
        let mut fresh = Self::new(dims, self.dropout_rate, seed)?;
        for layer in Layer::ALL {
            if layer == Layer::Cluster {
                continue;
            }
            let (src, dst) = (self.layout.slot(layer), fresh.layout.slot(layer));
            let len = src.out * src.inp + src.out;
            debug_assert_eq!(src.bias + src.out - src.weight, len);
            fresh.params[dst.weight..dst.weight + len]
                .copy_from_slice(&self.params[src.weight..src.weight + len]);
        }
        fresh
            .layer_weight_mut(Layer::Cluster)
            .iter_mut()
            .for_each(|w| *w *= Self::FRESH_HEAD_GAIN);
        fresh.init_seed = self.init_seed;
        fresh.steps = self.steps;
        Ok(fresh)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KcodError::Parameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Overwrites every parameter. Invalidates outstanding activation caches.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(KcodError::Parameter(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.copy_from_slice(values);
        self.version += 1;
        Ok(())
    }

    pub fn layer_weight_mut(&mut self, layer: Layer) -> &mut [f64] {
        let s = self.layout.slot(layer);
        self.version += 1;
        &mut self.params[s.weight..s.weight + s.out * s.inp]
    }

    pub fn layer_bias_mut(&mut self, layer: Layer) -> &mut [f64] {
        let s = self.layout.slot(layer);
        self.version += 1;
        &mut self.params[s.bias..s.bias + s.out]
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(vec![0.0; self.params.len()])
    }

    pub fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<Activations> {
        self.forward_with(&self.params, x, mask)
    }

    /// Forward pass with an explicit parameter vector (same layout as this model).
    pub fn forward_with(
        &self,
        params: &[f64],
        x: &[f64],
        mask: Option<&DropoutMask>,
    ) -> Result<Activations> {
        let d = &self.dims;
        if x.len() != d.input {
            return Err(KcodError::Parameter(format!(
                "input dim {} does not match model input dim {}",
                x.len(),
                d.input
            )));
        }
        if let Some(m) = mask {
            if m.units() != d.hidden {
                return Err(KcodError::Parameter(format!(
                    "dropout mask covers {} units, hidden layer has {}",
                    m.units(),
                    d.hidden
                )));
            }
        }
        let l = &self.layout;
        let hidden_pre = affine(params, l.slot(Layer::Hidden), x);
        let hidden_scale: Vec<f64> = (0..d.hidden)
            .map(|u| {
                let relu = if hidden_pre[u] > 0.0 { 1.0 } else { 0.0 };
                relu * mask.map_or(1.0, |m| m.scale(u))
            })
            .collect();
        let hidden: Vec<f64> = hidden_pre
            .iter()
            .zip(&hidden_scale)
            .map(|(h, s)| h * s)
            .collect();
        let z = affine(params, l.slot(Layer::Feature), &hidden);
        let u = affine(params, l.slot(Layer::Instance), &z);
        let instance_norm = norm(&u);
        if !(instance_norm > 0.0) || !instance_norm.is_finite() {
            return Err(KcodError::Degenerate(
                "instance head produced a zero or non-finite vector".into(),
            ));
        }
        let f: Vec<f64> = u.iter().map(|v| v / instance_norm).collect();
        let cluster_logits = affine(params, l.slot(Layer::Cluster), &z);
        let g = softmax_unchecked(&cluster_logits, 1.0);
        let logits_ind = affine(params, l.slot(Layer::Classifier), &z);
        if g.iter().chain(&logits_ind).any(|v| !v.is_finite()) {
            return Err(KcodError::Divergence("non-finite head output".into()));
        }
        Ok(Activations {
            z,
            f,
            g,
            cluster_logits,
            logits_ind,
            version: self.version,
            x: x.to_vec(),
            hidden_scale,
            hidden,
            instance_norm,
        })
    }

    /// Deterministic inference pass (no dropout).
    pub fn encode(&self, x: &[f64]) -> Result<Activations> {
        self.forward(x, None)
    }

    /// Two forward passes under independent dropout masks derived from `seed`.
    pub fn two_views(&self, x: &[f64], seed: u64) -> Result<(Activations, Activations)> {
        if self.dropout_rate <= 0.0 {
            return Err(KcodError::Parameter(
                "two_views needs dropout_rate > 0; the views would be identical".into(),
            ));
        }
        let hidden = self.dims.hidden;
        let ma = DropoutMask::sample(hidden, self.dropout_rate, derive_seed(seed, 0))?;
        let mb = DropoutMask::sample(hidden, self.dropout_rate, derive_seed(seed, 1))?;
        Ok((self.forward(x, Some(&ma))?, self.forward(x, Some(&mb))?))
    }

    pub fn backward(&self, act: &Activations, upstream: &HeadGradients) -> Result<ParamGrads> {
        let mut grads = self.zero_grads();
        self.backward_into(act, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Backpropagates head gradients and adds the result into `grads`.
    pub fn backward_into(
        &self,
        act: &Activations,
        upstream: &HeadGradients,
        grads: &mut ParamGrads,
    ) -> Result<()> {
        if act.version != self.version {
            return Err(KcodError::StaleCache {
                cached: act.version,
                current: self.version,
            });
        }
        let d = &self.dims;
        if upstream.f.len() != d.instance
            || upstream.g.len() != d.clusters
            || upstream.logits_ind.len() != d.ind_classes
        {
            return Err(KcodError::Parameter("upstream gradient shape mismatch".into()));
        }
        let l = &self.layout;
        let p = &self.params;
        let gbuf = &mut grads.0;
        let mut dz = vec![0.0; d.feature];

        let mut add = |v: Vec<f64>| dz.iter_mut().zip(v).for_each(|(a, b)| *a += b);

        add(affine_backward(
            p,
            gbuf,
            l.slot(Layer::Classifier),
            &act.z,
            &upstream.logits_ind,
        ));

        let g_dot = dot(&act.g, &upstream.g);
        let d_logits: Vec<f64> = act
            .g
            .iter()
            .zip(&upstream.g)
            .map(|(gi, ui)| gi * (ui - g_dot))
            .collect();
        add(affine_backward(p, gbuf, l.slot(Layer::Cluster), &act.z, &d_logits));

        let du = normalize_backward(&act.f, act.instance_norm, &upstream.f);
        add(affine_backward(p, gbuf, l.slot(Layer::Instance), &act.z, &du));

        let dh = affine_backward(p, gbuf, l.slot(Layer::Feature), &act.hidden, &dz);
        let dh_pre: Vec<f64> = dh
            .iter()
            .zip(&act.hidden_scale)
            .map(|(g, s)| g * s)
            .collect();
        affine_backward(p, gbuf, l.slot(Layer::Hidden), &act.x, &dh_pre);
        Ok(())
    }

    pub fn apply_adam(&mut self, state: &mut AdamState, grads: &ParamGrads) -> Result<()> {
        state.step(&mut self.params, &grads.0)?;
        self.steps += 1;
        self.version += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut weights = BTreeMap::new();
        for layer in Layer::ALL {
            let s = self.layout.slot(layer);
            weights.insert(
                format!("{}.weight", layer.name()),
                self.params[s.weight..s.weight + s.out * s.inp].to_vec(),
            );
            weights.insert(
                format!("{}.bias", layer.name()),
                self.params[s.bias..s.bias + s.out].to_vec(),
            );
        }
        Checkpoint {
            dims: self.dims,
            dropout_rate: self.dropout_rate,
            seed: self.init_seed,
            steps: self.steps,
            weights,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::zeros(ckpt.dims, ckpt.dropout_rate)?;
        model.init_seed = ckpt.seed;
        model.steps = ckpt.steps;
        for layer in Layer::ALL {
            let s = model.layout.slot(layer);
            for (suffix, start, len) in [("weight", s.weight, s.out * s.inp), ("bias", s.bias, s.out)] {
                let key = format!("{}.{suffix}", layer.name());
                let values = ckpt
                    .weights
                    .get(&key)
                    .ok_or_else(|| KcodError::Dataset(format!("checkpoint is missing {key}")))?;
                if values.len() != len {
                    return Err(KcodError::Dataset(format!(
                        "checkpoint {key} has {} values, expected {len}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(KcodError::Dataset(format!("checkpoint {key} is not finite")));
                }
                model.params[start..start + len].copy_from_slice(values);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        fs::write(path, json + "\n").map_err(|e| KcodError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KcodError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Backward through `f = u / ‖u‖`: `(I − f fᵀ) · df / ‖u‖`.
pub fn normalize_backward(f: &[f64], input_norm: f64, df: &[f64]) -> Vec<f64> {
    let proj = dot(f, df);
    f.iter()
        .zip(df)
        .map(|(fi, gi)| (gi - fi * proj) / input_norm)
        .collect()
}

/// Serialized model: dims, hyper-parameters, named flat weight arrays, seed, step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub dropout_rate: f64,
    pub seed: u64,
    pub steps: u64,
    pub weights: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(KcodError::Parameter(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(KcodError::Divergence(format!(
                "non-finite gradient at parameter {i}"
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(KcodError::Divergence("non-finite parameter after update".into()));
        }
        Ok(())
    }
}
