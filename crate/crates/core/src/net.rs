//! Minimal feed-forward network engine.
//!
//! One model per view: dense hidden layers with ReLU or tanh, a linear
//! output layer producing logits, and the normalize-then-clamp membership
//! head on top. Initialization is seeded and fully deterministic; the
//! checkpoint format is self-describing JSON (spec, seed, and parameter
//! arrays in declared layer order).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fuzzy::{lp_norm, Membership};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given pre-activation and post-activation values.
    /// ReLU uses the convention `relu'(0) = 0`.
    fn derivative(&self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

/// Topology and head configuration of one view network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    pub activation: Activation,
    /// Norm order of the membership head, >= 1.
    pub norm_order: f64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("hidden dims must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        if !self.norm_order.is_finite() || self.norm_order < 1.0 {
            return Err(Error::invalid("norm_order must be finite and >= 1"));
        }
        Ok(())
    }

    /// (in, out) dimensions of every layer, hidden layers first, then the
    /// linear logits layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.class_count));
        dims
    }
}

/// One dense layer; weights are row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn apply(&self, input: &[f64], output: &mut Vec<f64>) {
        output.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            output.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

/// Initial bias of the logits layer. The membership head zeroes negative
/// normalized logits and a sample whose logits are all negative receives
/// no gradient at all, so every logit starts at a positive offset with the
/// logits-layer weights scaled down far enough that no sample can start
/// dead. Hidden layers use plain Xavier ranges with zero bias.
pub const LOGIT_BIAS_INIT: f64 = 0.5;
const LOGIT_WEIGHT_SCALE: f64 = 0.1;

impl MlpModel {
    /// Deterministic initialization: hidden layers uniform in
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]` with zero
    /// bias, drawn from a ChaCha stream seeded with `seed`; the logits
    /// layer starts at [`LOGIT_BIAS_INIT`] bias with its weight range
    /// shrunk by [`LOGIT_WEIGHT_SCALE`] so all memberships begin positive.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(idx, (in_dim, out_dim))| {
                let mut bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let bias = if idx == last {
                    bound *= LOGIT_WEIGHT_SCALE;
                    LOGIT_BIAS_INIT
                } else {
                    0.0
                };
                let weights = (0..in_dim * out_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    in_dim,
                    out_dim,
                    weights,
                    biases: vec![bias; out_dim],
                }
            })
            .collect();
        Ok(MlpModel {
            spec,
            layers,
            rng_seed: seed,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Forward pass to logits and membership.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Membership)> {
        let cache = self.forward_cached(x)?;
        let membership = Membership::new(cache.membership.clone())?;
        Ok((cache.logits, membership))
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let n_layers = self.layers.len();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut current = x.to_vec();
        let mut scratch = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut scratch);
            if scratch.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("layer {idx}")));
            }
            inputs.push(std::mem::replace(&mut current, Vec::new()));
            if idx + 1 < n_layers {
                pre_acts.push(scratch.clone());
                current = scratch
                    .iter()
                    .map(|&v| self.spec.activation.apply(v))
                    .collect();
            } else {
                current = scratch.clone();
            }
        }
        let logits = current;
        let norm = lp_norm(&logits, self.spec.norm_order);
        let k = self.spec.class_count;
        let (normalized, membership) = if norm == 0.0 {
            (Vec::new(), vec![1.0 / k as f64; k])
        } else {
            let z: Vec<f64> = logits.iter().map(|&a| a / norm).collect();
            let m = z.iter().map(|&v| v.max(0.0)).collect();
            (z, m)
        };
        Ok(ForwardCache {
            inputs,
            pre_acts,
            logits,
            norm,
            normalized,
            membership,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string_pretty(&blob)
            .map_err(|e| Error::config(format!("checkpoint encode: {e}")))?;
        crate::manifest::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let blob: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("checkpoint decode {}: {e}", path.display())))?;
        blob.model.spec.validate()?;
        Ok(blob.model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: MlpModel,
}

/// Cached intermediates of one forward pass, consumed by the backward pass.
pub(crate) struct ForwardCache {
    /// Input vector of each layer (index 0 is the raw feature row).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation values of each hidden layer.
    pub pre_acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub norm: f64,
    /// Logits divided by the norm; empty when the norm is zero.
    pub normalized: Vec<f64>,
    pub membership: Vec<f64>,
}

/// Parameter gradients, shape-congruent with an [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite())
        })
    }

    fn matches(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len()
            })
    }
}

/// Backpropagate `dlogits` through the dense layers, accumulating parameter
/// gradients into `grads`.
pub(crate) fn backprop_layers(
    model: &MlpModel,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let mut delta = dlogits.to_vec();
    for idx in (0..model.layers.len()).rev() {
        let layer = &model.layers[idx];
        let input = &cache.inputs[idx];
        let grad = &mut grads.layers[idx];
        for o in 0..layer.out_dim {
            let d = delta[o];
            grad.biases[o] += d;
            let row = &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (g, &x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if idx == 0 {
            break;
        }
        // d(input) = W^T delta, gated by the previous layer's activation.
        let mut d_input = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let d = delta[o];
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (acc, &w) in d_input.iter_mut().zip(row) {
                *acc += d * w;
            }
        }
        let pre = &cache.pre_acts[idx - 1];
        let post = &cache.inputs[idx];
        for ((d, &p), &q) in d_input.iter_mut().zip(pre).zip(post) {
            *d *= model.spec.activation.derivative(p, q);
        }
        delta = d_input;
    }
}

/// Pull `dmembership` back through the normalize-then-clamp head to logits.
pub(crate) fn membership_backward(cache: &ForwardCache, norm_order: f64, dm: &[f64]) -> Vec<f64> {
    let k = cache.logits.len();
    // Zero-norm fallback region is flat: the output is the constant 1/K.
    if cache.norm == 0.0 {
        return vec![0.0; k];
    }
    let n = cache.norm;
    // Gate by the clamp: gradient flows only where the normalized logit is
    // strictly positive (clamp'(0) = 0).
    let gated: Vec<f64> = (0..k)
        .map(|i| if cache.normalized[i] > 0.0 { dm[i] } else { 0.0 })
        .collect();
    let dot_gz: f64 = gated
        .iter()
        .zip(&cache.normalized)
        .map(|(g, z)| g * z)
        .sum();
    let p = norm_order;
    (0..k)
        .map(|j| {
            let a = cache.logits[j];
            // d norm / d a_j = sign(a_j) |a_j|^(p-1) / norm^(p-1)
            let dn = if a == 0.0 {
                0.0
            } else if p == 2.0 {
                a / n
            } else {
                a.signum() * a.abs().powf(p - 1.0) / n.powf(p - 1.0)
            };
            gated[j] / n - dot_gz * dn / n
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// First-order optimizer state for one model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    first_moment: Vec<LayerGrad>,
    second_moment: Vec<LayerGrad>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, model: &MlpModel) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let zeros = Gradients::zeros_like(model).layers;
        Ok(OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one optimizer update in place.
pub fn optimizer_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.matches(model) {
        return Err(Error::shape("gradients do not match model shape"));
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (layer, grad) in model.layers.iter_mut().zip(&grads.layers) {
                for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
                    *w -= state.learning_rate * g;
                }
                for (b, g) in layer.biases.iter_mut().zip(&grad.biases) {
                    *b -= state.learning_rate * g;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            for (idx, (layer, grad)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
                let m = &mut state.first_moment[idx];
                let v = &mut state.second_moment[idx];
                adam_update(
                    &mut layer.weights,
                    &grad.weights,
                    &mut m.weights,
                    &mut v.weights,
                    state.learning_rate,
                    bc1,
                    bc2,
                );
                adam_update(
                    &mut layer.biases,
                    &grad.biases,
                    &mut m.biases,
                    &mut v.biases,
                    state.learning_rate,
                    bc1,
                    bc2,
                );
            }
        }
    }
    Ok(())
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}
