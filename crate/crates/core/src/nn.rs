//! Dense feed-forward classifier with softmax output.
//!
//! Hidden layers apply the configured activation; the last layer is linear and
//! produces logits. [`MlpParams::forward`] returns a [`Trace`] that
//! [`MlpParams::backprop`] consumes to produce gradients with respect to both
//! the parameters and the input in a single reverse pass.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    /// ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

/// Architecture of the classifier: `layer_widths[0]` is the input dimension
/// and the last entry is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Validation(format!(
                "an MLP needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Validation(format!("layer width {i} is zero")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn init(&self) -> Result<MlpParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let layers = self
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..=a))
                    .collect();
                Dense {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights,
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(MlpParams {
            spec: self.clone(),
            layers,
            generation: next_generation(),
        })
    }
}

/// One affine layer. `weights` is row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.biases)
                .map(|(row, &b)| b + dot(row, input)),
        );
    }

    /// `out = Wᵀ delta`
    #[inline]
    fn transpose_apply(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (row, &d) in self.weights.chunks_exact(self.in_dim).zip(delta) {
            if d != 0.0 {
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += d * w;
                }
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trainable parameters of an [`MlpSpec`] network.
#[derive(Debug, Clone)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Dense>,
    generation: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// Network output for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        let predicted_class = argmax(&probs);
        Self {
            logits,
            probs,
            predicted_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    /// `ln probs`, computed from the logits so it stays finite when a
    /// probability underflows to zero.
    pub fn log_probs(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|&z| z - lse).collect()
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    generation: u64,
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre_acts: Vec<Vec<f64>>,
}

/// Parameter gradients, laid out like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    /// Values in checkpoint order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }
}

impl MlpParams {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Rebuilds parameters from the flat checkpoint order (per layer,
    /// weights then biases).
    pub fn from_flat(spec: MlpSpec, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.num_params() {
            return Err(Error::Dimension(format!(
                "spec {:?} needs {} parameters, got {}",
                spec.layer_widths,
                spec.num_params(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(spec.layer_widths.len() - 1);
        for w in spec.layer_widths.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let weights = flat[offset..offset + in_dim * out_dim].to_vec();
            offset += in_dim * out_dim;
            let biases = flat[offset..offset + out_dim].to_vec();
            offset += out_dim;
            layers.push(Dense {
                in_dim,
                out_dim,
                weights,
                biases,
            });
        }
        Ok(Self {
            spec,
            layers,
            generation: next_generation(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    /// Mutable access to every parameter. Traces recorded before this call
    /// become stale.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.generation = next_generation();
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording a trace.
    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        self.check_input(input)?;
        let act = self.spec.activation;
        let mut h = input.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&h, &mut z);
            if l < last {
                h.clear();
                h.extend(z.iter().map(|&v| act.apply(v)));
            }
        }
        Ok(Prediction::from_logits(z))
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Prediction, Trace)> {
        self.forward_slice(input.data())
    }

    pub fn forward_slice(&self, input: &[f64]) -> Result<(Prediction, Trace)> {
        self.check_input(input)?;
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(last);
        acts.push(input.to_vec());
        let mut logits = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(&acts[l], &mut z);
            if l < last {
                acts.push(z.iter().map(|&v| act.apply(v)).collect());
                pre_acts.push(z);
            } else {
                logits = z;
            }
        }
        let trace = Trace {
            generation: self.generation,
            acts,
            pre_acts,
        };
        Ok((Prediction::from_logits(logits), trace))
    }

    fn check_trace(&self, trace: &Trace, upstream: &[f64]) -> Result<()> {
        if trace.generation != self.generation {
            return Err(Error::Usage(
                "trace was recorded against different or since-updated parameters".into(),
            ));
        }
        if upstream.len() != self.num_classes() {
            return Err(Error::Dimension(format!(
                "upstream gradient has {} entries, network has {} outputs",
                upstream.len(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Reverse pass: gradient of a scalar loss with respect to every
    /// parameter and to the input, given `upstream = ∂loss/∂logits`.
    pub fn backprop(&self, trace: &Trace, upstream: &[f64]) -> Result<(Gradients, Tensor)> {
        self.check_trace(trace, upstream)?;
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.reverse(trace, upstream, Some(&mut grads));
        Ok((grads, Tensor::vector(input_grad)?))
    }

    /// Like [`MlpParams::backprop`], but adds the parameter gradient into
    /// `grads` and returns the input gradient as a plain vector.
    pub fn accumulate_backprop(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        self.check_trace(trace, upstream)?;
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.in_dim != l.in_dim || g.out_dim != l.out_dim)
        {
            return Err(Error::Dimension("gradient buffer does not match the network".into()));
        }
        Ok(self.reverse(trace, upstream, Some(grads)))
    }

    /// Reverse pass that only produces `∂loss/∂input`; attack steps do not
    /// need parameter gradients.
    pub fn input_gradient(&self, trace: &Trace, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_trace(trace, upstream)?;
        Ok(self.reverse(trace, upstream, None))
    }

    fn reverse(&self, trace: &Trace, upstream: &[f64], mut grads: Option<&mut Gradients>) -> Vec<f64> {
        let act = self.spec.activation;
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let h_prev = &trace.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[l];
                for ((row, &d), gb) in gl
                    .weights
                    .chunks_exact_mut(layer.in_dim)
                    .zip(&delta)
                    .zip(gl.biases.iter_mut())
                {
                    *gb += d;
                    if d != 0.0 {
                        for (gw, &h) in row.iter_mut().zip(h_prev) {
                            *gw += d * h;
                        }
                    }
                }
            }
            let mut back = layer.transpose_apply(&delta);
            if l > 0 {
                let z = &trace.pre_acts[l - 1];
                for ((b, &zv), &hv) in back.iter_mut().zip(z).zip(h_prev) {
                    *b *= act.derivative(zv, hv);
                }
            }
            delta = back;
        }
        delta
    }
}

/// On-disk form of a trained network.
///
/// Floats are written in their shortest round-trip decimal form, so
/// `load(save(p)) == p` bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

pub const CHECKPOINT_FORMAT: &str = "wpgd-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_params(params: &MlpParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: params.spec.clone(),
            params: params.to_flat(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn into_params(self) -> Result<MlpParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        MlpParams::from_flat(self.spec, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
