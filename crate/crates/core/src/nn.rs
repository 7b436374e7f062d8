//! Dense network engine: initialization, forward pass, softmax, exact
//! reverse-mode gradients and SGD with momentum.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` occupies a weight
//! block of shape `(widths[l+1], widths[l])` stored row-major, followed by its
//! bias of length `widths[l+1]`. A layer computes `z = a · Wᵀ + b`.

use std::ops::{Deref, DerefMut, Range};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least an input and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    /// Human-readable name of the block owning parameter `index`.
    pub fn describe_index(&self, index: usize) -> String {
        for (l, layer) in self.layers().iter().enumerate() {
            if layer.weights.contains(&index) {
                return format!("layer {l} weights");
            }
            if layer.bias.contains(&index) {
                return format!("layer {l} bias");
            }
        }
        format!("index {index} (out of range)")
    }
}

/// Flat vector of every trainable parameter of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, expected: usize, context: &'static str) -> Result<()> {
        if self.0.len() != expected {
            return Err(Error::shape(context, expected, self.0.len()));
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.check_len(other.len(), "add_scaled")?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other.len(), "distance")?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = stream_rng(seed, Stream::Init, &[]);
    let mut params = ParamVector::zeros(spec.param_count());
    for layer in spec.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        for w in &mut params[layer.weights] {
            *w = dist.sample(&mut rng);
        }
    }
    params
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pub pre_activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

fn weight_view<'a>(params: &'a ParamVector, layer: &LayerLayout) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params[layer.weights.clone()])
        .expect("layout matches spec")
}

fn check_batch(params: &ParamVector, spec: &MlpSpec, batch_x: &ArrayView2<f64>) -> Result<()> {
    params.check_len(spec.param_count(), "forward: parameter vector")?;
    if batch_x.ncols() != spec.input_width() {
        return Err(Error::shape(
            "forward: batch columns",
            spec.input_width(),
            batch_x.ncols(),
        ));
    }
    Ok(())
}

pub fn forward(
    params: &ParamVector,
    spec: &MlpSpec,
    batch_x: ArrayView2<f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_batch(params, spec, &batch_x)?;
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre_activations = Vec::with_capacity(last);
    let mut current = batch_x.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        let w = weight_view(params, layer);
        let b = ArrayView2::from_shape((1, layer.fan_out), &params[layer.bias.clone()])
            .expect("layout matches spec");
        let z = current.dot(&w.t()) + b;
        inputs.push(current);
        if l == last {
            current = z;
        } else {
            current = z.mapv(|v| spec.activation.apply(v));
            pre_activations.push(z);
        }
    }
    let cache = ForwardCache {
        inputs,
        pre_activations,
        logits: current.clone(),
    };
    Ok((current, cache))
}

/// Logits only, without keeping intermediate activations.
pub fn predict(params: &ParamVector, spec: &MlpSpec, batch_x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_batch(params, spec, &batch_x)?;
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut current = batch_x.to_owned();
    for (l, layer) in layers.iter().enumerate() {
        let w = weight_view(params, layer);
        let b = ArrayView2::from_shape((1, layer.fan_out), &params[layer.bias.clone()])
            .expect("layout matches spec");
        let z = current.dot(&w.t()) + b;
        current = if l == last {
            z
        } else {
            z.mapv(|v| spec.activation.apply(v))
        };
    }
    Ok(current)
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty row".into()));
    }
    Ok(softmax_unchecked(logits, 1.0))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax at the given temperature.
pub fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let probs = softmax_unchecked(row.as_slice().expect("standard layout"), temperature);
        dst.assign(&Array1::from(probs));
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// gradient of that loss with respect to the logits of the cached batch.
pub fn backprop(
    cache: &ForwardCache,
    params: &ParamVector,
    spec: &MlpSpec,
    dloss_dlogits: &Array2<f64>,
) -> Result<ParamVector> {
    params.check_len(spec.param_count(), "backprop: parameter vector")?;
    if dloss_dlogits.dim() != cache.logits.dim() {
        return Err(Error::shape(
            "backprop: logit gradient",
            format!("{:?}", cache.logits.dim()),
            format!("{:?}", dloss_dlogits.dim()),
        ));
    }
    let layers = spec.layers();
    let mut grad = ParamVector::zeros(params.len());
    let mut delta = dloss_dlogits.clone();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let gw = delta.t().dot(&cache.inputs[l]);
        grad[layer.weights.clone()].copy_from_slice(
            gw.as_standard_layout()
                .as_slice()
                .expect("standard layout"),
        );
        let gb = delta.sum_axis(Axis(0));
        grad[layer.bias.clone()].copy_from_slice(gb.as_slice().expect("contiguous"));
        if l > 0 {
            let w = weight_view(params, layer);
            let mut upstream = delta.dot(&w);
            let z = &cache.pre_activations[l - 1];
            let a = &cache.inputs[l];
            ndarray::Zip::from(&mut upstream)
                .and(z)
                .and(a)
                .for_each(|d, &z, &a| *d *= spec.activation.derivative(z, a));
            delta = upstream;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("sgd.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("sgd.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("sgd.weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Heavy-ball velocity, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer(ParamVector);

impl MomentumBuffer {
    pub fn new(len: usize) -> Self {
        MomentumBuffer(ParamVector::zeros(len))
    }

    pub fn velocity(&self) -> &ParamVector {
        &self.0
    }
}

/// `v ← momentum·v + (grad + wd·w)`, then `w ← w − lr·v`.
pub fn sgd_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    state: &mut MomentumBuffer,
    hyper: &SgdHyper,
) -> Result<()> {
    params.check_len(grad.len(), "sgd_step: gradient")?;
    params.check_len(state.0.len(), "sgd_step: momentum buffer")?;
    for ((w, &g), v) in params.iter_mut().zip(grad.iter()).zip(state.0.iter_mut()) {
        *v = hyper.momentum * *v + (g + hyper.weight_decay * *w);
        *w -= hyper.learning_rate * *v;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after sgd step"));
    }
    Ok(())
}
