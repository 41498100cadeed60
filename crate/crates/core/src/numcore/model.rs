//! A small sequential classifier with exact reverse-mode gradients.
//!
//! Layers operate on a batch whose per-sample shape is either flat `[F]` or
//! image-like `[C, H, W]`. Dense layers flatten whatever they receive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Added to the variance inside the normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running variances never drop below this.
pub const BN_VAR_FLOOR: f64 = 1e-8;
/// Weight of the new batch in the running-stat update during training.
pub const BN_TRAIN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    /// Stride 1, zero padding `kernel / 2`; `kernel` must be odd.
    Conv {
        channels: usize,
        kernel: usize,
    },
    BatchNorm,
    Relu,
    Tanh,
    /// Non-overlapping average pooling.
    AvgPool {
        size: usize,
    },
}

/// Architecture descriptor: input shape plus a layer list ending in a dense
/// layer whose width is the class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// `Dense -> BatchNorm -> ReLU` per hidden width, then a dense head.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: classes });
        ArchSpec {
            input_shape: vec![input_dim],
            layers,
        }
    }

    /// `Conv3x3 -> BN -> ReLU -> AvgPool2 -> Dense -> BN -> ReLU -> Dense`.
    pub fn small_cnn(input_shape: [usize; 3], conv_channels: usize, hidden: usize, classes: usize) -> Self {
        ArchSpec {
            input_shape: input_shape.to_vec(),
            layers: vec![
                LayerSpec::Conv {
                    channels: conv_channels,
                    kernel: 3,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Dense { units: hidden },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { units: classes },
            ],
        }
    }

    pub fn is_image(&self) -> bool {
        self.input_shape.len() == 3
    }

    /// Resolve shapes and parameter offsets. Also validates the spec.
    fn resolve(&self) -> Result<Resolved> {
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) || !(shape.len() == 1 || shape.len() == 3) {
            return Err(Error::invalid(format!(
                "input shape must be [features] or [channels, height, width] with non-zero extents, got {shape:?}"
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        let mut bn_channels = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            let flat: usize = shape.iter().product();
            let layer = match *spec {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::invalid(format!("layer {i}: dense layer with 0 units")));
                    }
                    let l = Layer::Dense {
                        input: flat,
                        output: units,
                        offset,
                    };
                    offset += units * flat + units;
                    shape = vec![units];
                    l
                }
                LayerSpec::Conv { channels, kernel } => {
                    if shape.len() != 3 {
                        return Err(Error::invalid(format!("layer {i}: convolution needs image input")));
                    }
                    if kernel % 2 == 0 || channels == 0 {
                        return Err(Error::invalid(format!(
                            "layer {i}: convolution needs odd kernel and >0 channels"
                        )));
                    }
                    let l = Layer::Conv {
                        in_channels: shape[0],
                        out_channels: channels,
                        kernel,
                        height: shape[1],
                        width: shape[2],
                        offset,
                    };
                    offset += channels * shape[0] * kernel * kernel + channels;
                    shape[0] = channels;
                    l
                }
                LayerSpec::BatchNorm => {
                    let (channels, spatial) = if shape.len() == 3 {
                        (shape[0], shape[1] * shape[2])
                    } else {
                        (shape[0], 1)
                    };
                    let l = Layer::BatchNorm {
                        channels,
                        spatial,
                        offset,
                        index: bn_channels.len(),
                    };
                    bn_channels.push(channels);
                    offset += 2 * channels;
                    l
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::AvgPool { size } => {
                    if shape.len() != 3 || size == 0 || !shape[1].is_multiple_of(size) || !shape[2].is_multiple_of(size)
                    {
                        return Err(Error::invalid(format!(
                            "layer {i}: pooling size {size} does not tile shape {shape:?}"
                        )));
                    }
                    let l = Layer::AvgPool {
                        channels: shape[0],
                        height: shape[1],
                        width: shape[2],
                        size,
                    };
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                    l
                }
            };
            layers.push(layer);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) if *units >= 2 => {}
            _ => {
                return Err(Error::invalid(
                    "architecture must end in a dense layer with at least 2 classes",
                ))
            }
        }
        Ok(Resolved {
            layers,
            num_params: offset,
            num_classes: shape[0],
            bn_channels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Dense {
        input: usize,
        output: usize,
        offset: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
        offset: usize,
    },
    BatchNorm {
        channels: usize,
        spatial: usize,
        offset: usize,
        index: usize,
    },
    Relu,
    Tanh,
    AvgPool {
        channels: usize,
        height: usize,
        width: usize,
        size: usize,
    },
}

#[derive(Debug, Clone)]
struct Resolved {
    layers: Vec<Layer>,
    num_params: usize,
    num_classes: usize,
    bn_channels: Vec<usize>,
}

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with the current batch's statistics (training).
    Batch,
    /// Normalize with running statistics (inference).
    Running,
}

impl BnMode {
    /// `Batch` when the batch can support it, otherwise `Running`.
    pub fn training_for(batch: usize) -> Self {
        if batch >= 2 {
            BnMode::Batch
        } else {
            BnMode::Running
        }
    }
}

/// Per-channel running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running <- keep * running + (1 - keep) * batch`, variance floored.
    pub fn blend(&mut self, batch: &BnStats, keep: f64) {
        for (r, &b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + (1.0 - keep) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = (keep * *r + (1.0 - keep) * b).max(BN_VAR_FLOOR);
        }
    }
}

/// Mean and (biased) variance of a batch-norm layer's input over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradient of some scalar with respect to a layer's batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStatGrad {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    stats: BnStats,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    mode: BnMode,
    /// `activations[l]` is the input of layer `l`; the last entry is the logits.
    activations: Vec<Tensor>,
    bn: Vec<BnCache>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace always holds the input")
    }

    /// Layer inputs in order; entry `l` feeds layer `l`, the last is the logits.
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Batch statistics of every batch-norm layer's input, in layer order.
    pub fn batch_stats(&self) -> Vec<BnStats> {
        self.bn.iter().map(|c| c.stats.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub params: Vec<f64>,
    pub input: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    arch: ArchSpec,
    params: Vec<f64>,
    bn_states: Vec<BatchNormState>,
}

/// Classifier with a flat parameter vector.
///
/// Parameter layout per layer, in order: dense `W[out][in]` then `b[out]`;
/// conv `W[out_c][in_c][k][k]` then `b[out_c]`; batch-norm `gamma[c]` then
/// `beta[c]`. Weights and biases are initialized uniformly in
/// `±1/sqrt(fan_in)`, batch-norm scales to 1 and shifts to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct Model {
    arch: ArchSpec,
    layers: Vec<Layer>,
    num_classes: usize,
    params: Vec<f64>,
    bn_states: Vec<BatchNormState>,
}

impl TryFrom<ModelRepr> for Model {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        Model::from_parts(r.arch, r.params, r.bn_states)
    }
}

impl From<Model> for ModelRepr {
    fn from(m: Model) -> Self {
        ModelRepr {
            arch: m.arch,
            params: m.params,
            bn_states: m.bn_states,
        }
    }
}

impl Model {
    /// Randomly initialized model.
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, rng: &mut R) -> Result<Self> {
        let mut model = Model::zeros(arch)?;
        let layers = model.layers.clone();
        for layer in layers {
            match layer {
                Layer::Dense { input, output, offset } => {
                    let bound = 1.0 / (input as f64).sqrt();
                    for p in &mut model.params[offset..offset + output * input + output] {
                        *p = rng.random_range(-bound..bound);
                    }
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    offset,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for p in &mut model.params[offset..offset + out_channels * fan_in + out_channels] {
                        *p = rng.random_range(-bound..bound);
                    }
                }
                _ => {}
            }
        }
        Ok(model)
    }

    /// All weights zero, batch-norm scale 1.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let r = arch.resolve()?;
        let mut params = vec![0.0; r.num_params];
        for layer in &r.layers {
            if let Layer::BatchNorm { channels, offset, .. } = *layer {
                params[offset..offset + channels].fill(1.0);
            }
        }
        Ok(Model {
            arch,
            layers: r.layers,
            num_classes: r.num_classes,
            params,
            bn_states: r.bn_channels.iter().map(|&c| BatchNormState::new(c)).collect(),
        })
    }

    pub fn from_parts(arch: ArchSpec, params: Vec<f64>, bn_states: Vec<BatchNormState>) -> Result<Self> {
        let r = arch.resolve()?;
        if params.len() != r.num_params {
            return Err(Error::invalid(format!(
                "architecture has {} parameters, got {}",
                r.num_params,
                params.len()
            )));
        }
        let channels: Vec<usize> = bn_states.iter().map(BatchNormState::channels).collect();
        if channels != r.bn_channels || bn_states.iter().any(|s| s.running_var.len() != s.running_mean.len()) {
            return Err(Error::invalid("batch-norm states do not match the architecture"));
        }
        Ok(Model {
            arch,
            layers: r.layers,
            num_classes: r.num_classes,
            params,
            bn_states,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// `params -= lr * grad`
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn_states
    }

    pub fn set_bn_states(&mut self, states: Vec<BatchNormState>) -> Result<()> {
        let ok = states.len() == self.bn_states.len()
            && states
                .iter()
                .zip(&self.bn_states)
                .all(|(a, b)| a.channels() == b.channels() && a.running_var.len() == a.channels());
        if !ok {
            return Err(Error::invalid("batch-norm states do not match the architecture"));
        }
        self.bn_states = states;
        Ok(())
    }

    /// Blend observed batch statistics into the running statistics with the
    /// standard training momentum.
    pub fn update_running_stats(&mut self, stats: &[BnStats]) {
        for (s, b) in self.bn_states.iter_mut().zip(stats) {
            s.blend(b, 1.0 - BN_TRAIN_MOMENTUM);
        }
    }

    pub fn same_architecture(&self, other: &Model) -> bool {
        self.arch == other.arch
    }

    fn check_input(&self, x: &Tensor, mode: BnMode) -> Result<()> {
        if x.sample_shape() != self.arch.input_shape.as_slice() || x.batch() == 0 {
            let mut expected = vec![x.batch().max(1)];
            expected.extend_from_slice(&self.arch.input_shape);
            return Err(Error::ShapeMismatch {
                expected,
                actual: x.shape().to_vec(),
            });
        }
        if mode == BnMode::Batch && !self.bn_states.is_empty() && x.batch() < 2 {
            return Err(Error::DegenerateBatch(x.batch()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut trace = self.forward_traced(x, mode)?;
        Ok(trace.activations.pop().expect("non-empty"))
    }

    /// Class predictions with running statistics.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(x, BnMode::Running)?.argmax_rows())
    }

    pub fn forward_traced(&self, x: &Tensor, mode: BnMode) -> Result<Trace> {
        self.check_input(x, mode)?;
        let batch = x.batch();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::new();
        activations.push(x.clone());
        for layer in &self.layers {
            let input = activations.last().expect("non-empty");
            let out = match *layer {
                Layer::Dense {
                    input: n_in,
                    output,
                    offset,
                } => {
                    let w = &self.params[offset..offset + output * n_in];
                    let b = &self.params[offset + output * n_in..offset + output * n_in + output];
                    let mut out = vec![0.0; batch * output];
                    for (xi, yi) in input.data().chunks(n_in).zip(out.chunks_mut(output)) {
                        for o in 0..output {
                            let row = &w[o * n_in..(o + 1) * n_in];
                            yi[o] = b[o] + row.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                        }
                    }
                    Tensor::new(vec![batch, output], out)?
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                    offset,
                } => {
                    let out = conv_forward(
                        input.data(),
                        &self.params[offset..],
                        batch,
                        in_channels,
                        out_channels,
                        kernel,
                        height,
                        width,
                    );
                    Tensor::new(vec![batch, out_channels, height, width], out)?
                }
                Layer::BatchNorm {
                    channels,
                    spatial,
                    offset,
                    index,
                } => {
                    let gamma = &self.params[offset..offset + channels];
                    let beta = &self.params[offset + channels..offset + 2 * channels];
                    let stats = channel_stats(input.data(), batch, channels, spatial);
                    let (mean, var) = match mode {
                        BnMode::Batch => (stats.mean.clone(), stats.var.clone()),
                        BnMode::Running => (
                            self.bn_states[index].running_mean.clone(),
                            self.bn_states[index].running_var.clone(),
                        ),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut xhat = vec![0.0; input.numel()];
                    let mut out = vec![0.0; input.numel()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                let h = (input.data()[base + s] - mean[c]) * inv_std[c];
                                xhat[base + s] = h;
                                out[base + s] = gamma[c] * h + beta[c];
                            }
                        }
                    }
                    bn.push(BnCache { xhat, inv_std, stats });
                    Tensor::new(input.shape().to_vec(), out)?
                }
                Layer::Relu => input.map(|v| v.max(0.0)),
                Layer::Tanh => input.map(f64::tanh),
                Layer::AvgPool {
                    channels,
                    height,
                    width,
                    size,
                } => {
                    let (oh, ow) = (height / size, width / size);
                    let norm = 1.0 / (size * size) as f64;
                    let mut out = vec![0.0; batch * channels * oh * ow];
                    for bc in 0..batch * channels {
                        let src = &input.data()[bc * height * width..(bc + 1) * height * width];
                        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
                        for y in 0..height {
                            for x in 0..width {
                                dst[(y / size) * ow + x / size] += src[y * width + x] * norm;
                            }
                        }
                    }
                    Tensor::new(vec![batch, channels, oh, ow], out)?
                }
            };
            activations.push(out);
        }
        Ok(Trace { mode, activations, bn })
    }

    /// Reverse pass. `stat_grads`, when given, holds the gradient of an
    /// additional loss term with respect to each batch-norm layer's batch
    /// statistics; it is folded in at that layer's input.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor, stat_grads: Option<&[BnStatGrad]>) -> Result<Grads> {
        grad_logits.expect_shape(trace.logits().shape())?;
        if let Some(sg) = stat_grads {
            if sg.len() != self.bn_states.len() {
                return Err(Error::invalid(format!(
                    "expected {} batch-norm stat gradients, got {}",
                    self.bn_states.len(),
                    sg.len()
                )));
            }
        }
        let batch = trace.logits().batch();
        let mut gparams = vec![0.0; self.params.len()];
        let mut grad = grad_logits.data().to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[l];
            let x = input.data();
            grad = match *layer {
                Layer::Dense {
                    input: n_in,
                    output,
                    offset,
                } => {
                    let w = &self.params[offset..offset + output * n_in];
                    let mut dx = vec![0.0; batch * n_in];
                    let (gw, rest) = gparams[offset..offset + output * n_in + output].split_at_mut(output * n_in);
                    for b in 0..batch {
                        let xi = &x[b * n_in..(b + 1) * n_in];
                        let dyi = &grad[b * output..(b + 1) * output];
                        let dxi = &mut dx[b * n_in..(b + 1) * n_in];
                        for o in 0..output {
                            let d = dyi[o];
                            if d == 0.0 {
                                continue;
                            }
                            rest[o] += d;
                            let row = &w[o * n_in..(o + 1) * n_in];
                            let grow = &mut gw[o * n_in..(o + 1) * n_in];
                            for i in 0..n_in {
                                grow[i] += d * xi[i];
                                dxi[i] += d * row[i];
                            }
                        }
                    }
                    dx
                }
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                    offset,
                } => conv_backward(
                    x,
                    &grad,
                    &self.params[offset..],
                    &mut gparams[offset..],
                    batch,
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                ),
                Layer::BatchNorm {
                    channels,
                    spatial,
                    offset,
                    index,
                } => {
                    let cache = &self.bn_caches(trace)[index];
                    let gamma = &self.params[offset..offset + channels];
                    let n = (batch * spatial) as f64;
                    let mut dx = vec![0.0; x.len()];
                    for c in 0..channels {
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                        for b in 0..batch {
                            let base = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                sum_dy += grad[base + s];
                                sum_dy_xhat += grad[base + s] * cache.xhat[base + s];
                            }
                        }
                        gparams[offset + c] += sum_dy_xhat;
                        gparams[offset + channels + c] += sum_dy;
                        let inv = cache.inv_std[c];
                        let (sg_mean, sg_var) = match stat_grads {
                            Some(sg) => (sg[index].mean[c], sg[index].var[c]),
                            None => (0.0, 0.0),
                        };
                        let mu = cache.stats.mean[c];
                        for b in 0..batch {
                            let base = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                let i = base + s;
                                let dxhat = grad[i] * gamma[c];
                                let mut d = match trace.mode {
                                    BnMode::Batch => {
                                        inv / n
                                            * (n * dxhat - gamma[c] * sum_dy - cache.xhat[i] * gamma[c] * sum_dy_xhat)
                                    }
                                    BnMode::Running => dxhat * inv,
                                };
                                d += sg_mean / n + sg_var * 2.0 * (x[i] - mu) / n;
                                dx[i] = d;
                            }
                        }
                    }
                    dx
                }
                Layer::Relu => grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                Layer::Tanh => grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        let t = v.tanh();
                        g * (1.0 - t * t)
                    })
                    .collect(),
                Layer::AvgPool {
                    channels,
                    height,
                    width,
                    size,
                } => {
                    let (oh, ow) = (height / size, width / size);
                    let norm = 1.0 / (size * size) as f64;
                    let mut dx = vec![0.0; x.len()];
                    for bc in 0..batch * channels {
                        let g = &grad[bc * oh * ow..(bc + 1) * oh * ow];
                        let d = &mut dx[bc * height * width..(bc + 1) * height * width];
                        for y in 0..height {
                            for xx in 0..width {
                                d[y * width + xx] = g[(y / size) * ow + xx / size] * norm;
                            }
                        }
                    }
                    dx
                }
            };
        }
        Ok(Grads {
            params: gparams,
            input: Tensor::new(trace.activations[0].shape().to_vec(), grad)?,
        })
    }

    fn bn_caches<'a>(&self, trace: &'a Trace) -> &'a [BnCache] {
        &trace.bn
    }
}

fn channel_stats(x: &[f64], batch: usize, channels: usize, spatial: usize) -> BnStats {
    let n = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            s += x[base..base + spatial].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            v += x[base..base + spatial].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    BnStats { mean, var }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    params: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let weights = &params[..cout * cin * k * k];
    let bias = &params[cout * cin * k * k..cout * cin * k * k + cout];
    let mut out = vec![0.0; batch * cout * h * w];
    for b in 0..batch {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * h * w..(b * cout + co + 1) * h * w];
            dst.fill(bias[co]);
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let ker = &weights[((co * cin) + ci) * k * k..((co * cin) + ci + 1) * k * k];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += ker[ky * k + kx] * src[sy as usize * w + sx as usize];
                            }
                        }
                        dst[y * w + xx] += acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    dy: &[f64],
    params: &[f64],
    gparams: &mut [f64],
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let nw = cout * cin * k * k;
    let weights = &params[..nw];
    let mut dx = vec![0.0; x.len()];
    for b in 0..batch {
        for co in 0..cout {
            let g = &dy[(b * cout + co) * h * w..(b * cout + co + 1) * h * w];
            gparams[nw + co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let kbase = ((co * cin) + ci) * k * k;
                for y in 0..h {
                    for xx in 0..w {
                        let gv = g[y * w + xx];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let si = (b * cin + ci) * h * w + sy as usize * w + sx as usize;
                                gparams[kbase + ky * k + kx] += gv * src[sy as usize * w + sx as usize];
                                dx[si] += gv * weights[kbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
