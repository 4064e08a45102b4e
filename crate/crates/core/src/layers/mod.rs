//! Differentiable layer primitives over the autodiff graph: convolution,
//! pooling, dense, dropout, batch/layer normalization, and recurrent cells.
//! Layers hold no tensors themselves; parameters enter as graph leaves so one
//! parameter set can serve several call sites.

pub mod recurrent;

pub use recurrent::{apply_per_frame, recurrent_step, run_sequence, RecurrentParams, RecurrentState, RnnCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::conv::{Conv3dGeom, Padding, PoolGeom, PoolKind};
use crate::tensor::graph::{BatchStats, Graph, NodeId};
use crate::tensor::Tensor;

/// Train/inference switch threaded through every stateful layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// 3D convolution hyperparameters; the weight tensor is kT x kH x kW x C x K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: [usize; 3],
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(kernel: [usize; 3], in_ch: usize, out_ch: usize) -> Self {
        ConvSpec {
            kernel,
            in_ch,
            out_ch,
            stride: [1, 1, 1],
            padding: Padding::Same,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
            self.in_ch,
            self.out_ch,
        ]
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![self.out_ch]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_ch * self.out_ch + self.out_ch
    }

    fn fan_in(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_ch
    }

    /// Fan-in-scaled normal weights for ReLU stacks, zero bias.
    pub fn init(&self, rng: &mut Prng) -> (Tensor, Tensor) {
        let weight = he_normal(rng, &self.weight_shape(), self.fan_in());
        (weight, Tensor::zeros(&self.bias_shape()))
    }

    pub fn out_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let geom = Conv3dGeom::resolve(input_shape, &self.weight_shape(), self.stride, self.padding)?;
        Ok(geom.out_shape())
    }
}

/// Cross-correlation plus bias; differentiable w.r.t. input, weight and bias.
pub fn conv3d_forward(
    g: &mut Graph,
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    spec: &ConvSpec,
) -> Result<NodeId> {
    let in_shape = g.value(input).shape().to_vec();
    if in_shape.len() != 5 {
        return Err(Error::InvalidGeometry(format!(
            "conv3d input must be (N,T,H,W,C), got {in_shape:?}"
        )));
    }
    if in_shape[4] != spec.in_ch {
        return Err(Error::ChannelMismatch {
            expected: spec.in_ch,
            got: in_shape[4],
        });
    }
    let geom = Conv3dGeom::resolve(&in_shape, g.value(weight).shape(), spec.stride, spec.padding)?;
    g.conv3d(input, weight, bias, geom)
}

/// 2D convolution over (N,H,W,C) frames, routed through the 3D kernel with a
/// unit temporal extent.
pub fn conv2d_forward(
    g: &mut Graph,
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    spec: &ConvSpec,
) -> Result<NodeId> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidGeometry(format!(
            "conv2d input must be (N,H,W,C), got {shape:?}"
        )));
    }
    let as_3d = g.reshape(input, vec![shape[0], 1, shape[1], shape[2], shape[3]])?;
    let out = conv3d_forward(g, as_3d, weight, bias, spec)?;
    let out_shape = g.value(out).shape().to_vec();
    g.reshape(out, vec![out_shape[0], out_shape[2], out_shape[3], out_shape[4]])
}

pub fn max_pool3d(
    g: &mut Graph,
    input: NodeId,
    window: [usize; 3],
    stride: [usize; 3],
    padding: Padding,
) -> Result<NodeId> {
    let geom = PoolGeom::resolve(g.value(input).shape(), window, stride, padding)?;
    g.pool3d(input, geom, PoolKind::Max)
}

pub fn avg_pool3d(
    g: &mut Graph,
    input: NodeId,
    window: [usize; 3],
    stride: [usize; 3],
    padding: Padding,
) -> Result<NodeId> {
    let geom = PoolGeom::resolve(g.value(input).shape(), window, stride, padding)?;
    g.pool3d(input, geom, PoolKind::Avg)
}

/// Mean over every spatiotemporal position, one value per channel.
pub fn global_avg_pool(g: &mut Graph, input: NodeId) -> Result<NodeId> {
    g.global_avg_pool(input)
}

/// Normalization flavor and its constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind, features: usize) -> Self {
        NormSpec {
            kind,
            features,
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    /// gamma = 1, beta = 0.
    pub fn init(&self) -> (Tensor, Tensor) {
        (Tensor::ones(&[self.features]), Tensor::zeros(&[self.features]))
    }
}

/// Running estimates kept by batch normalization, updated only in training.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormState {
    pub fn new(features: usize) -> Self {
        NormState {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    fn update(&mut self, momentum: f64, stats: &BatchStats) {
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Batch normalization: per-feature statistics across batch and spatial
/// positions. Training mode normalizes with current-batch statistics and
/// refreshes the running estimates; inference mode uses the running values.
pub fn batch_norm_forward(
    g: &mut Graph,
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    spec: &NormSpec,
    state: &mut NormState,
    mode: Mode,
) -> Result<NodeId> {
    debug_assert_eq!(spec.kind, NormKind::Batch);
    match mode {
        Mode::Train => {
            let (id, stats) = g.batch_norm_train(input, gamma, beta, spec.eps)?;
            state.update(spec.momentum, &stats);
            Ok(id)
        }
        Mode::Infer => g.batch_norm_infer(
            input,
            gamma,
            beta,
            spec.eps,
            state.mean.clone(),
            state.var.clone(),
        ),
    }
}

/// Layer normalization: per-sample statistics across channels and spatial
/// positions; independent of batch composition.
pub fn layer_norm_forward(
    g: &mut Graph,
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    spec: &NormSpec,
) -> Result<NodeId> {
    debug_assert_eq!(spec.kind, NormKind::Layer);
    g.layer_norm(input, gamma, beta, spec.eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        Ok(DropoutSpec { rate })
    }
}

/// Inverted dropout: each element is zeroed independently with probability
/// `rate` and survivors are scaled by 1/(1-rate). Identity in inference mode.
pub fn dropout_forward(
    g: &mut Graph,
    input: NodeId,
    spec: DropoutSpec,
    mode: Mode,
    rng: &mut Prng,
) -> Result<NodeId> {
    if mode == Mode::Infer || spec.rate == 0.0 {
        return Ok(input);
    }
    let keep_scale = 1.0 / (1.0 - spec.rate);
    let mask: Vec<f64> = (0..g.value(input).numel())
        .map(|_| if rng.uniform() < spec.rate { 0.0 } else { keep_scale })
        .collect();
    g.dropout(input, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

/// Affine map (N,D) x (D,U) + bias, with an optional ReLU.
pub fn dense_forward(
    g: &mut Graph,
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let out = g.matmul(input, weight)?;
    let out = g.add_bias(out, bias)?;
    Ok(match activation {
        Activation::Linear => out,
        Activation::Relu => g.relu(out),
    })
}

/// Fan-in-scaled normal draw (std = sqrt(2/fan_in)).
pub fn he_normal(rng: &mut Prng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// Dense-layer initialization helper: He weights, zero bias.
pub fn dense_init(rng: &mut Prng, in_dim: usize, out_dim: usize) -> (Tensor, Tensor) {
    (
        he_normal(rng, &[in_dim, out_dim], in_dim),
        Tensor::zeros(&[out_dim]),
    )
}
