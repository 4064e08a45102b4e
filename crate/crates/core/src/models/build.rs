//! Family builders: translate a `ModelConfig` into the executable layer DAG.
//!
//! Conventions shared by every family: each convolution is followed by
//! normalization and ReLU; widths scale with the config's width multiplier;
//! regression outputs start life biased at the EF mid-range so untrained
//! models predict a plausible constant instead of zero.

use std::collections::BTreeMap;

use super::graph::{op_out_shape, HiddenNorm, InputSpec, LayerOp, Model, ModelNode, ParamSet, PoolAlgo, PortRef};
use super::{Conv2Kernel, Family, HeadVariant, ModelConfig, NormMode};
use crate::error::{Error, Result};
use crate::layers::{Activation, ConvSpec, NormKind, NormState, RecurrentParams};
use crate::rng::Prng;
use crate::tensor::conv::Padding;
use crate::tensor::Tensor;

/// Initial bias of every regression output, mid-range of the 0-100 EF scale.
pub const EF_MID_INIT: f64 = 45.0;

/// Join parameter-name segments, tolerating an empty prefix.
fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Inception branch widths (1x1, 3x3-reduce, 3x3, double-3x3-reduce,
/// double-3x3, pool-projection); the classic v1 "3a"/"4a"/"5a" width rows.
#[derive(Debug, Clone, Copy)]
struct IncWidths {
    b1: usize,
    b2_reduce: usize,
    b2: usize,
    b3_reduce: usize,
    b3: usize,
    pool_proj: usize,
}

const IM3: IncWidths = IncWidths {
    b1: 64,
    b2_reduce: 96,
    b2: 128,
    b3_reduce: 16,
    b3: 32,
    pool_proj: 32,
};
const IM4: IncWidths = IncWidths {
    b1: 192,
    b2_reduce: 96,
    b2: 208,
    b3_reduce: 16,
    b3: 48,
    pool_proj: 64,
};
const IM5: IncWidths = IncWidths {
    b1: 256,
    b2_reduce: 160,
    b2: 320,
    b3_reduce: 32,
    b3: 128,
    pool_proj: 128,
};

/// Build the full layer graph for the configured family and initialize all
/// parameters from the provided stream.
pub fn build_model(config: &ModelConfig, rng: &mut Prng) -> Result<Model> {
    config.validate()?;
    let mut b = Builder::new(config.clone());
    match config.family {
        Family::I3dOriginal => b.build_i3d(rng, true)?,
        Family::I3dMini => b.build_i3d(rng, false)?,
        Family::TwoStream => b.build_two_stream(rng)?,
        Family::FusionCombination => b.build_combination(rng)?,
        Family::FusionNewCombination => b.build_new_combination(rng)?,
        Family::FusionDualInput => b.build_dual_input(rng, false)?,
        Family::FusionDualTruncated => b.build_dual_input(rng, true)?,
        Family::FusionSingleInput => b.build_single_input(rng)?,
        Family::CnnRnnScratch => b.build_cnn_rnn(rng)?,
    }
    b.finish()
}

struct Builder {
    config: ModelConfig,
    inputs: Vec<InputSpec>,
    input_shapes: Vec<Vec<usize>>,
    nodes: Vec<ModelNode>,
    shapes: Vec<Vec<usize>>,
    params: ParamSet,
    norm_states: BTreeMap<String, NormState>,
    dropout_rate: f64,
}

impl Builder {
    fn new(config: ModelConfig) -> Self {
        let dropout_rate = default_dropout(config.family);
        Builder {
            config,
            inputs: Vec::new(),
            input_shapes: Vec::new(),
            nodes: Vec::new(),
            shapes: Vec::new(),
            params: ParamSet::default(),
            norm_states: BTreeMap::new(),
            dropout_rate,
        }
    }

    fn finish(self) -> Result<Model> {
        let model = Model {
            config: self.config,
            inputs: self.inputs,
            nodes: self.nodes,
            params: self.params,
            norm_states: self.norm_states,
        };
        // One validating propagation pass; the builder tracked shapes as it
        // went, so this confirms the recorded graph agrees with itself.
        let shapes = model.propagate_shapes(1)?;
        match shapes.last() {
            Some(s) if s == &vec![1, 1] => Ok(model),
            other => Err(Error::InvalidConfig(format!(
                "model must end in one scalar per sample, got {other:?}"
            ))),
        }
    }

    fn ch(&self, base: usize) -> usize {
        self.config.ch(base)
    }

    fn cnn_norm_kind(&self) -> NormKind {
        match self.config.norm {
            NormMode::Layer => NormKind::Layer,
            // Mixed keeps batch norm in the CNN.
            NormMode::Batch | NormMode::Mixed => NormKind::Batch,
        }
    }

    fn add_input(&mut self, name: &str, shape: Vec<usize>) -> PortRef {
        let mut batched = vec![1];
        batched.extend_from_slice(&shape);
        self.inputs.push(InputSpec {
            name: name.to_string(),
            shape,
        });
        self.input_shapes.push(batched);
        PortRef::Input(self.inputs.len() - 1)
    }

    fn shape_of(&self, port: PortRef) -> &[usize] {
        match port {
            PortRef::Input(i) => &self.input_shapes[i],
            PortRef::Node(i) => &self.shapes[i],
        }
    }

    fn channels_of(&self, port: PortRef) -> usize {
        *self.shape_of(port).last().expect("rank >= 1")
    }

    fn push(&mut self, group: &str, name: &str, op: LayerOp, inputs: Vec<PortRef>) -> Result<PortRef> {
        let operand_shapes: Vec<Vec<usize>> = inputs
            .iter()
            .map(|p| self.shape_of(*p).to_vec())
            .collect();
        let out_shape = op_out_shape(&op, &operand_shapes)
            .map_err(|e| Error::InvalidConfig(format!("node {name}: {e}")))?;
        self.nodes.push(ModelNode {
            name: name.to_string(),
            group: group.to_string(),
            op,
            inputs,
        });
        self.shapes.push(out_shape);
        Ok(PortRef::Node(self.nodes.len() - 1))
    }

    /// Conv + norm + ReLU. `param_prefix` names the parameter set; when the
    /// set already exists (shared backbones) the same tensors are bound again.
    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &mut self,
        group: &str,
        node: &str,
        param_prefix: &str,
        kernel: [usize; 3],
        out_ch: usize,
        input: PortRef,
        rng: &mut Prng,
    ) -> Result<PortRef> {
        if out_ch == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv block {node}: zero-width branch"
            )));
        }
        let in_ch = self.channels_of(input);
        let spec = ConvSpec::same(kernel, in_ch, out_ch);
        let w_name = format!("{param_prefix}/w");
        let b_name = format!("{param_prefix}/b");
        let g_name = format!("{param_prefix}/g");
        let beta_name = format!("{param_prefix}/beta");
        let state_name = format!("{param_prefix}/rs");
        if self.params.contains(&w_name) {
            let existing = self.params.get(&w_name)?.value.shape().to_vec();
            if existing != spec.weight_shape() {
                return Err(Error::InvalidConfig(format!(
                    "shared parameter {w_name} has shape {existing:?}, needed {:?}",
                    spec.weight_shape()
                )));
            }
        } else {
            let (w, bias) = spec.init(rng);
            self.params.insert(&w_name, w, true)?;
            self.params.insert(&b_name, bias, false)?;
            self.params.insert(&g_name, Tensor::ones(&[out_ch]), false)?;
            self.params.insert(&beta_name, Tensor::zeros(&[out_ch]), false)?;
            self.norm_states.insert(state_name.clone(), NormState::new(out_ch));
        }
        let x = self.push(
            group,
            node,
            LayerOp::Conv {
                spec,
                weight: w_name,
                bias: b_name,
            },
            vec![input],
        )?;
        let x = self.push(
            group,
            &format!("{node}.norm"),
            LayerOp::Norm {
                kind: self.cnn_norm_kind(),
                features: out_ch,
                eps: 1e-5,
                momentum: 0.9,
                gamma: g_name,
                beta: beta_name,
                state: state_name,
            },
            vec![x],
        )?;
        self.push(group, &format!("{node}.relu"), LayerOp::Relu, vec![x])
    }

    fn max_pool(
        &mut self,
        group: &str,
        node: &str,
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        input: PortRef,
    ) -> Result<PortRef> {
        self.push(
            group,
            node,
            LayerOp::Pool {
                algo: PoolAlgo::Max,
                window,
                stride,
                padding,
            },
            vec![input],
        )
    }

    fn gap(&mut self, group: &str, node: &str, input: PortRef) -> Result<PortRef> {
        self.push(group, node, LayerOp::GlobalAvgPool, vec![input])
    }

    fn dropout(&mut self, group: &str, node: &str, input: PortRef) -> Result<PortRef> {
        let rate = self.dropout_rate;
        self.push(group, node, LayerOp::Dropout { rate }, vec![input])
    }

    /// Dense layer with freshly initialized parameters.
    #[allow(clippy::too_many_arguments)]
    fn dense(
        &mut self,
        group: &str,
        node: &str,
        param_prefix: &str,
        out_dim: usize,
        activation: Activation,
        bias_init: f64,
        input: PortRef,
        rng: &mut Prng,
    ) -> Result<PortRef> {
        let in_dim = *self
            .shape_of(input)
            .last()
            .expect("dense input has a feature axis");
        let w_name = format!("{param_prefix}/w");
        let b_name = format!("{param_prefix}/b");
        let (w, mut bias) = crate::layers::dense_init(rng, in_dim, out_dim);
        for v in bias.data_mut() {
            *v = bias_init;
        }
        self.params.insert(&w_name, w, true)?;
        self.params.insert(&b_name, bias, false)?;
        self.push(
            group,
            node,
            LayerOp::Dense {
                in_dim,
                out_dim,
                activation,
                weight: w_name,
                bias: b_name,
            },
            vec![input],
        )
    }

    /// Final 2 -> 1 fusion of two intermediate stream predictions,
    /// initialized to average them.
    fn fusion_dense(&mut self, group: &str, node: &str, param_prefix: &str, input: PortRef) -> Result<PortRef> {
        let w_name = format!("{param_prefix}/w");
        let b_name = format!("{param_prefix}/b");
        self.params.insert(
            &w_name,
            Tensor::from_vec(vec![2, 1], vec![0.5, 0.5])?,
            true,
        )?;
        self.params.insert(&b_name, Tensor::zeros(&[1]), false)?;
        self.push(
            group,
            node,
            LayerOp::Dense {
                in_dim: 2,
                out_dim: 1,
                activation: Activation::Linear,
                weight: w_name,
                bias: b_name,
            },
            vec![input],
        )
    }

    /// The shared I3D stem. `two_d` builds the per-frame analogue (unit
    /// temporal kernel extents, input already folded to frames).
    #[allow(clippy::too_many_arguments)]
    fn i3d_stem(
        &mut self,
        group: &str,
        sfx: &str,
        pfx: &str,
        input: PortRef,
        two_d: bool,
        rng: &mut Prng,
    ) -> Result<PortRef> {
        let k = |t: usize, h: usize, w: usize| if two_d { [1, h, w] } else { [t, h, w] };
        let x = self.conv_block(
            group,
            &format!("{group}/conv_a{sfx}"),
            &format!("{pfx}/conv_a"),
            k(3, 3, 3),
            self.ch(64),
            input,
            rng,
        )?;
        let x = self.max_pool(
            group,
            &format!("{group}/pool_a{sfx}"),
            [1, 2, 2],
            [1, 2, 2],
            Padding::Valid,
            x,
        )?;
        // conv2: the ablated kernel slot (fixed 1x1 in the 2D analogue).
        let conv2_kernel = if two_d { Conv2Kernel::K1x1x1 } else { self.config.conv2_kernel };
        let x = match conv2_kernel {
            Conv2Kernel::K1x1x1 => self.conv_block(
                group,
                &format!("{group}/conv2{sfx}"),
                &format!("{pfx}/conv2"),
                k(1, 1, 1),
                self.ch(64),
                x,
                rng,
            )?,
            Conv2Kernel::K3x1x1 => self.conv_block(
                group,
                &format!("{group}/conv2{sfx}"),
                &format!("{pfx}/conv2"),
                k(3, 1, 1),
                self.ch(64),
                x,
                rng,
            )?,
            Conv2Kernel::K3x3x3 => self.conv_block(
                group,
                &format!("{group}/conv2{sfx}"),
                &format!("{pfx}/conv2"),
                k(3, 3, 3),
                self.ch(64),
                x,
                rng,
            )?,
            Conv2Kernel::Double3x3x3 => {
                let first = self.conv_block(
                    group,
                    &format!("{group}/conv2{sfx}"),
                    &format!("{pfx}/conv2"),
                    k(3, 3, 3),
                    self.ch(64),
                    x,
                    rng,
                )?;
                self.conv_block(
                    group,
                    &format!("{group}/conv2b{sfx}"),
                    &format!("{pfx}/conv2b"),
                    k(3, 3, 3),
                    self.ch(64),
                    first,
                    rng,
                )?
            }
        };
        let x = self.conv_block(
            group,
            &format!("{group}/conv_b{sfx}"),
            &format!("{pfx}/conv_b"),
            k(3, 3, 3),
            self.ch(192),
            x,
            rng,
        )?;
        self.max_pool(
            group,
            &format!("{group}/pool_b{sfx}"),
            [1, 2, 2],
            [1, 2, 2],
            Padding::Valid,
            x,
        )
    }

    /// Four-branch inception module: 1x1, 1x1->3x3, 1x1->3x3->3x3 (the
    /// stacked replacement for 5x5), and pool->1x1 projection, concatenated
    /// along channels.
    #[allow(clippy::too_many_arguments)]
    fn inception(
        &mut self,
        group: &str,
        sfx: &str,
        pfx: &str,
        input: PortRef,
        widths: IncWidths,
        two_d: bool,
        rng: &mut Prng,
    ) -> Result<PortRef> {
        let k = |t: usize, h: usize, w: usize| if two_d { [1, h, w] } else { [t, h, w] };
        let b1 = self.conv_block(
            group,
            &format!("{group}/b1{sfx}"),
            &format!("{pfx}/b1"),
            k(1, 1, 1),
            self.ch(widths.b1),
            input,
            rng,
        )?;
        let b2r = self.conv_block(
            group,
            &format!("{group}/b2_reduce{sfx}"),
            &format!("{pfx}/b2_reduce"),
            k(1, 1, 1),
            self.ch(widths.b2_reduce),
            input,
            rng,
        )?;
        let b2 = self.conv_block(
            group,
            &format!("{group}/b2{sfx}"),
            &format!("{pfx}/b2"),
            k(3, 3, 3),
            self.ch(widths.b2),
            b2r,
            rng,
        )?;
        let b3r = self.conv_block(
            group,
            &format!("{group}/b3_reduce{sfx}"),
            &format!("{pfx}/b3_reduce"),
            k(1, 1, 1),
            self.ch(widths.b3_reduce),
            input,
            rng,
        )?;
        let b3a = self.conv_block(
            group,
            &format!("{group}/b3a{sfx}"),
            &format!("{pfx}/b3a"),
            k(3, 3, 3),
            self.ch(widths.b3),
            b3r,
            rng,
        )?;
        let b3 = self.conv_block(
            group,
            &format!("{group}/b3b{sfx}"),
            &format!("{pfx}/b3b"),
            k(3, 3, 3),
            self.ch(widths.b3),
            b3a,
            rng,
        )?;
        let pooled = self.push(
            group,
            &format!("{group}/pool{sfx}"),
            LayerOp::Pool {
                algo: PoolAlgo::Max,
                window: k(3, 3, 3),
                stride: [1, 1, 1],
                padding: Padding::Same,
            },
            vec![input],
        )?;
        let b4 = self.conv_block(
            group,
            &format!("{group}/pool_proj{sfx}"),
            &format!("{pfx}/pool_proj"),
            k(1, 1, 1),
            self.ch(widths.pool_proj),
            pooled,
            rng,
        )?;
        self.push(
            group,
            &format!("{group}/concat{sfx}"),
            LayerOp::Concat { axis: 4 },
            vec![b1, b2, b3, b4],
        )
    }

    /// Stem + IM3, the I3D-mini feature extractor.
    #[allow(clippy::too_many_arguments)]
    fn i3d_mini_backbone(
        &mut self,
        stem_group: &str,
        im3_group: &str,
        sfx: &str,
        pfx: &str,
        input: PortRef,
        two_d: bool,
        rng: &mut Prng,
    ) -> Result<PortRef> {
        let x = self.i3d_stem(stem_group, sfx, &join(pfx, "stem"), input, two_d, rng)?;
        self.inception(im3_group, sfx, &join(pfx, "im3"), x, IM3, two_d, rng)
    }

    /// Regression head over a 5D feature map, per the configured variant.
    fn regression_head(&mut self, group: &str, pfx: &str, input: PortRef, rng: &mut Prng) -> Result<PortRef> {
        match self.config.head {
            HeadVariant::OG => {
                let x = self.dropout(group, &format!("{group}/dropout"), input)?;
                let x = self.push(group, &format!("{group}/flatten"), LayerOp::Flatten, vec![x])?;
                self.dense(
                    group,
                    &format!("{group}/dense"),
                    &format!("{pfx}/dense"),
                    1,
                    Activation::Linear,
                    EF_MID_INIT,
                    x,
                    rng,
                )
            }
            HeadVariant::A => {
                let x = self.gap(group, &format!("{group}/gap"), input)?;
                let x = self.dropout(group, &format!("{group}/dropout"), x)?;
                self.dense(
                    group,
                    &format!("{group}/dense"),
                    &format!("{pfx}/dense"),
                    1,
                    Activation::Linear,
                    EF_MID_INIT,
                    x,
                    rng,
                )
            }
            HeadVariant::B => {
                let x = self.dropout(group, &format!("{group}/dropout"), input)?;
                // 1x1x1 conv down to a single channel is the linear map; GAP
                // averages it into the scalar.
                let in_ch = self.channels_of(x);
                let spec = ConvSpec::same([1, 1, 1], in_ch, 1);
                let (w, mut bias) = spec.init(rng);
                for v in bias.data_mut() {
                    *v = EF_MID_INIT;
                }
                self.params.insert(&format!("{pfx}/conv/w"), w, true)?;
                self.params.insert(&format!("{pfx}/conv/b"), bias, false)?;
                let x = self.push(
                    group,
                    &format!("{group}/conv"),
                    LayerOp::Conv {
                        spec,
                        weight: format!("{pfx}/conv/w"),
                        bias: format!("{pfx}/conv/b"),
                    },
                    vec![x],
                )?;
                self.gap(group, &format!("{group}/gap"), x)
            }
            HeadVariant::C => {
                let x = self.gap(group, &format!("{group}/gap"), input)?;
                let mid = self.ch(64);
                let x = self.dense(
                    group,
                    &format!("{group}/dense1"),
                    &format!("{pfx}/dense1"),
                    mid,
                    Activation::Relu,
                    0.0,
                    x,
                    rng,
                )?;
                let x = self.dropout(group, &format!("{group}/dropout"), x)?;
                self.dense(
                    group,
                    &format!("{group}/dense2"),
                    &format!("{pfx}/dense2"),
                    1,
                    Activation::Linear,
                    EF_MID_INIT,
                    x,
                    rng,
                )
            }
        }
    }

    fn clip_shape(&self) -> Vec<usize> {
        vec![self.config.frames, self.config.height, self.config.width, 1]
    }

    fn diff_shape(&self) -> Vec<usize> {
        vec![self.config.frames - 1, self.config.height, self.config.width, 1]
    }

    fn build_i3d(&mut self, rng: &mut Prng, original: bool) -> Result<()> {
        let shape = self.clip_shape();
        let input = self.add_input("clip", shape);
        let mut x = self.i3d_mini_backbone("stem", "im3", "", "", input, false, rng)?;
        if original {
            x = self.inception("im4", "", "im4", x, IM4, false, rng)?;
            x = self.inception("im5", "", "im5", x, IM5, false, rng)?;
        }
        self.regression_head("head", "head", x, rng)?;
        Ok(())
    }

    fn build_two_stream(&mut self, rng: &mut Prng) -> Result<()> {
        let clip_shape = self.clip_shape();
        let diff_shape = self.diff_shape();
        let spatial = self.add_input("spatial", clip_shape);
        let temporal = self.add_input("temporal", diff_shape);
        let mut intermediates = Vec::new();
        for (name, input) in [("spatial", spatial), ("temporal", temporal)] {
            let group = format!("{name}_stream");
            let mut x = input;
            for (i, width) in [32usize, 64, 128].into_iter().enumerate() {
                x = self.conv_block(
                    &group,
                    &format!("{name}/conv{i}"),
                    &format!("{name}/conv{i}"),
                    [3, 3, 3],
                    self.ch(width),
                    x,
                    rng,
                )?;
                x = self.max_pool(
                    &group,
                    &format!("{name}/pool{i}"),
                    [2, 2, 2],
                    [2, 2, 2],
                    Padding::Valid,
                    x,
                )?;
            }
            let x = self.gap(&group, &format!("{name}/gap"), x)?;
            let x = self.dropout(&group, &format!("{name}/dropout"), x)?;
            let x = self.dense(
                &group,
                &format!("{name}/dense"),
                &format!("{name}/dense"),
                1,
                Activation::Linear,
                EF_MID_INIT,
                x,
                rng,
            )?;
            intermediates.push(x);
        }
        let cat = self.push("fusion", "fusion/concat", LayerOp::Concat { axis: 1 }, intermediates)?;
        self.fusion_dense("fusion", "fusion/dense", "fusion/dense", cat)?;
        Ok(())
    }

    fn build_combination(&mut self, rng: &mut Prng) -> Result<()> {
        let clip_shape = self.clip_shape();
        let diff_shape = self.diff_shape();
        let spatial = self.add_input("spatial", clip_shape);
        let temporal = self.add_input("temporal", diff_shape);
        let mut intermediates = Vec::new();
        for (name, input) in [("spatial", spatial), ("temporal", temporal)] {
            let features = self.i3d_mini_backbone(
                &format!("{name}_stem"),
                &format!("{name}_im3"),
                "",
                name,
                input,
                false,
                rng,
            )?;
            let group = format!("{name}_head");
            let x = self.gap(&group, &format!("{name}/gap"), features)?;
            let x = self.dropout(&group, &format!("{name}/dropout"), x)?;
            let x = self.dense(
                &group,
                &format!("{name}/dense"),
                &format!("{name}/dense"),
                1,
                Activation::Linear,
                EF_MID_INIT,
                x,
                rng,
            )?;
            intermediates.push(x);
        }
        let cat = self.push("fusion", "fusion/concat", LayerOp::Concat { axis: 1 }, intermediates)?;
        self.fusion_dense("fusion", "fusion/dense", "fusion/dense", cat)?;
        Ok(())
    }

    fn build_new_combination(&mut self, rng: &mut Prng) -> Result<()> {
        let clip_shape = self.clip_shape();
        let diff_shape = self.diff_shape();
        let spatial = self.add_input("spatial", clip_shape);
        let temporal = self.add_input("temporal", diff_shape);
        let mut features = Vec::new();
        for (name, input) in [("spatial", spatial), ("temporal", temporal)] {
            let maps = self.i3d_mini_backbone(
                &format!("{name}_stem"),
                &format!("{name}_im3"),
                "",
                name,
                input,
                false,
                rng,
            )?;
            // The two maps have different temporal extents (28 vs 27 frames),
            // so fusion happens on pooled features rather than raw maps.
            features.push(self.gap("head", &format!("head/gap_{name}"), maps)?);
        }
        let cat = self.push("head", "head/concat", LayerOp::Concat { axis: 1 }, features)?;
        let x = self.dropout("head", "head/dropout", cat)?;
        self.dense(
            "head",
            "head/dense",
            "head/dense",
            1,
            Activation::Linear,
            EF_MID_INIT,
            x,
            rng,
        )?;
        Ok(())
    }

    /// Dual-input fusion: one backbone parameter set serves both inputs.
    /// The full variant adds task-specific convolutions per path; the
    /// truncated variant fuses immediately after the shared backbone.
    fn build_dual_input(&mut self, rng: &mut Prng, truncated: bool) -> Result<()> {
        let clip_shape = self.clip_shape();
        let diff_shape = self.diff_shape();
        let spatial = self.add_input("spatial", clip_shape);
        let temporal = self.add_input("temporal", diff_shape);
        let mut pooled = Vec::new();
        for (sfx, name, input) in [("@s", "spatial", spatial), ("@t", "temporal", temporal)] {
            // Same param prefix across paths: the backbone is shared.
            let features =
                self.i3d_mini_backbone("stem", "im3", sfx, "backbone", input, false, rng)?;
            if truncated {
                pooled.push(self.gap("head", &format!("head/gap_{name}"), features)?);
            } else {
                let group = format!("{name}_task");
                let mut x = features;
                for i in 0..2 {
                    x = self.conv_block(
                        &group,
                        &format!("{name}/task{i}"),
                        &format!("{name}/task{i}"),
                        [3, 3, 3],
                        self.ch(128),
                        x,
                        rng,
                    )?;
                }
                pooled.push(self.gap(&group, &format!("{name}/gap"), x)?);
            }
        }
        let cat = self.push("head", "head/concat", LayerOp::Concat { axis: 1 }, pooled)?;
        let x = self.dropout("head", "head/dropout", cat)?;
        self.dense(
            "head",
            "head/dense",
            "head/dense",
            1,
            Activation::Linear,
            EF_MID_INIT,
            x,
            rng,
        )?;
        Ok(())
    }

    fn build_single_input(&mut self, rng: &mut Prng) -> Result<()> {
        let clip_shape = self.clip_shape();
        let input = self.add_input("clip", clip_shape);
        let features = self.i3d_mini_backbone("stem", "im3", "", "", input, false, rng)?;
        let channels = self.channels_of(features);
        let half = channels / 2;
        let splits = [
            ("stream_a", 0, half),
            ("stream_b", half, channels - half),
        ];
        let mut pooled = Vec::new();
        for (name, start, len) in splits {
            let mut x = self.push(
                "split",
                &format!("split/{name}"),
                LayerOp::SliceChannels { start, len },
                vec![features],
            )?;
            for i in 0..2 {
                x = self.conv_block(
                    name,
                    &format!("{name}/conv{i}"),
                    &format!("{name}/conv{i}"),
                    [3, 3, 3],
                    self.ch(128),
                    x,
                    rng,
                )?;
            }
            pooled.push(self.gap(name, &format!("{name}/gap"), x)?);
        }
        let cat = self.push("head", "head/concat", LayerOp::Concat { axis: 1 }, pooled)?;
        let x = self.dropout("head", "head/dropout", cat)?;
        self.dense(
            "head",
            "head/dense",
            "head/dense",
            1,
            Activation::Linear,
            EF_MID_INIT,
            x,
            rng,
        )?;
        Ok(())
    }

    fn build_cnn_rnn(&mut self, rng: &mut Prng) -> Result<()> {
        // Grayscale clips arrive triplicated to three channels.
        let shape = vec![self.config.frames, self.config.height, self.config.width, 3];
        let input = self.add_input("clip_rgb", shape);
        let folded = self.push("stem", "stem/fold", LayerOp::FoldFrames, vec![input])?;
        let features = self.i3d_mini_backbone("stem", "im3", "", "frame", folded, true, rng)?;
        let per_frame = self.gap("rnn", "rnn/gap", features)?;
        let seq = self.push(
            "rnn",
            "rnn/unfold",
            LayerOp::UnfoldFrames {
                frames: self.config.frames,
            },
            vec![per_frame],
        )?;
        let feature_dim = self.channels_of(seq);
        let hidden = self.ch(64);
        let cell = self.config.cell();
        let params = RecurrentParams::init(cell, feature_dim, hidden, rng);
        self.params.insert("rnn/w", params.w, true)?;
        self.params.insert("rnn/u", params.u, true)?;
        self.params.insert("rnn/b", params.b, false)?;
        let hidden_norm = if self.config.norm == NormMode::Mixed {
            self.params.insert("rnn/ln_g", Tensor::ones(&[hidden]), false)?;
            self.params.insert("rnn/ln_beta", Tensor::zeros(&[hidden]), false)?;
            Some(HiddenNorm {
                gamma: "rnn/ln_g".to_string(),
                beta: "rnn/ln_beta".to_string(),
                eps: 1e-5,
            })
        } else {
            None
        };
        let x = self.push(
            "rnn",
            "rnn/cell",
            LayerOp::Recurrent {
                cell,
                input_dim: feature_dim,
                hidden,
                w: "rnn/w".to_string(),
                u: "rnn/u".to_string(),
                b: "rnn/b".to_string(),
                hidden_norm,
            },
            vec![seq],
        )?;
        let x = self.dropout("head", "head/dropout", x)?;
        self.dense(
            "head",
            "head/dense",
            "head/dense",
            1,
            Activation::Linear,
            EF_MID_INIT,
            x,
            rng,
        )?;
        Ok(())
    }
}

/// Default head dropout rate by family.
pub fn default_dropout(family: Family) -> f64 {
    match family {
        Family::TwoStream => 0.05,
        Family::CnnRnnScratch => 0.4,
        _ => 0.5,
    }
}

impl Model {
    /// Override the rate of every dropout node (a training hyperparameter).
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        for node in &mut self.nodes {
            if let LayerOp::Dropout { rate: r } = &mut node.op {
                *r = rate;
            }
        }
        Ok(())
    }
}
