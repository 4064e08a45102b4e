//! Executable model representation: a flat DAG of named layer nodes over a
//! shared parameter set. Parameter sharing (fusion backbones, per-frame CNNs)
//! falls out of layers referencing parameters by name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{
    avg_pool3d, batch_norm_forward, conv3d_forward, dense_forward, dropout_forward,
    global_avg_pool, layer_norm_forward, max_pool3d, run_sequence, Activation, ConvSpec,
    DropoutSpec, Mode, NormKind, NormSpec, NormState, RnnCell,
};
use crate::rng::Prng;
use crate::tensor::conv::Padding;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Where a node reads its operand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortRef {
    Input(usize),
    Node(usize),
}

/// Declared per-sample input shape (batch axis excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Optional layer norm applied to recurrent hidden states after each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PoolAlgo {
    Max,
    Avg,
}

/// One graph node. Parameters are referenced by name into the model's
/// parameter set, so two nodes naming the same weights share them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Conv {
        spec: ConvSpec,
        weight: String,
        bias: String,
    },
    Norm {
        kind: NormKind,
        features: usize,
        eps: f64,
        momentum: f64,
        gamma: String,
        beta: String,
        state: String,
    },
    Relu,
    Pool {
        algo: PoolAlgo,
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weight: String,
        bias: String,
    },
    Dropout {
        rate: f64,
    },
    Concat {
        axis: usize,
    },
    /// Split along the channel (last) axis.
    SliceChannels {
        start: usize,
        len: usize,
    },
    /// (N,T,H,W,C) -> (N*T, 1, H, W, C): frames become batch entries so the
    /// per-frame CNN runs once, exactly like a time-distributed wrapper.
    FoldFrames,
    /// (N*T, D) -> (N, T, D)
    UnfoldFrames {
        frames: usize,
    },
    Recurrent {
        cell: RnnCell,
        input_dim: usize,
        hidden: usize,
        w: String,
        u: String,
        b: String,
        hidden_norm: Option<HiddenNorm>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelNode {
    pub name: String,
    /// Block label ("stem", "im3", "head", ...) used for structural queries.
    pub group: String,
    pub op: LayerOp,
    pub inputs: Vec<PortRef>,
}

/// A named parameter tensor. `regularizable` marks weights that L1/L2
/// penalties apply to (conv/dense kernels, not biases or norm affines).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub regularizable: bool,
}

/// Ordered, name-indexed parameter store. Insertion order is build order and
/// therefore deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn insert(&mut self, name: &str, value: Tensor, regularizable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!(
                "duplicate parameter name: {name}"
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            regularizable,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter: {name}")))?;
        Ok(&mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Result of one forward pass: the live tape, the output node, and the graph
/// ids of every parameter leaf (for gradient lookup).
pub struct ForwardResult {
    pub graph: Graph,
    pub output: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub input_nodes: Vec<NodeId>,
}

/// A built model: layer DAG, parameters, and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub inputs: Vec<InputSpec>,
    pub nodes: Vec<ModelNode>,
    pub params: ParamSet,
    pub norm_states: BTreeMap<String, NormState>,
}

impl Model {
    /// Number of scalar parameters (shared tensors counted once).
    pub fn count_params(&self) -> usize {
        self.params.total_elements()
    }

    /// Ordered unique block labels.
    pub fn block_names(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for node in &self.nodes {
            if seen.last() != Some(&node.group) && !seen.contains(&node.group) {
                seen.push(node.group.clone());
            }
        }
        seen
    }

    /// Expected batched input shapes for a given batch size.
    pub fn batched_input_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        self.inputs
            .iter()
            .map(|spec| {
                let mut s = vec![batch];
                s.extend_from_slice(&spec.shape);
                s
            })
            .collect()
    }

    /// Evaluate the graph on a batch. Training mode activates dropout and
    /// batch statistics (and refreshes running estimates); any non-finite
    /// activation aborts with the offending node named.
    pub fn forward(&mut self, batch: &[Tensor], mode: Mode, rng: &mut Prng) -> Result<ForwardResult> {
        if batch.len() != self.inputs.len() {
            return Err(Error::InvalidConfig(format!(
                "model declares {} inputs, got {}",
                self.inputs.len(),
                batch.len()
            )));
        }
        let batch_size = batch
            .first()
            .map(|t| t.shape()[0])
            .ok_or(Error::EmptyInput("forward batch"))?;
        for (tensor, spec) in batch.iter().zip(&self.inputs) {
            let mut want = vec![batch_size];
            want.extend_from_slice(&spec.shape);
            if tensor.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: want,
                    right: tensor.shape().to_vec(),
                    context: "declared model input",
                });
            }
        }

        let mut graph = Graph::new();
        let mut param_nodes = BTreeMap::new();
        for p in self.params.iter() {
            param_nodes.insert(p.name.clone(), graph.leaf(p.value.clone()));
        }
        let input_nodes: Vec<NodeId> = batch.iter().map(|t| graph.leaf(t.clone())).collect();

        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let operands: Vec<NodeId> = node
                .inputs
                .iter()
                .map(|port| match port {
                    PortRef::Input(i) => input_nodes[*i],
                    PortRef::Node(i) => outputs[*i],
                })
                .collect();
            let out = apply_op(
                &mut graph,
                &node.op,
                &operands,
                &param_nodes,
                &mut self.norm_states,
                mode,
                rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    location: format!("node {}", node.name),
                },
                other => other,
            })?;
            if !graph.value(out).all_finite() {
                return Err(Error::NonFinite {
                    location: format!("node {}", node.name),
                });
            }
            outputs.push(out);
        }

        let output = *outputs.last().ok_or(Error::EmptyInput("model nodes"))?;
        let out_shape = graph.value(output).shape();
        if out_shape != [batch_size, 1] {
            return Err(Error::ShapeMismatch {
                left: vec![batch_size, 1],
                right: out_shape.to_vec(),
                context: "regression output",
            });
        }
        Ok(ForwardResult {
            graph,
            output,
            param_nodes,
            input_nodes,
        })
    }

    /// Shape propagation without touching data: per-node output shapes for a
    /// hypothetical batch size.
    pub fn propagate_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let input_shapes = self.batched_input_shapes(batch);
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let operand_shapes: Vec<Vec<usize>> = node
                .inputs
                .iter()
                .map(|port| match port {
                    PortRef::Input(i) => input_shapes[*i].clone(),
                    PortRef::Node(i) => shapes[*i].clone(),
                })
                .collect();
            shapes.push(op_out_shape(&node.op, &operand_shapes)?);
        }
        Ok(shapes)
    }

    /// Output shape of the last node in `group`, per shape propagation.
    pub fn group_output_shape(&self, group: &str, batch: usize) -> Result<Vec<usize>> {
        let shapes = self.propagate_shapes(batch)?;
        let idx = self
            .nodes
            .iter()
            .rposition(|n| n.group == group)
            .ok_or_else(|| Error::InvalidConfig(format!("no node group named {group}")))?;
        Ok(shapes[idx].clone())
    }
}

fn apply_op(
    g: &mut Graph,
    op: &LayerOp,
    operands: &[NodeId],
    param_nodes: &BTreeMap<String, NodeId>,
    norm_states: &mut BTreeMap<String, NormState>,
    mode: Mode,
    rng: &mut Prng,
) -> Result<NodeId> {
    let one = |what: &str| -> Result<NodeId> {
        operands
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("{what} node missing its input")))
    };
    let param = |name: &str| -> Result<NodeId> {
        param_nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter: {name}")))
    };
    match op {
        LayerOp::Conv { spec, weight, bias } => {
            conv3d_forward(g, one("conv")?, param(weight)?, param(bias)?, spec)
        }
        LayerOp::Norm {
            kind,
            features,
            eps,
            momentum,
            gamma,
            beta,
            state,
        } => {
            let x = one("norm")?;
            let spec = NormSpec {
                kind: *kind,
                features: *features,
                eps: *eps,
                momentum: *momentum,
            };
            match kind {
                NormKind::Batch => {
                    let st = norm_states
                        .get_mut(state)
                        .ok_or_else(|| Error::InvalidConfig(format!("unknown norm state: {state}")))?;
                    batch_norm_forward(g, x, param(gamma)?, param(beta)?, &spec, st, mode)
                }
                NormKind::Layer => layer_norm_forward(g, x, param(gamma)?, param(beta)?, &spec),
            }
        }
        LayerOp::Relu => Ok(g.relu(one("relu")?)),
        LayerOp::Pool {
            algo,
            window,
            stride,
            padding,
        } => {
            let x = one("pool")?;
            match algo {
                PoolAlgo::Max => max_pool3d(g, x, *window, *stride, *padding),
                PoolAlgo::Avg => avg_pool3d(g, x, *window, *stride, *padding),
            }
        }
        LayerOp::GlobalAvgPool => global_avg_pool(g, one("gap")?),
        LayerOp::Flatten => {
            let x = one("flatten")?;
            let shape = g.value(x).shape().to_vec();
            let flat: usize = shape[1..].iter().product();
            g.reshape(x, vec![shape[0], flat])
        }
        LayerOp::Dense {
            activation,
            weight,
            bias,
            ..
        } => dense_forward(g, one("dense")?, param(weight)?, param(bias)?, *activation),
        LayerOp::Dropout { rate } => dropout_forward(
            g,
            one("dropout")?,
            DropoutSpec::new(*rate)?,
            mode,
            rng,
        ),
        LayerOp::Concat { axis } => g.concat(operands, *axis),
        LayerOp::SliceChannels { start, len } => {
            let x = one("slice")?;
            let axis = g.value(x).rank() - 1;
            g.slice_axis(x, axis, *start, *len)
        }
        LayerOp::FoldFrames => {
            let x = one("fold")?;
            let s = g.value(x).shape().to_vec();
            g.reshape(x, vec![s[0] * s[1], 1, s[2], s[3], s[4]])
        }
        LayerOp::UnfoldFrames { frames } => {
            let x = one("unfold")?;
            let s = g.value(x).shape().to_vec();
            g.reshape(x, vec![s[0] / frames, *frames, s[1]])
        }
        LayerOp::Recurrent {
            cell,
            hidden,
            w,
            u,
            b,
            hidden_norm,
            ..
        } => {
            let seq = one("recurrent")?;
            let norm = match hidden_norm {
                Some(h) => Some((param(&h.gamma)?, param(&h.beta)?, h.eps)),
                None => None,
            };
            run_sequence(g, *cell, seq, param(w)?, param(u)?, param(b)?, *hidden, norm)
        }
    }
}

pub(crate) fn op_out_shape(op: &LayerOp, operands: &[Vec<usize>]) -> Result<Vec<usize>> {
    let one = || -> Result<&Vec<usize>> {
        operands
            .first()
            .ok_or_else(|| Error::InvalidConfig("shape propagation: missing operand".into()))
    };
    Ok(match op {
        LayerOp::Conv { spec, .. } => spec.out_shape(one()?)?,
        LayerOp::Norm { .. } | LayerOp::Relu | LayerOp::Dropout { .. } => one()?.clone(),
        LayerOp::Pool {
            window,
            stride,
            padding,
            ..
        } => crate::tensor::conv::PoolGeom::resolve(one()?, *window, *stride, *padding)?.out_shape(),
        LayerOp::GlobalAvgPool => {
            let s = one()?;
            vec![s[0], *s.last().expect("rank >= 1")]
        }
        LayerOp::Flatten => {
            let s = one()?;
            vec![s[0], s[1..].iter().product()]
        }
        LayerOp::Dense { in_dim, out_dim, .. } => {
            let s = one()?;
            if s.len() != 2 || s[1] != *in_dim {
                return Err(Error::ShapeMismatch {
                    left: vec![s[0], *in_dim],
                    right: s.clone(),
                    context: "dense input",
                });
            }
            vec![s[0], *out_dim]
        }
        LayerOp::Concat { axis } => {
            let first = one()?;
            let mut out = first.clone();
            out[*axis] = operands.iter().map(|s| s[*axis]).sum();
            out
        }
        LayerOp::SliceChannels { len, .. } => {
            let mut s = one()?.clone();
            *s.last_mut().expect("rank >= 1") = *len;
            s
        }
        LayerOp::FoldFrames => {
            let s = one()?;
            vec![s[0] * s[1], 1, s[2], s[3], s[4]]
        }
        LayerOp::UnfoldFrames { frames } => {
            let s = one()?;
            vec![s[0] / frames, *frames, s[1]]
        }
        LayerOp::Recurrent { hidden, .. } => {
            let s = one()?;
            vec![s[0], *hidden]
        }
    })
}
