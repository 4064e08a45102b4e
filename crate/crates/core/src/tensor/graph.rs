//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Forward values are computed eagerly as ops are recorded; `backward` walks
//! the tape once in reverse. Graphs are cheap to build and are rebuilt for
//! every training step, so no retain/free bookkeeping is needed.

use super::conv::{
    conv3d_backward, conv3d_forward, pool3d_backward, pool3d_forward, Conv3dGeom, PoolGeom,
    PoolKind,
};
use super::matmul::{matmul_at_acc, matmul_bt_acc};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Per-feature batch statistics produced by a training-mode batch norm;
/// the layer that owns the running statistics consumes them.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// tensor + scalar-node broadcast
    AddScalar(NodeId, NodeId),
    /// tensor * scalar-node broadcast
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Matmul(NodeId, NodeId),
    /// (m,n) matrix + (n,) row vector
    AddBias(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    MaxAll(NodeId),
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    SliceAxis {
        parent: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: Conv3dGeom,
    },
    Pool {
        input: NodeId,
        geom: PoolGeom,
        kind: PoolKind,
    },
    GlobalAvgPool(NodeId),
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient map produced by `Graph::backward`. Every leaf recorded before the
/// root has an entry; leaves the root does not depend on hold zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() == self.value(b).shape() {
            let v = self.value(a).sub(self.value(b))?;
            return Ok(self.push(Op::Sub(a, b), v));
        }
        let nb = self.neg(b);
        self.binary_broadcast(a, nb, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let v = va.mul(vb)?;
            Ok(self.push(Op::Mul(a, b), v))
        } else if vb.is_scalar() {
            let v = va.scale(vb.data()[0]);
            Ok(self.push(Op::MulScalar(a, b), v))
        } else if va.is_scalar() {
            let v = vb.scale(va.data()[0]);
            Ok(self.push(Op::MulScalar(b, a), v))
        } else {
            Err(Error::ShapeMismatch {
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
                context: "graph mul",
            })
        }
    }

    fn binary_broadcast(&mut self, a: NodeId, b: NodeId, context: &'static str) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let v = va.add(vb)?;
            Ok(self.push(Op::Add(a, b), v))
        } else if vb.is_scalar() {
            let v = va.add_scalar(vb.data()[0]);
            Ok(self.push(Op::AddScalar(a, b), v))
        } else if va.is_scalar() {
            let v = vb.add_scalar(va.data()[0]);
            Ok(self.push(Op::AddScalar(b, a), v))
        } else {
            Err(Error::ShapeMismatch {
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
                context,
            })
        }
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).add_scalar(c);
        self.push(Op::AddConst(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).scale(-1.0);
        self.push(Op::Neg(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sigmoid();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.rank() != 1 || vx.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
                context: "add_bias",
            });
        }
        let n = vb.shape()[0];
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let v = Tensor::new_unchecked(vx.shape().to_vec(), data);
        Ok(self.push(Op::AddBias(x, bias), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_all());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean_all());
        self.push(Op::MeanAll(a), v)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a).sum_axis(axis)?;
        Ok(self.push(Op::SumAxis(a, axis), v))
    }

    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).max_all());
        self.push(Op::MaxAll(a), v)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            v,
        ))
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(
            Op::SliceAxis {
                parent: a,
                axis,
                start,
                len,
            },
            v,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: Conv3dGeom,
    ) -> Result<NodeId> {
        let v = conv3d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        Ok(self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            v,
        ))
    }

    pub fn pool3d(&mut self, input: NodeId, geom: PoolGeom, kind: PoolKind) -> Result<NodeId> {
        let v = pool3d_forward(self.value(input), &geom, kind);
        Ok(self.push(Op::Pool { input, geom, kind }, v))
    }

    /// (N, d1, ..., dk, C) -> (N, C): mean over all interior axes.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape();
        if shape.len() < 3 {
            return Err(Error::InvalidGeometry(format!(
                "global_avg_pool needs rank >= 3, got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[shape.len() - 1]);
        let spatial: usize = shape[1..shape.len() - 1].iter().product();
        let data = self.value(input).data();
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let base = s * spatial * c;
            let dst = &mut out[s * c..(s + 1) * c];
            for p in 0..spatial {
                let src = &data[base + p * c..base + (p + 1) * c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            let inv = 1.0 / spatial as f64;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let v = Tensor::new_unchecked(vec![n, c], out);
        Ok(self.push(Op::GlobalAvgPool(input), v))
    }

    /// Training-mode batch normalization over the last axis (per feature,
    /// population variance). Returns the node plus the batch statistics so
    /// the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let (mean, var) = feature_stats(self.value(x))?;
        self.check_norm_params(x, gamma, beta)?;
        let v = normalize_by_feature(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let id = self.push(
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
            v,
        );
        Ok((id, stats))
    }

    /// Inference-mode batch normalization with frozen statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<NodeId> {
        self.check_norm_params(x, gamma, beta)?;
        let features = last_extent(self.value(x));
        if mean.len() != features || var.len() != features {
            return Err(Error::ShapeMismatch {
                left: vec![features],
                right: vec![mean.len()],
                context: "batch_norm running stats",
            });
        }
        let v = normalize_by_feature(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps);
        Ok(self.push(
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
            v,
        ))
    }

    /// Per-sample normalization over all non-batch axes; affine parameters
    /// are per feature (last axis).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_norm_params(x, gamma, beta)?;
        let v = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v))
    }

    fn check_norm_params(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<()> {
        let features = last_extent(self.value(x));
        for p in [gamma, beta] {
            let v = self.value(p);
            if v.rank() != 1 || v.shape()[0] != features {
                return Err(Error::ShapeMismatch {
                    left: vec![features],
                    right: v.shape().to_vec(),
                    context: "norm affine parameters",
                });
            }
        }
        Ok(())
    }

    /// Inverted dropout with a caller-supplied mask of {0, 1/(1-rate)} values.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(Error::DataLength {
                expected: vx.numel(),
                got: mask.len(),
            });
        }
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new_unchecked(vx.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { x, mask }, v))
    }

    /// Reverse pass from a scalar root. Returns the adjoint of every node the
    /// root depends on; leaves outside the root's history get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(dy) = adj[id].take() else { continue };
            self.pull_back(id, &dy, &mut adj);
            adj[id] = Some(dy);
        }

        // Untouched leaves get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && adj[i].is_none() {
                adj[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: adj })
    }

    fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut adj[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn pull_back(&self, id: usize, dy: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(adj, *a, dy.clone());
                Self::accumulate(adj, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(adj, *a, dy.clone());
                Self::accumulate(adj, *b, dy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                Self::accumulate(adj, *a, dy.mul(self.value(*b)).expect("recorded shapes"));
                Self::accumulate(adj, *b, dy.mul(self.value(*a)).expect("recorded shapes"));
            }
            Op::AddScalar(t, s) => {
                Self::accumulate(adj, *t, dy.clone());
                Self::accumulate(adj, *s, Tensor::scalar(dy.sum_all()));
            }
            Op::MulScalar(t, s) => {
                let sv = self.value(*s).data()[0];
                Self::accumulate(adj, *t, dy.scale(sv));
                let dot: f64 = dy
                    .data()
                    .iter()
                    .zip(self.value(*t).data())
                    .map(|(&g, &x)| g * x)
                    .sum();
                Self::accumulate(adj, *s, Tensor::scalar(dot));
            }
            Op::Scale(a, c) => Self::accumulate(adj, *a, dy.scale(*c)),
            Op::AddConst(a) => Self::accumulate(adj, *a, dy.clone()),
            Op::Neg(a) => Self::accumulate(adj, *a, dy.scale(-1.0)),
            Op::Abs(a) => {
                let d = zip_map(dy, self.value(*a), |g, x| g * sign(x));
                Self::accumulate(adj, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(dy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                Self::accumulate(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(dy, &node.value, |g, y| g * y * (1.0 - y));
                Self::accumulate(adj, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(dy, &node.value, |g, y| g * (1.0 - y * y));
                Self::accumulate(adj, *a, d);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_bt_acc(dy.data(), vb.data(), m, n, k, &mut da);
                Self::accumulate(adj, *a, Tensor::new_unchecked(vec![m, k], da));
                let mut db = vec![0.0; k * n];
                matmul_at_acc(va.data(), dy.data(), m, k, n, &mut db);
                Self::accumulate(adj, *b, Tensor::new_unchecked(vec![k, n], db));
            }
            Op::AddBias(x, bias) => {
                Self::accumulate(adj, *x, dy.clone());
                let n = self.value(*bias).shape()[0];
                let mut db = vec![0.0; n];
                for row in dy.data().chunks(n) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                Self::accumulate(adj, *bias, Tensor::new_unchecked(vec![n], db));
            }
            Op::SumAll(a) => {
                let g = dy.data()[0];
                Self::accumulate(adj, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let g = dy.data()[0] / va.numel() as f64;
                Self::accumulate(adj, *a, Tensor::full(va.shape(), g));
            }
            Op::SumAxis(a, axis) => {
                let va = self.value(*a);
                let extent = va.shape()[*axis];
                let inner: usize = va.shape()[axis + 1..].iter().product();
                let outer: usize = va.shape()[..*axis].iter().product();
                let mut d = vec![0.0; va.numel()];
                for o in 0..outer {
                    let src = &dy.data()[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let dst = &mut d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (dd, &g) in dst.iter_mut().zip(src) {
                            *dd += g;
                        }
                    }
                }
                Self::accumulate(adj, *a, Tensor::new_unchecked(va.shape().to_vec(), d));
            }
            Op::MaxAll(a) => {
                let va = self.value(*a);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (i, &v) in va.data().iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                let mut d = Tensor::zeros(va.shape());
                d.data_mut()[best_i] = dy.data()[0];
                Self::accumulate(adj, *a, d);
            }
            Op::Concat { axis, parts } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let piece = dy
                        .slice_axis(*axis, start, len)
                        .expect("concat adjoint split");
                    Self::accumulate(adj, p, piece);
                    start += len;
                }
            }
            Op::SliceAxis {
                parent,
                axis,
                start,
                len,
            } => {
                let vp = self.value(*parent);
                let extent = vp.shape()[*axis];
                let inner: usize = vp.shape()[axis + 1..].iter().product();
                let outer: usize = vp.shape()[..*axis].iter().product();
                let mut d = vec![0.0; vp.numel()];
                for o in 0..outer {
                    let src = &dy.data()[o * len * inner..(o + 1) * len * inner];
                    let dst_base = (o * extent + start) * inner;
                    for (dd, &g) in d[dst_base..dst_base + len * inner].iter_mut().zip(src) {
                        *dd += g;
                    }
                }
                Self::accumulate(adj, *parent, Tensor::new_unchecked(vp.shape().to_vec(), d));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = dy.reshape(shape).expect("reshape adjoint");
                Self::accumulate(adj, *a, d);
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (d_in, d_w, d_b) =
                    conv3d_backward(self.value(*input), self.value(*weight), dy, geom);
                Self::accumulate(adj, *input, d_in);
                Self::accumulate(adj, *weight, d_w);
                Self::accumulate(adj, *bias, d_b);
            }
            Op::Pool { input, geom, kind } => {
                let d_in = pool3d_backward(self.value(*input), dy, geom, *kind);
                Self::accumulate(adj, *input, d_in);
            }
            Op::GlobalAvgPool(input) => {
                let vi = self.value(*input);
                let shape = vi.shape();
                let (n, c) = (shape[0], shape[shape.len() - 1]);
                let spatial: usize = shape[1..shape.len() - 1].iter().product();
                let inv = 1.0 / spatial as f64;
                let mut d = vec![0.0; vi.numel()];
                for s in 0..n {
                    let grad = &dy.data()[s * c..(s + 1) * c];
                    let base = s * spatial * c;
                    for p in 0..spatial {
                        let dst = &mut d[base + p * c..base + (p + 1) * c];
                        for (dd, &g) in dst.iter_mut().zip(grad) {
                            *dd += g * inv;
                        }
                    }
                }
                Self::accumulate(adj, *input, Tensor::new_unchecked(shape.to_vec(), d));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let (dx, dg, db) =
                    batch_norm_backward(self.value(*x), self.value(*gamma), dy, mean, var, *eps);
                Self::accumulate(adj, *x, dx);
                Self::accumulate(adj, *gamma, dg);
                Self::accumulate(adj, *beta, db);
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let vx = self.value(*x);
                let c = last_extent(vx);
                let vg = self.value(*gamma).data();
                let mut dx = vec![0.0; vx.numel()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (i, (&g, &xv)) in dy.data().iter().zip(vx.data()).enumerate() {
                    let f = i % c;
                    let sigma = (var[f] + eps).sqrt();
                    let xhat = (xv - mean[f]) / sigma;
                    dx[i] = g * vg[f] / sigma;
                    dg[f] += g * xhat;
                    db[f] += g;
                }
                Self::accumulate(adj, *x, Tensor::new_unchecked(vx.shape().to_vec(), dx));
                Self::accumulate(adj, *gamma, Tensor::new_unchecked(vec![c], dg));
                Self::accumulate(adj, *beta, Tensor::new_unchecked(vec![c], db));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (dx, dg, db) = layer_norm_backward(self.value(*x), self.value(*gamma), dy, *eps);
                Self::accumulate(adj, *x, dx);
                Self::accumulate(adj, *gamma, dg);
                Self::accumulate(adj, *beta, db);
            }
            Op::Dropout { x, mask } => {
                let d = Tensor::new_unchecked(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                );
                Self::accumulate(adj, *x, d);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new_unchecked(a.shape().to_vec(), data)
}

fn last_extent(t: &Tensor) -> usize {
    *t.shape().last().expect("rank >= 1")
}

/// Per-feature (last axis) mean and population variance.
fn feature_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rank() < 2 {
        return Err(Error::InvalidGeometry(format!(
            "batch norm input must have rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let c = last_extent(x);
    let rows = x.numel() / c;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *vv += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    Ok((mean, var))
}

fn normalize_by_feature(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Tensor {
    let c = last_extent(x);
    let inv_sigma: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let g = gamma.data();
    let b = beta.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = i % c;
            g[f] * (v - mean[f]) * inv_sigma[f] + b[f]
        })
        .collect();
    Tensor::new_unchecked(x.shape().to_vec(), data)
}

fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let c = last_extent(x);
    let rows = x.numel() / c;
    let inv_sigma: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (row_x, row_dy) in x.data().chunks(c).zip(dy.data().chunks(c)) {
        for f in 0..c {
            let xhat = (row_x[f] - mean[f]) * inv_sigma[f];
            sum_dy[f] += row_dy[f];
            sum_dy_xhat[f] += row_dy[f] * xhat;
        }
    }
    let n = rows as f64;
    let g = gamma.data();
    let mut dx = vec![0.0; x.numel()];
    for (i, (&xv, &gv)) in x.data().iter().zip(dy.data()).enumerate() {
        let f = i % c;
        let xhat = (xv - mean[f]) * inv_sigma[f];
        dx[i] = g[f] * inv_sigma[f] * (gv - sum_dy[f] / n - xhat * sum_dy_xhat[f] / n);
    }
    (
        Tensor::new_unchecked(x.shape().to_vec(), dx),
        Tensor::new_unchecked(vec![c], sum_dy_xhat),
        Tensor::new_unchecked(vec![c], sum_dy),
    )
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = last_extent(x);
    let batch = x.shape()[0];
    let per_sample = x.numel() / batch;
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; x.numel()];
    for s in 0..batch {
        let xs = &x.data()[s * per_sample..(s + 1) * per_sample];
        let mean = xs.iter().sum::<f64>() / per_sample as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / per_sample as f64;
        let inv_sigma = 1.0 / (var + eps).sqrt();
        let dst = &mut out[s * per_sample..(s + 1) * per_sample];
        for (j, (d, &v)) in dst.iter_mut().zip(xs).enumerate() {
            let f = j % c;
            *d = g[f] * (v - mean) * inv_sigma + b[f];
        }
    }
    Tensor::new_unchecked(x.shape().to_vec(), out)
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, dy: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let c = last_extent(x);
    let batch = x.shape()[0];
    let per_sample = x.numel() / batch;
    let g = gamma.data();
    let mut dx = vec![0.0; x.numel()];
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for s in 0..batch {
        let xs = &x.data()[s * per_sample..(s + 1) * per_sample];
        let dys = &dy.data()[s * per_sample..(s + 1) * per_sample];
        let mean = xs.iter().sum::<f64>() / per_sample as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / per_sample as f64;
        let inv_sigma = 1.0 / (var + eps).sqrt();
        let m = per_sample as f64;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for (j, (&xv, &gv)) in xs.iter().zip(dys).enumerate() {
            let f = j % c;
            let xhat = (xv - mean) * inv_sigma;
            let dxhat = gv * g[f];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[f] += gv * xhat;
            db[f] += gv;
        }
        let dst = &mut dx[s * per_sample..(s + 1) * per_sample];
        for (j, (d, &xv)) in dst.iter_mut().zip(xs).enumerate() {
            let f = j % c;
            let xhat = (xv - mean) * inv_sigma;
            let dxhat = dys[j] * g[f];
            *d = inv_sigma * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
        }
    }
    (
        Tensor::new_unchecked(x.shape().to_vec(), dx),
        Tensor::new_unchecked(vec![c], dg),
        Tensor::new_unchecked(vec![c], db),
    )
}
