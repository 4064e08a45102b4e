//! GRU and LSTM cells, sequence unrolling, and per-frame model application.
//!
//! Gate weights are fused: `w` maps the input to all gate pre-activations,
//! `u` maps the previous hidden state likewise, `b` is the fused bias. Gate
//! column order is [z, r, candidate] for GRU and [i, f, candidate, o] for
//! LSTM; the LSTM forget-gate bias block is initialized to 1.

use serde::{Deserialize, Serialize};

use super::he_normal;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RnnCell {
    Gru,
    Lstm,
}

impl RnnCell {
    pub fn gates(self) -> usize {
        match self {
            RnnCell::Gru => 3,
            RnnCell::Lstm => 4,
        }
    }
}

/// Fused parameter tensors for one recurrent layer.
#[derive(Debug, Clone)]
pub struct RecurrentParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl RecurrentParams {
    pub fn init(cell: RnnCell, input_dim: usize, hidden: usize, rng: &mut Prng) -> Self {
        let gates = cell.gates();
        let w = he_normal(rng, &[input_dim, gates * hidden], input_dim);
        let u = he_normal(rng, &[hidden, gates * hidden], hidden);
        let mut b = Tensor::zeros(&[gates * hidden]);
        if cell == RnnCell::Lstm {
            // Forget gate open at the start of training.
            for v in &mut b.data_mut()[hidden..2 * hidden] {
                *v = 1.0;
            }
        }
        RecurrentParams { w, u, b }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.u.numel() + self.b.numel()
    }
}

/// Graph-side recurrent state: hidden activation plus the LSTM cell state.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub hidden: NodeId,
    pub cell: Option<NodeId>,
}

impl RecurrentState {
    pub fn zeros(g: &mut Graph, cell_kind: RnnCell, batch: usize, hidden: usize) -> Self {
        let h = g.leaf(Tensor::zeros(&[batch, hidden]));
        let c = match cell_kind {
            RnnCell::Gru => None,
            RnnCell::Lstm => Some(g.leaf(Tensor::zeros(&[batch, hidden]))),
        };
        RecurrentState { hidden: h, cell: c }
    }
}

fn check_step_shapes(
    g: &Graph,
    x_t: NodeId,
    state: &RecurrentState,
    w: NodeId,
    u: NodeId,
    b: NodeId,
    gates: usize,
) -> Result<(usize, usize)> {
    let xs = g.value(x_t).shape();
    let hs = g.value(state.hidden).shape();
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
        return Err(Error::ShapeMismatch {
            left: xs.to_vec(),
            right: hs.to_vec(),
            context: "recurrent step input/state",
        });
    }
    let (input_dim, hidden) = (xs[1], hs[1]);
    let want_w = vec![input_dim, gates * hidden];
    let want_u = vec![hidden, gates * hidden];
    let want_b = vec![gates * hidden];
    if g.value(w).shape() != want_w.as_slice() {
        return Err(Error::ShapeMismatch {
            left: want_w,
            right: g.value(w).shape().to_vec(),
            context: "recurrent input weights",
        });
    }
    if g.value(u).shape() != want_u.as_slice() {
        return Err(Error::ShapeMismatch {
            left: want_u,
            right: g.value(u).shape().to_vec(),
            context: "recurrent state weights",
        });
    }
    if g.value(b).shape() != want_b.as_slice() {
        return Err(Error::ShapeMismatch {
            left: want_b,
            right: g.value(b).shape().to_vec(),
            context: "recurrent bias",
        });
    }
    Ok((input_dim, hidden))
}

/// One recurrent step with standard gate equations.
///
/// GRU: z,r sigmoid gates; candidate tanh with r-gated state;
///      a_t = (1-z) * a_{t-1} + z * candidate.
/// LSTM: i,f,o sigmoid gates; c_t = f*c_{t-1} + i*tanh(candidate);
///       a_t = o * tanh(c_t).
pub fn recurrent_step(
    g: &mut Graph,
    cell: RnnCell,
    x_t: NodeId,
    state: RecurrentState,
    w: NodeId,
    u: NodeId,
    b: NodeId,
) -> Result<RecurrentState> {
    let (_, hidden) = check_step_shapes(g, x_t, &state, w, u, b, cell.gates())?;
    let a_prev = state.hidden;
    // Input contribution for all gates at once.
    let gx = g.matmul(x_t, w)?;
    let gx = g.add_bias(gx, b)?;
    match cell {
        RnnCell::Gru => {
            // z and r share one state product; the candidate gets the r-gated state.
            let u_zr = g.slice_axis(u, 1, 0, 2 * hidden)?;
            let u_h = g.slice_axis(u, 1, 2 * hidden, hidden)?;
            let ga_zr = g.matmul(a_prev, u_zr)?;
            let gx_zr = g.slice_axis(gx, 1, 0, 2 * hidden)?;
            let zr_pre = g.add(gx_zr, ga_zr)?;
            let z = {
                let pre = g.slice_axis(zr_pre, 1, 0, hidden)?;
                g.sigmoid(pre)
            };
            let r = {
                let pre = g.slice_axis(zr_pre, 1, hidden, hidden)?;
                g.sigmoid(pre)
            };
            let gated = g.mul(r, a_prev)?;
            let ga_h = g.matmul(gated, u_h)?;
            let gx_h = g.slice_axis(gx, 1, 2 * hidden, hidden)?;
            let h_pre = g.add(gx_h, ga_h)?;
            let candidate = g.tanh(h_pre);
            // a_t = a_prev - z*a_prev + z*candidate
            let za = g.mul(z, a_prev)?;
            let zc = g.mul(z, candidate)?;
            let keep = g.sub(a_prev, za)?;
            let a_t = g.add(keep, zc)?;
            Ok(RecurrentState {
                hidden: a_t,
                cell: None,
            })
        }
        RnnCell::Lstm => {
            let c_prev = state.cell.ok_or(Error::InvalidConfig(
                "LSTM step requires a cell state".to_string(),
            ))?;
            let ga = g.matmul(a_prev, u)?;
            let pre = g.add(gx, ga)?;
            let i = {
                let p = g.slice_axis(pre, 1, 0, hidden)?;
                g.sigmoid(p)
            };
            let f = {
                let p = g.slice_axis(pre, 1, hidden, hidden)?;
                g.sigmoid(p)
            };
            let candidate = {
                let p = g.slice_axis(pre, 1, 2 * hidden, hidden)?;
                g.tanh(p)
            };
            let o = {
                let p = g.slice_axis(pre, 1, 3 * hidden, hidden)?;
                g.sigmoid(p)
            };
            let fc = g.mul(f, c_prev)?;
            let ic = g.mul(i, candidate)?;
            let c_t = g.add(fc, ic)?;
            let tc = g.tanh(c_t);
            let a_t = g.mul(o, tc)?;
            Ok(RecurrentState {
                hidden: a_t,
                cell: Some(c_t),
            })
        }
    }
}

/// Unroll a (N, T, D) sequence and return the final hidden state (N, H).
/// `hidden_norm` optionally layer-normalizes the hidden state after each
/// step (gamma, beta, eps).
#[allow(clippy::too_many_arguments)]
pub fn run_sequence(
    g: &mut Graph,
    cell: RnnCell,
    seq: NodeId,
    w: NodeId,
    u: NodeId,
    b: NodeId,
    hidden: usize,
    hidden_norm: Option<(NodeId, NodeId, f64)>,
) -> Result<NodeId> {
    let shape = g.value(seq).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: vec![0, 0, 0],
            context: "run_sequence expects (N,T,D)",
        });
    }
    let (batch, steps, dim) = (shape[0], shape[1], shape[2]);
    let mut state = RecurrentState::zeros(g, cell, batch, hidden);
    for t in 0..steps {
        let x_t = g.slice_axis(seq, 1, t, 1)?;
        let x_t = g.reshape(x_t, vec![batch, dim])?;
        state = recurrent_step(g, cell, x_t, state, w, u, b)?;
        if let Some((gamma, beta, eps)) = hidden_norm {
            state.hidden = g.layer_norm(state.hidden, gamma, beta, eps)?;
        }
    }
    Ok(state.hidden)
}

/// Apply a frame model to every frame of a clip and stack the results:
/// (N, T, H, W, C) -> (N, T, D), looping over the T axis with one shared
/// parameter set (whatever leaves `frame_model` closes over).
pub fn apply_per_frame(
    g: &mut Graph,
    clip: NodeId,
    frame_model: &mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let shape = g.value(clip).shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: vec![0; 5],
            context: "apply_per_frame expects (N,T,H,W,C)",
        });
    }
    let (batch, steps) = (shape[0], shape[1]);
    let frame_shape = vec![batch, shape[2], shape[3], shape[4]];
    let mut outputs = Vec::with_capacity(steps);
    let mut feature_dim = None;
    for t in 0..steps {
        let frame = g.slice_axis(clip, 1, t, 1)?;
        let frame = g.reshape(frame, frame_shape.clone())?;
        let feat = frame_model(g, frame)?;
        let fs = g.value(feat).shape().to_vec();
        if fs.len() != 2 || fs[0] != batch {
            return Err(Error::ShapeMismatch {
                left: fs,
                right: vec![batch, 0],
                context: "frame model must map (N,H,W,C) to (N,D)",
            });
        }
        if let Some(d) = feature_dim {
            if d != fs[1] {
                return Err(Error::ShapeMismatch {
                    left: vec![batch, d],
                    right: fs,
                    context: "frame feature width changed across frames",
                });
            }
        } else {
            feature_dim = Some(fs[1]);
        }
        let widened = g.reshape(feat, vec![batch, 1, fs[1]])?;
        outputs.push(widened);
    }
    g.concat(&outputs, 1)
}
