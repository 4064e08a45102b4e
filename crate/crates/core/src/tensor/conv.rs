//! 3D cross-correlation and pooling kernels over channels-last volumes
//! (batch, T, H, W, C). Convolution goes through blocked im2col so the heavy
//! lifting is a matrix product; backward rebuilds the patch matrix instead of
//! caching it. Samples are processed in parallel with per-sample accumulation
//! buffers summed in index order, so results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matmul::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ConvGeometry, Tensor};
use crate::error::{Error, Result};

/// Padding policy along the three spatiotemporal axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Fully resolved 3D convolution geometry for one (input, weight) pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_dims: [usize; 3],
    pub in_ch: usize,
    pub kernel: [usize; 3],
    pub out_ch: usize,
    pub stride: [usize; 3],
    pub pad_start: [usize; 3],
    pub pad_end: [usize; 3],
    pub out_dims: [usize; 3],
}

impl Conv3dGeom {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if input_shape.len() != 5 {
            return Err(Error::InvalidGeometry(format!(
                "conv3d input must be rank 5 (N,T,H,W,C), got {input_shape:?}"
            )));
        }
        if weight_shape.len() != 5 {
            return Err(Error::InvalidGeometry(format!(
                "conv3d weight must be rank 5 (kT,kH,kW,C,K), got {weight_shape:?}"
            )));
        }
        let in_ch = input_shape[4];
        if weight_shape[3] != in_ch {
            return Err(Error::ChannelMismatch {
                expected: weight_shape[3],
                got: in_ch,
            });
        }
        let kernel = [weight_shape[0], weight_shape[1], weight_shape[2]];
        let in_dims = [input_shape[1], input_shape[2], input_shape[3]];
        let mut pad_start = [0; 3];
        let mut pad_end = [0; 3];
        let mut out_dims = [0; 3];
        for ax in 0..3 {
            let g = match padding {
                Padding::Same => ConvGeometry::same(in_dims[ax], kernel[ax], stride[ax])?,
                Padding::Valid => ConvGeometry::valid(in_dims[ax], kernel[ax], stride[ax])?,
            };
            pad_start[ax] = g.pad_start;
            pad_end[ax] = g.pad_end;
            out_dims[ax] = g.output;
        }
        Ok(Conv3dGeom {
            batch: input_shape[0],
            in_dims,
            in_ch,
            kernel,
            out_ch: weight_shape[4],
            stride,
            pad_start,
            pad_end,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
            self.out_ch,
        ]
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_ch
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn in_sample_len(&self) -> usize {
        self.in_dims.iter().product::<usize>() * self.in_ch
    }
}

/// Rows of the patch matrix materialized per block; bounds working memory.
fn rows_per_block(patch_len: usize) -> usize {
    ((1 << 20) / patch_len.max(1)).clamp(64, 1 << 15)
}

/// Fill `patch` (rows x patch_len) with the im2col rows for output positions
/// [row0, row0+rows) of one sample. Out-of-bounds taps stay zero.
fn im2col_block(sample: &[f64], g: &Conv3dGeom, row0: usize, rows: usize, patch: &mut [f64]) {
    let [kt, kh, kw] = g.kernel;
    let [ot_n, oh_n, ow_n] = g.out_dims;
    let [it_n, ih_n, iw_n] = g.in_dims;
    let c = g.in_ch;
    let plen = g.patch_len();
    patch[..rows * plen].fill(0.0);
    for r in 0..rows {
        let m = row0 + r;
        let ow = m % ow_n;
        let oh = (m / ow_n) % oh_n;
        let ot = m / (ow_n * oh_n);
        debug_assert!(ot < ot_n);
        let row = &mut patch[r * plen..(r + 1) * plen];
        for dt in 0..kt {
            let it = (ot * g.stride[0] + dt) as isize - g.pad_start[0] as isize;
            if it < 0 || it as usize >= it_n {
                continue;
            }
            for dh in 0..kh {
                let ih = (oh * g.stride[1] + dh) as isize - g.pad_start[1] as isize;
                if ih < 0 || ih as usize >= ih_n {
                    continue;
                }
                // Valid tap range along W: the (iw, c) run is contiguous.
                let iw0 = ow * g.stride[2];
                let (dw_lo, dw_hi) = w_tap_range(iw0, g.pad_start[2], kw, iw_n);
                if dw_lo >= dw_hi {
                    continue;
                }
                let iw_lo = iw0 + dw_lo - g.pad_start[2];
                let src_base = ((it as usize * ih_n + ih as usize) * iw_n + iw_lo) * c;
                let dst_base = ((dt * kh + dh) * kw + dw_lo) * c;
                let len = (dw_hi - dw_lo) * c;
                row[dst_base..dst_base + len]
                    .copy_from_slice(&sample[src_base..src_base + len]);
            }
        }
    }
}

/// Scatter-add of an im2col block back into the input gradient.
fn col2im_block(patch: &[f64], g: &Conv3dGeom, row0: usize, rows: usize, d_sample: &mut [f64]) {
    let [kt, kh, kw] = g.kernel;
    let [_, oh_n, ow_n] = g.out_dims;
    let [it_n, ih_n, iw_n] = g.in_dims;
    let c = g.in_ch;
    let plen = g.patch_len();
    for r in 0..rows {
        let m = row0 + r;
        let ow = m % ow_n;
        let oh = (m / ow_n) % oh_n;
        let ot = m / (ow_n * oh_n);
        let row = &patch[r * plen..(r + 1) * plen];
        for dt in 0..kt {
            let it = (ot * g.stride[0] + dt) as isize - g.pad_start[0] as isize;
            if it < 0 || it as usize >= it_n {
                continue;
            }
            for dh in 0..kh {
                let ih = (oh * g.stride[1] + dh) as isize - g.pad_start[1] as isize;
                if ih < 0 || ih as usize >= ih_n {
                    continue;
                }
                let iw0 = ow * g.stride[2];
                let (dw_lo, dw_hi) = w_tap_range(iw0, g.pad_start[2], kw, iw_n);
                if dw_lo >= dw_hi {
                    continue;
                }
                let iw_lo = iw0 + dw_lo - g.pad_start[2];
                let dst_base = ((it as usize * ih_n + ih as usize) * iw_n + iw_lo) * c;
                let src_base = ((dt * kh + dh) * kw + dw_lo) * c;
                let len = (dw_hi - dw_lo) * c;
                for (d, &s) in d_sample[dst_base..dst_base + len]
                    .iter_mut()
                    .zip(&row[src_base..src_base + len])
                {
                    *d += s;
                }
            }
        }
    }
}

#[inline]
fn w_tap_range(iw0: usize, pad_start: usize, kw: usize, iw_n: usize) -> (usize, usize) {
    let dw_lo = pad_start.saturating_sub(iw0);
    let dw_hi = (iw_n + pad_start - iw0).min(kw);
    (dw_lo, dw_hi)
}

pub(crate) fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: &Conv3dGeom,
) -> Tensor {
    let positions = g.positions();
    let plen = g.patch_len();
    let k = g.out_ch;
    let in_len = g.in_sample_len();
    let out_len = positions * k;
    let block = rows_per_block(plen);

    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(out_s, in_s)| {
            let mut patch = vec![0.0; block * plen];
            // Seed every output row with the bias, then accumulate the product.
            for row in out_s.chunks_mut(k) {
                row.copy_from_slice(bias.data());
            }
            let mut row0 = 0;
            while row0 < positions {
                let rows = block.min(positions - row0);
                im2col_block(in_s, g, row0, rows, &mut patch);
                matmul_acc(
                    &patch[..rows * plen],
                    weight.data(),
                    rows,
                    plen,
                    k,
                    &mut out_s[row0 * k..(row0 + rows) * k],
                );
                row0 += rows;
            }
        });
    Tensor::new_unchecked(g.out_shape(), out)
}

pub(crate) fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
    g: &Conv3dGeom,
) -> (Tensor, Tensor, Tensor) {
    let positions = g.positions();
    let plen = g.patch_len();
    let k = g.out_ch;
    let in_len = g.in_sample_len();
    let out_len = positions * k;
    let block = rows_per_block(plen);

    let mut d_input = vec![0.0; input.numel()];
    // Per-sample weight/bias gradients, reduced in sample order afterwards.
    let mut partials: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(g.batch);
    d_input
        .par_chunks_mut(in_len)
        .zip(input.data().par_chunks(in_len))
        .zip(d_out.data().par_chunks(out_len))
        .map(|((d_in_s, in_s), d_out_s)| {
            let mut d_w = vec![0.0; plen * k];
            let mut d_b = vec![0.0; k];
            let mut patch = vec![0.0; block * plen];
            let mut d_patch = vec![0.0; block * plen];
            for row in d_out_s.chunks(k) {
                for (b, &v) in d_b.iter_mut().zip(row) {
                    *b += v;
                }
            }
            let mut row0 = 0;
            while row0 < positions {
                let rows = block.min(positions - row0);
                let d_out_block = &d_out_s[row0 * k..(row0 + rows) * k];
                im2col_block(in_s, g, row0, rows, &mut patch);
                matmul_at_acc(&patch[..rows * plen], d_out_block, rows, plen, k, &mut d_w);
                d_patch[..rows * plen].fill(0.0);
                matmul_bt_acc(
                    d_out_block,
                    weight.data(),
                    rows,
                    k,
                    plen,
                    &mut d_patch[..rows * plen],
                );
                col2im_block(&d_patch, g, row0, rows, d_in_s);
                row0 += rows;
            }
            (d_w, d_b)
        })
        .collect_into_vec(&mut partials);

    let mut d_weight = vec![0.0; plen * k];
    let mut d_bias = vec![0.0; k];
    for (d_w, d_b) in &partials {
        for (a, &b) in d_weight.iter_mut().zip(d_w) {
            *a += b;
        }
        for (a, &b) in d_bias.iter_mut().zip(d_b) {
            *a += b;
        }
    }
    (
        Tensor::new_unchecked(input.shape().to_vec(), d_input),
        Tensor::new_unchecked(weight.shape().to_vec(), d_weight),
        Tensor::new_unchecked(vec![g.out_ch], d_bias),
    )
}

/// Pooling geometry is the convolution geometry without channels mixing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub in_dims: [usize; 3],
    pub ch: usize,
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub pad_start: [usize; 3],
    pub out_dims: [usize; 3],
}

impl PoolGeom {
    pub fn resolve(
        input_shape: &[usize],
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if input_shape.len() != 5 {
            return Err(Error::InvalidGeometry(format!(
                "pool3d input must be rank 5 (N,T,H,W,C), got {input_shape:?}"
            )));
        }
        let in_dims = [input_shape[1], input_shape[2], input_shape[3]];
        let mut pad_start = [0; 3];
        let mut out_dims = [0; 3];
        for ax in 0..3 {
            let g = match padding {
                Padding::Same => ConvGeometry::same(in_dims[ax], window[ax], stride[ax])?,
                Padding::Valid => ConvGeometry::valid(in_dims[ax], window[ax], stride[ax])?,
            };
            pad_start[ax] = g.pad_start;
            out_dims[ax] = g.output;
        }
        Ok(PoolGeom {
            batch: input_shape[0],
            in_dims,
            ch: input_shape[4],
            window,
            stride,
            pad_start,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
            self.ch,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Iterate in-bounds window cells for one output position, in scan order.
fn window_cells(g: &PoolGeom, ot: usize, oh: usize, ow: usize) -> impl Iterator<Item = usize> + '_ {
    let [it_n, ih_n, iw_n] = g.in_dims;
    let t0 = (ot * g.stride[0]) as isize - g.pad_start[0] as isize;
    let h0 = (oh * g.stride[1]) as isize - g.pad_start[1] as isize;
    let w0 = (ow * g.stride[2]) as isize - g.pad_start[2] as isize;
    (0..g.window[0]).flat_map(move |dt| {
        let it = t0 + dt as isize;
        (0..g.window[1]).flat_map(move |dh| {
            let ih = h0 + dh as isize;
            (0..g.window[2]).filter_map(move |dw| {
                let iw = w0 + dw as isize;
                if it < 0
                    || ih < 0
                    || iw < 0
                    || it as usize >= it_n
                    || ih as usize >= ih_n
                    || iw as usize >= iw_n
                {
                    None
                } else {
                    Some((it as usize * ih_n + ih as usize) * iw_n + iw as usize)
                }
            })
        })
    })
}

pub(crate) fn pool3d_forward(input: &Tensor, g: &PoolGeom, kind: PoolKind) -> Tensor {
    let c = g.ch;
    let in_len = g.in_dims.iter().product::<usize>() * c;
    let positions: usize = g.out_dims.iter().product();
    let out_len = positions * c;
    let mut out = vec![0.0; g.batch * out_len];
    for (out_s, in_s) in out.chunks_mut(out_len).zip(input.data().chunks(in_len)) {
        let mut m = 0;
        for ot in 0..g.out_dims[0] {
            for oh in 0..g.out_dims[1] {
                for ow in 0..g.out_dims[2] {
                    let dst = &mut out_s[m * c..(m + 1) * c];
                    match kind {
                        PoolKind::Max => {
                            dst.fill(f64::NEG_INFINITY);
                            for cell in window_cells(g, ot, oh, ow) {
                                let src = &in_s[cell * c..cell * c + c];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    if s > *d {
                                        *d = s;
                                    }
                                }
                            }
                        }
                        PoolKind::Avg => {
                            let mut count = 0usize;
                            for cell in window_cells(g, ot, oh, ow) {
                                count += 1;
                                let src = &in_s[cell * c..cell * c + c];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            let inv = 1.0 / count as f64;
                            for d in dst.iter_mut() {
                                *d *= inv;
                            }
                        }
                    }
                    m += 1;
                }
            }
        }
    }
    Tensor::new_unchecked(g.out_shape(), out)
}

pub(crate) fn pool3d_backward(
    input: &Tensor,
    d_out: &Tensor,
    g: &PoolGeom,
    kind: PoolKind,
) -> Tensor {
    let c = g.ch;
    let in_len = g.in_dims.iter().product::<usize>() * c;
    let positions: usize = g.out_dims.iter().product();
    let out_len = positions * c;
    let mut d_input = vec![0.0; input.numel()];
    for ((d_in_s, in_s), d_out_s) in d_input
        .chunks_mut(in_len)
        .zip(input.data().chunks(in_len))
        .zip(d_out.data().chunks(out_len))
    {
        let mut m = 0;
        for ot in 0..g.out_dims[0] {
            for oh in 0..g.out_dims[1] {
                for ow in 0..g.out_dims[2] {
                    let grad = &d_out_s[m * c..(m + 1) * c];
                    match kind {
                        PoolKind::Max => {
                            // Route to the first occurrence of the max, scan order.
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_cell = None;
                                for cell in window_cells(g, ot, oh, ow) {
                                    let v = in_s[cell * c + ch];
                                    if v > best {
                                        best = v;
                                        best_cell = Some(cell);
                                    }
                                }
                                if let Some(cell) = best_cell {
                                    d_in_s[cell * c + ch] += grad[ch];
                                }
                            }
                        }
                        PoolKind::Avg => {
                            let count = window_cells(g, ot, oh, ow).count();
                            let inv = 1.0 / count as f64;
                            for cell in window_cells(g, ot, oh, ow) {
                                let dst = &mut d_in_s[cell * c..cell * c + c];
                                for (d, &v) in dst.iter_mut().zip(grad) {
                                    *d += v * inv;
                                }
                            }
                        }
                    }
                    m += 1;
                }
            }
        }
    }
    Tensor::new_unchecked(input.shape().to_vec(), d_input)
}
