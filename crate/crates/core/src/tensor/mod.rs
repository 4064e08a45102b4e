//! Dense row-major tensors and the elementwise/linear-algebra/reduction
//! primitives the rest of the crate builds on. Values are f64 throughout;
//! single precision only appears at file-format boundaries.

pub mod conv;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
mod matmul;

pub use conv::{Conv3dGeom, Padding, PoolGeom, PoolKind};
pub use geometry::{conv_output_extent, ConvGeometry};

use crate::error::{Error, Result};

/// Dense N-dimensional real array. Immutable by convention once built: ops
/// return fresh tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Validating constructor: extents positive, length matches, values finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::DataLength {
                expected: numel,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("Tensor::from_vec (value {bad})"),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op results whose inputs were already checked.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new_unchecked(shape.to_vec(), vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new_unchecked(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new_unchecked(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new_unchecked(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarRoot {
                shape: self.shape.clone(),
            })
        }
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: shape,
                context: "reshape",
            });
        }
        Ok(Tensor::new_unchecked(shape, self.data.clone()))
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context,
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, context)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::new_unchecked(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    /// 2D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context: "matmul",
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul::matmul_acc(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor::new_unchecked(vec![m, n], out))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.numel() as f64
    }

    pub fn max_all(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// Reduction over one axis; the axis is removed from the shape (a rank-1
    /// input reduces to a scalar of shape [1]).
    fn reduce_axis(&self, axis: usize, init: f64, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_axis(axis)?;
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d = f(*d, v);
                }
            }
        }
        Ok(Tensor::new_unchecked(out_shape, out))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, 0.0, |a, b| a + b)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let extent = *self.shape.get(axis).ok_or(Error::InvalidAxis {
            axis,
            rank: self.rank(),
        })? as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / extent))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, f64::NEG_INFINITY, f64::max)
    }

    /// Concatenate along an existing axis; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyInput("concat parts"))?;
        first.check_axis(axis)?;
        let rank = first.rank();
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                    context: "concat rank",
                });
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != first.shape[d] {
                    return Err(Error::ShapeMismatch {
                        left: first.shape.clone(),
                        right: p.shape.clone(),
                        context: "concat extents",
                    });
                }
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                let base = o * chunk;
                out.extend_from_slice(&p.data[base..base + chunk]);
            }
        }
        Ok(Tensor::new_unchecked(out_shape, out))
    }

    /// Copy of the sub-tensor covering `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        if start + len > self.shape[axis] || len == 0 {
            return Err(Error::InvalidConfig(format!(
                "slice [{start}, {}) exceeds extent {} on axis {axis}",
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor::new_unchecked(out_shape, out))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared L2 norm of the raw values.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(vec![3], vec![-3.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_is_idempotent() {
        let mut rng = crate::rng::Prng::new(1, crate::rng::Stream::Init);
        let x = Tensor::from_fn(&[4, 5], |_| rng.normal());
        let once = x.relu();
        assert_eq!(once.relu(), once);
    }

    #[test]
    fn matmul_identity_preserves_matrix() {
        let mut rng = crate::rng::Prng::new(2, crate::rng::Stream::Init);
        let a = Tensor::from_fn(&[4, 4], |_| rng.normal());
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let prod = a.matmul(&eye).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn sum_axis_counts_columns() {
        let x = Tensor::ones(&[2, 3]);
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_sums_axis_extents_and_preserves_rest() {
        let a = Tensor::ones(&[2, 3, 4]);
        let b = Tensor::full(&[2, 5, 4], 2.0);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8, 4]);
        // First block of each outer row comes from a, second from b.
        assert_eq!(c.data()[0], 1.0);
        assert_eq!(c.data()[3 * 4], 2.0);
    }

    #[test]
    fn slice_then_concat_roundtrips() {
        let mut rng = crate::rng::Prng::new(3, crate::rng::Stream::Init);
        let x = Tensor::from_fn(&[3, 7, 2], |_| rng.normal());
        let a = x.slice_axis(1, 0, 3).unwrap();
        let b = x.slice_axis(1, 3, 4).unwrap();
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 2]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn invalid_axis_rejected() {
        let x = Tensor::ones(&[2, 2]);
        assert!(matches!(x.sum_axis(2), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ops_are_referentially_transparent() {
        let mut rng = crate::rng::Prng::new(4, crate::rng::Stream::Init);
        let a = Tensor::from_fn(&[8, 8], |_| rng.normal());
        let b = Tensor::from_fn(&[8, 8], |_| rng.normal());
        let first = a.matmul(&b).unwrap();
        let second = a.matmul(&b).unwrap();
        assert_eq!(first, second);
        assert_eq!(a.sigmoid(), a.sigmoid());
    }
}
