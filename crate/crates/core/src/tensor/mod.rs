//! Dense row-major tensors and the reverse-mode gradient tape.
//!
//! Everything runs in one of two element types: `f32` is the default for
//! training and inference, `f64` is used by the finite-difference gradient
//! checks where single precision would drown the signal in rounding noise.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

pub mod optim;
pub mod tape;

pub use optim::{adamw_step, AdamwConfig, LrSchedule, ParamId, ParamStore};
pub use tape::{NodeId, Padding, Tape};
pub use optim::TapeBinding;

/// Element type of a tensor: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 conversion")
    }

    #[inline]
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense N-dimensional array, row-major, extents all ≥ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(
            shape.to_vec(),
            values.iter().map(|&v| S::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single element accessor for small-tensor tests and glue code.
    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Shape of the elementwise combination of `a` and `b`.
///
/// Shapes are right-aligned; each axis pair must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        let ea = if d < ndim - a.len() { 1 } else { a[d - (ndim - a.len())] };
        let eb = if d < ndim - b.len() { 1 } else { b[d - (ndim - b.len())] };
        if ea != eb && ea != 1 && eb != 1 {
            return Err(Error::shape(
                "broadcast",
                format!("{a:?} vs {b:?} on axis {d}"),
            ));
        }
        out[d] = ea.max(eb);
    }
    Ok(out)
}

/// Strides of `shape` viewed as `out_ndim`-dimensional with broadcast axes
/// given stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let own = strides(shape);
    let offset = ndim - shape.len();
    let mut s = vec![0usize; ndim];
    for d in 0..shape.len() {
        s[offset + d] = if shape[d] == 1 { 0 } else { own[d] };
    }
    s
}

/// Walk the broadcast output space, handing `f` the flat indices
/// `(out, a, b)` in row-major order.
pub(crate) fn zip_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; ndim];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..numel {
        f(flat, ia, ib);
        for d in (0..ndim).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[2, 4, 1]).unwrap(), vec![2, 4, 3]);
        assert_eq!(broadcast_shape(&[1], &[5, 2]).unwrap(), vec![5, 2]);
        assert!(broadcast_shape(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn zip_broadcast_indices() {
        // (2,1) x (1,3) -> (2,3)
        let mut seen = Vec::new();
        zip_broadcast(&[2, 1], &[1, 3], &[2, 3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![
                (0, 0, 0),
                (1, 0, 1),
                (2, 0, 2),
                (3, 1, 0),
                (4, 1, 1),
                (5, 1, 2)
            ]
        );
    }
}
