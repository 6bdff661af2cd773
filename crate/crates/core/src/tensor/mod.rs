//! Dense row-major tensors and the layer forward/backward kernels the
//! network is assembled from.
//!
//! Volumetric activations are laid out `[N, C, D, H, W]`. Every kernel comes
//! as an explicit forward/backward pair; forward returns a saved context
//! which the matching backward consumes.

mod batchnorm;
mod conv;
mod gradcheck;
pub mod layers;
mod ops;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use batchnorm::{batchnorm3d_backward, batchnorm3d_forward, BatchNormCtx, BN_EPS, BN_MOMENTUM};
pub use conv::{conv3d_backward, conv3d_forward, Conv3dCtx, ConvGrads};
pub use gradcheck::{gradcheck, GradcheckReport, Layer};
pub use ops::{
    add, add_backward, maxpool3d, maxpool3d_backward, mse_sum, mse_sum_backward, relu,
    relu_backward, upsample3d_backward, upsample3d_nearest, MaxPoolCtx, ReluCtx,
};
pub use params::{LayerParams, ParamId};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a tensor can hold: `f64` (wide) or `f32` (narrow).
pub trait Real:
    Float + Send + Sync + Debug + Default + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    /// Bytes per element in checkpoint blobs; doubles as the precision tag.
    const WIDTH: u8;
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn wide(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const WIDTH: u8 = 4;
    const NAME: &'static str = "narrow";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const WIDTH: u8 = 8;
    const NAME: &'static str = "wide";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense N-D array with an optional gradient buffer of identical length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Allocates (or resets) a zeroed gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.values.len()]),
        }
    }

    /// Borrow values and gradient together; allocates a zeroed gradient if missing.
    pub fn split_grad_mut(&mut self) -> (&mut [T], &mut [T]) {
        if self.grad.is_none() {
            self.zero_grad();
        }
        let grad = self.grad.as_deref_mut().unwrap();
        (&mut self.values, grad)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for (slot, &d) in idx.iter_mut().zip(&self.shape).rev() {
            *slot = flat % d;
            flat /= d;
        }
        idx
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.values[self.offset(index)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.wide())).collect(),
            grad: None,
        }
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Shape as `[N, C, D, H, W]`; a 4-D tensor is read as a batch of one.
    pub(crate) fn dims5(&self, what: &str) -> Result<[usize; 5]> {
        match *self.shape.as_slice() {
            [n, c, d, h, w] => Ok([n, c, d, h, w]),
            [c, d, h, w] => Ok([1, c, d, h, w]),
            _ => Err(Error::dim(format!(
                "{what}: expected a 4-D or 5-D volume, got shape {:?}",
                self.shape
            ))),
        }
    }
}
