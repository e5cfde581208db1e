//! Dense row-major tensors and the reverse-mode tape that differentiates them.
//!
//! A [`Tensor`] is a plain value: a [`Shape`] plus a flat buffer. Gradients
//! are not stored on the value itself; they live on the [`Tape`] node that
//! holds the tensor during a forward pass, so the same parameter values can
//! be replayed through many independent graphs.
//!
//! Feature maps use `[B, C, spatial...]` layout, where the spatial axes are
//! `[H, W]` for images and `[H, W, D]` for volumes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{central_difference, finite_diff_check, relative_error};
pub use tape::{BackwardCtx, Op, Tape, TensorRef, Var};

/// Floating-point element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
}

/// Ordered list of positive dimensions.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(Error::dim(format!("shape {dims:?} has a zero dimension")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::dim(format!("shape {dims:?} overflows the element count")))?;
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Product of the dimensions from `axis` onwards.
    pub fn stride_of(&self, axis: usize) -> usize {
        self.0[axis + 1..].iter().product()
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor({:?}, {:?})", self.shape, self.data)
        } else {
            write!(f, "Tensor({:?}, [{} values])", self.shape, self.data.len())
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = matrix_dims(self, "matmul lhs")?;
        let (k2, p) = matrix_dims(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * p];
        kernels::gemm(m, k, p, &self.data, false, &other.data, false, &mut out);
        Tensor::from_vec(vec![m, p], out)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = matrix_dims(self, "transpose")?;
        Tensor::from_vec(vec![n, m], kernels::transpose(&self.data, m, n))
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted first.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.rank() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for rank {}",
                self.shape.rank()
            )));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![T::zero(); self.data.len()];
        kernels::softmax(&self.data, &mut out, outer, len, inner);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

fn matrix_dims<T>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape.dims() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::dim(format!("{what} must be rank 2, got {other:?}"))),
    }
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let dims = shape.dims();
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}
