//! Dense row-major tensors.
//!
//! Image tensors use the channels-last layout `(batch, height, width, channels)`,
//! so the channel index varies fastest in memory. Operations return new tensors;
//! nothing here mutates its receiver.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

/// Ordered extents of a tensor, rank 1 to 4, every extent at least 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank must be between 1 and {MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent {pos} of {dims:?} is zero")));
        }
        Ok(Shape(dims.to_vec()))
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
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "shape {shape} holds {} elements but {} were given",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let data = vec![T::zero(); shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is already known to be valid.
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {} ({} elements) into {} ({} elements)",
                self.shape,
                self.shape.numel(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map_elementwise(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            let out = f(v);
            if !out.is_finite() {
                return Err(Error::Numeric(format!(
                    "element {i}: f({v}) = {out} is not finite"
                )));
            }
            data.push(out);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.as_matrix("left operand")?;
        let (k2, n) = rhs.as_matrix("right operand")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {} x {}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// Mean over the spatial axes of an `(n, h, w, c)` tensor, giving `(n, c)`.
    pub fn spatial_mean(&self) -> Result<Self> {
        let [n, h, w, c] = self.as_image("spatial_mean")?;
        let hw = h * w;
        let scale = T::one() / T::of(hw as f64);
        let mut out = vec![T::zero(); n * c];
        for (sample, acc) in self.data.chunks_exact(hw * c).zip(out.chunks_exact_mut(c)) {
            for pixel in sample.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(pixel) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * scale;
            }
        }
        Tensor::new(&[n, c], out)
    }

    pub(crate) fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match *self.dims() {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(format!(
                "{what} must be rank 2, got {}",
                self.shape
            ))),
        }
    }

    pub(crate) fn as_image(&self, what: &str) -> Result<[usize; 4]> {
        match *self.dims() {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(Error::shape(format!(
                "{what} expects a rank-4 (n,h,w,c) tensor, got {}",
                self.shape
            ))),
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, all row-major.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_at_b<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`.
pub(crate) fn gemm_a_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for (a_row, out_row) in a.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}
