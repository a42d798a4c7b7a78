//! Dense row-major tensors over `f32` (training, inference) or `f64`
//! (gradient checking).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type the engine computes in.
pub trait Real:
    Float
    + FloatConst
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array. Every dimension is at least 1 and the buffer
/// length equals the product of the shape. Scalars have shape `[1]`.
///
/// Tensors carry no gradient state; tracking happens through
/// [`Var`](crate::tape::Var) handles on a [`Tape`](crate::tape::Tape).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor", "rank must be at least 1"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("dimension {axis} of {shape:?} is zero")));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = numel_of(&shape);
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        debug_assert_eq!(numel_of(&shape), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = numel_of(&shape);
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let data = (0..numel_of(&shape)).map(f).collect();
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("tensor {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Sequential left-to-right sum.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("shapes differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Requires an exact rank and returns the dims.
    pub fn dims<const R: usize>(&self, op: &'static str) -> Result<[usize; R]> {
        <[usize; R]>::try_from(self.shape.as_slice()).map_err(|_| {
            Error::shape(op, format!("expected rank {R}, got shape {:?}", self.shape))
        })
    }

    pub fn to_bits_le(&self) -> Vec<u8>
    where
        T: ToLeBytes,
    {
        let mut out = Vec::with_capacity(self.data.len() * std::mem::size_of::<T>());
        for &x in &self.data {
            x.extend_le(&mut out);
        }
        out
    }
}

/// Little-endian serialization for the supported scalar types.
pub trait ToLeBytes: Copy {
    fn extend_le(self, out: &mut Vec<u8>);
}

impl ToLeBytes for f32 {
    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl ToLeBytes for f64 {
    fn extend_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Splits `shape` around `axis` into `(outer, size, inner)` strides so a
/// tensor can be viewed as `[outer, size, inner]`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
