//! Dense row-major tensors and the scalar abstraction.
//!
//! Every numeric carrier in the lab is a [`Tensor`] over a [`Real`] scalar.
//! Two instantiations are supported: `f64` ("wide", used by all oracle and
//! property tests) and `f32` ("standard", used for experiments).

use std::fmt;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{FlError, Result};

/// Numeric precision of a scalar type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// ~64-bit floating point.
    Wide,
    /// ~32-bit floating point.
    Standard,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Wide => write!(f, "wide"),
            Precision::Standard => write!(f, "standard"),
        }
    }
}

/// Scalar trait implemented by `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn wide(self) -> f64;

    /// Uniform sample in `[lo, hi)`.
    fn sample_uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self;

    /// Standard normal sample.
    fn sample_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Wide;

    fn of(x: f64) -> Self {
        x
    }

    fn wide(self) -> f64 {
        self
    }

    fn sample_uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }

    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Standard;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn wide(self) -> f64 {
        self as f64
    }

    fn sample_uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }

    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Dense n-dimensional array of real values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor, checking that `data.len()` equals the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(FlError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// First dimension, conventionally the batch size.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Reinterprets the tensor under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(FlError::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies the rows at `indices` into a new tensor (first axis gather).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(FlError::Shape("gather_rows on rank-0 tensor".into()));
        }
        let row_len: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(FlError::Shape(format!(
                    "row index {} out of range {}",
                    i, self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(FlError::Structure(format!(
                "tensor shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Element-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: F) -> Result<Self> {
        self.check_congruent(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + scale * b)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, F::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, -F::one())
    }

    pub fn scaled(&self, scale: F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * scale).collect(),
        }
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, other: &Self, scale: F) -> Result<()> {
        self.check_congruent(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Squared Euclidean norm, accumulated in wide precision.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.wide() * v.wide()).sum()
    }

    /// Largest absolute element-wise difference, in wide precision.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.wide() - b.wide()).abs())
            .fold(0.0_f64, f64::max)
    }

    /// Converts every element through `f64` into another scalar type.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.wide())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, FlError::Shape(_)));
    }

    #[test]
    fn add_scaled_is_elementwise() {
        let a = Tensor::new(vec![2], vec![1.0_f64, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0_f64, 20.0]).unwrap();
        let c = a.add_scaled(&b, 0.5).unwrap();
        assert_eq!(c.data(), &[6.0, 12.0]);
    }

    #[test]
    fn incongruent_shapes_rejected() {
        let a = Tensor::<f64>::zeros(vec![2, 2]);
        let b = Tensor::<f64>::zeros(vec![4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn gather_rows_picks_rows() {
        let t = Tensor::new(vec![3, 2], vec![0.0_f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
