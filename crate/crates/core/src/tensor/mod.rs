//! Dense tensors, a reverse-mode tape, Adam, finite-difference checking and
//! the MSCL checkpoint format.

mod adam;
mod conv;
mod gradcheck;
pub mod mscl;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_fn, max_relative_error};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::{log_sigmoid_raw, relu_raw, sigmoid_raw, softmax_in_place};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output length of a convolution along one axis, `None` when the kernel
/// does not fit the padded input.
pub fn conv_out_len(k: usize, input: usize, stride: usize, pad: usize) -> Option<usize> {
    conv::ConvGeom::out_len(k, input, stride, pad)
}

/// Scalar element type: implemented for `f32` (training) and `f64`
/// (verification and reproducibility runs).
pub trait Float:
    num_traits::Float
    + Copy
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn cast(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense array. An empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor of shape {shape:?} at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs; finiteness is asserted in debug builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::cast(v)).collect())
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::contract("from_rows on empty row list"));
        }
        let d = rows[0].len();
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::dim("from_rows", &[d], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![n, d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of rows and the length of the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        rows_cols(&self.shape)
    }

    /// Slice of row `i` along the last axis.
    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the whole buffer, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&last, rest)) => (rest.iter().product(), last),
    }
}

/// Result of a cosine similarity with the degenerate-input flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine<T> {
    pub value: T,
    /// Set when either input has zero norm; `value` is then 0.
    pub degenerate: bool,
}

/// Cosine similarity of two equal-length vectors. Zero-norm inputs yield a
/// flagged 0 rather than NaN.
pub fn cosine_similarity<T: Float>(u: &[T], v: &[T]) -> Result<Cosine<T>> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::dim("cosine_similarity", &[u.len()], &[v.len()]));
    }
    Ok(cosine_raw(u, v))
}

#[inline]
pub(crate) fn cosine_raw<T: Float>(u: &[T], v: &[T]) -> Cosine<T> {
    let mut dot = T::zero();
    let mut nu = T::zero();
    let mut nv = T::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == T::zero() || nv == T::zero() {
        return Cosine {
            value: T::zero(),
            degenerate: true,
        };
    }
    let value = dot / (nu.sqrt() * nv.sqrt());
    Cosine {
        value: value.max(-T::one()).min(T::one()),
        degenerate: false,
    }
}

/// L2-normalizes a vector; a zero vector stays zero and is flagged.
pub fn l2_normalize<T: Float>(v: &[T]) -> (Vec<T>, bool) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm == T::zero() {
        (vec![T::zero(); v.len()], true)
    } else {
        (v.iter().map(|&x| x / norm).collect(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::<f32>::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(c.value, 1.0);
        let c = cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c.value, 0.0);
        let c = cosine_similarity(&[1.0f64, 2.0], &[2.0, 1.0]).unwrap();
        assert!((c.value - 0.8).abs() < 1e-12);
        let c = cosine_similarity(&[0.0f64, 0.0], &[0.0, 0.0]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
        assert!(cosine_similarity::<f64>(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn l2_normalize_flags_zero() {
        let (v, flag) = l2_normalize(&[3.0f64, 4.0]);
        assert!(!flag);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        let (v, flag) = l2_normalize(&[0.0f64; 3]);
        assert!(flag);
        assert_eq!(v, vec![0.0; 3]);
    }
}
