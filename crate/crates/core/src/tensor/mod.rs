//! Dense row-major tensors and the handful of kernels the training engine needs.
//!
//! Reductions always run in ascending index order so that results are
//! reproducible bit-for-bit between runs.

mod gemm;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use gemm::{gemm, MatRef};

/// Real element type. `f32` is the training default; `f64` backs gradient checks.
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn vector(data: &[T]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn matrix(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading dimension (batch size for activations).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all but the leading dimension.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    /// SHA-256 over the shape and the little-endian bytes of every element.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &self.data {
            h.update(v.f64().to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    fn view(&self) -> Result<MatRef<'_, T>> {
        if self.rank() != 2 {
            return Err(Error::Rank(format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok(MatRef::new(&self.data, self.shape[0], self.shape[1]))
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (av, bv) = (self.view()?, b.view()?);
        if av.cols != bv.rows {
            return Err(Error::dim(format!("matmul of {:?} by {:?}", self.shape, b.shape)));
        }
        let mut out = vec![T::zero(); av.rows * bv.cols];
        gemm(av, bv, &mut out, false);
        Tensor::new(vec![av.rows, bv.cols], out)
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_t(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (av, braw) = (self.view()?, b.view()?);
        if av.cols != braw.cols {
            return Err(Error::dim(format!(
                "matmul of {:?} by transpose of {:?}",
                self.shape, b.shape
            )));
        }
        let bv = MatRef::transposed(&b.data, braw.rows, braw.cols);
        let mut out = vec![T::zero(); av.rows * bv.cols];
        gemm(av, bv, &mut out, false);
        Tensor::new(vec![av.rows, bv.cols], out)
    }

    /// `a^T * b` without materialising the transpose.
    pub fn t_matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (araw, bv) = (self.view()?, b.view()?);
        if araw.rows != bv.rows {
            return Err(Error::dim(format!(
                "matmul of transpose of {:?} by {:?}",
                self.shape, b.shape
            )));
        }
        let av = MatRef::transposed(&self.data, araw.rows, araw.cols);
        let mut out = vec![T::zero(); av.rows * bv.cols];
        gemm(av, bv, &mut out, false);
        Tensor::new(vec![av.rows, bv.cols], out)
    }

    pub fn hadamard(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != b.shape {
            return Err(Error::dim(format!("hadamard of {:?} and {:?}", self.shape, b.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
        })
    }

    pub fn outer(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 1 || v.rank() != 1 {
            return Err(Error::Rank(format!(
                "outer product needs vectors, got {:?} and {:?}",
                self.shape, v.shape
            )));
        }
        let (n, m) = (self.len(), v.len());
        let mut data = Vec::with_capacity(n * m);
        for &u in &self.data {
            data.extend(v.data.iter().map(|&w| u * w));
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::Rank(format!("transpose needs a matrix, got {:?}", self.shape))),
        };
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], data)
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Tensor<T>, c: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("add of {:?} and {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Row-wise argmax, lowest index on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
