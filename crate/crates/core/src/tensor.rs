//! Dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a plain value: it owns its buffer and knows its shape.
//! Gradient bookkeeping lives on the [`Tape`](crate::autodiff::Tape), which
//! wraps tensors into recorded nodes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that
    /// the buffer length matches the shape. An empty shape is a scalar.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be nonempty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and small constructions.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new([rows.len(), cols], data).expect("nonempty rows")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("positive dims")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. entries from `Normal(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self::new(shape, data).expect("positive dims")
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("expected 2-D tensor", &self.shape, &[])),
        }
    }

    /// Splits a tensor of rank >= 1 into (leading rows, last dim).
    pub fn rows_last(&self) -> (usize, usize) {
        let last = self.shape.last().copied().unwrap_or(1);
        (self.numel() / last, last)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_last();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Self::new(shape, self.data.clone())
    }

    pub fn flatten(&self) -> Self {
        Self::vector(self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new([c, r], out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, p) = self.dims2()?;
        let (p2, q) = rhs.dims2()?;
        if p != p2 {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * q];
        gemm_nn(&self.data, &rhs.data, &mut out, m, p, q);
        Self::new([m, q], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::dim("elementwise", &self.shape, &rhs.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += rhs`; shapes must match exactly.
    pub fn add_assign(&mut self, rhs: &Tensor) {
        assert_eq!(self.shape, rhs.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN
    /// payloads.
    pub fn bit_eq(&self, rhs: &Tensor) -> bool {
        self.shape == rhs.shape
            && self
                .data
                .iter()
                .zip(&rhs.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out += a[m×p] · b[p×q]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let out_row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * q..(k + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a[m×p] · b[q×p]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let b_row = &b[j * p..(j + 1) * p];
            out[i * q + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[p×m]ᵀ · b[p×q]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for k in 0..p {
        let b_row = &b[k * q..(k + 1) * q];
        for i in 0..m {
            let aki = a[k * m + i];
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}
