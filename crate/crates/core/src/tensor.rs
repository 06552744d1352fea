//! Dense row-major `f64` tensors.
//!
//! Only the handful of kernels the toy transformer needs live here: matrix
//! products, row softmax, layer normalization and a few elementwise helpers.
//! There are no strided views; a transpose always materializes a new buffer.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats stored contiguously in row-major
/// order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(&[1])
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Columns `start..start + width` of a matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert!(start + width <= c);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor {
            shape: vec![r, width],
            data: out,
        }
    }

    /// Rows `start..start + count` of a matrix.
    pub fn row_slice(&self, start: usize, count: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        }
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(parts: &[Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::Shape("hconcat of nothing".into()))?
            .rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::Shape("hconcat: row counts differ".into()));
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data: out,
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vconcat(parts: &[Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::Shape("vconcat of nothing".into()))?
            .cols();
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(Error::Shape("vconcat: column counts differ".into()));
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) {
        let c = self.cols();
        assert_eq!(c, v.len(), "row vector length mismatch");
        for row in self.data.chunks_exact_mut(c) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Raw GEMM `c += a · b` over row-major operands described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    // SAFETY: every caller passes buffers whose extents cover m×k, k×n and
    // m×n under the given strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (n as isize, 1),
        &mut c.data,
    );
    Ok(c)
}

/// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul_bt lhs")?;
    let (n, k2) = b.expect_matrix("matmul_bt rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_bt: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        &a.data,
        (k as isize, 1),
        &b.data,
        (1, k as isize),
        &mut c.data,
    );
    Ok(c)
}

/// `a[k×m]ᵀ · b[k×n]` without materializing the transpose.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut c = Tensor::zeros(&[a.cols(), b.cols()]);
    matmul_at_acc(a, b, &mut c)?;
    Ok(c)
}

/// Accumulating form of [`matmul_at`]: `c += aᵀ · b`. Used for weight
/// gradients.
pub fn matmul_at_acc(a: &Tensor, b: &Tensor, c: &mut Tensor) -> Result<()> {
    let (k, m) = a.expect_matrix("matmul_at lhs")?;
    let (k2, n) = b.expect_matrix("matmul_at rhs")?;
    if k != k2 || c.shape != [m, n] {
        return Err(Error::Shape(format!(
            "matmul_at: {:?}ᵀ x {:?} into {:?}",
            a.shape, b.shape, c.shape
        )));
    }
    gemm(
        m,
        k,
        n,
        &a.data,
        (1, m as isize),
        &b.data,
        (n as isize, 1),
        &mut c.data,
    );
    Ok(())
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub(crate) fn softmax_rows_in_place(t: &mut Tensor) {
    let c = t.cols();
    for row in t.data.chunks_exact_mut(c) {
        softmax_slice(row);
    }
}

pub(crate) fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with affine gain and bias.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layernorm: input width {d}, gain {:?}, bias {:?}",
            gain.shape, bias.shape
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let (mean, inv_std) = row_stats(row, eps);
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// Mean and `1 / sqrt(var + eps)` of one row (population variance).
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
