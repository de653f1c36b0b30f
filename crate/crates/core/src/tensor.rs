//! Dense row-major tensors and the numeric kernels shared by the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                shapes: vec![shape, vec![data.len()]],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                shapes: rows.iter().map(|r| vec![r.len()]).collect(),
            });
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a matrix; a vector is treated as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keep the listed columns of a matrix, in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Tensor {
        let (r, c) = self.dims2();
        let mut data = Vec::with_capacity(r * keep.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(keep.iter().map(|&j| row[j]));
        }
        Tensor { shape: vec![r, keep.len()], data }
    }

    /// Keep the listed rows of a matrix, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(keep.len() * c);
        for &i in keep {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![keep.len(), c], data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_bits(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub struct MatView<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatView<'a> {
    /// View of a stored `rows x cols` matrix, optionally transposed.
    pub fn new(data: &'a [f64], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self { data, row_stride: 1, col_stride: cols as isize }
        } else {
            Self { data, row_stride: cols as isize, col_stride: 1 }
        }
    }
}

/// `c = alpha * a @ b + beta * c` for an `m x k` by `k x n` product.
///
/// Serial; the reduction order depends only on the operand sizes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    c: &mut [f64],
    c_row_stride: isize,
    c_col_stride: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i as isize * c_row_stride + j as isize * c_col_stride;
                c[idx as usize] *= beta;
            }
        }
        return;
    }
    // SAFETY: the caller's shapes were validated against the slice lengths;
    // every index the kernel touches lies within the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            c_row_stride,
            c_col_stride,
        );
    }
}

/// Plain matrix product of two stored matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            shapes: vec![a.shape.clone(), b.shape.clone()],
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        MatView::new(&a.data, k, false),
        MatView::new(&b.data, n, false),
        0.0,
        &mut out,
        n as isize,
        1,
    );
    Tensor::new(vec![m, n], out)
}

const SQRT_1_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact erf-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * SQRT_1_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * SQRT_1_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable log-softmax of one row, written into `out`.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "log_softmax" });
    }
    let (r, c) = logits.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        log_softmax_row(logits.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Row-wise softmax of a matrix.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (r, c) = logits.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_row(logits.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Tensor { shape: logits.shape.clone(), data: out }
}

/// Indices of the `min(k, n)` largest entries, largest first; ties go to
/// the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// Row-wise top-k selection of a matrix.
pub fn topk_rows(t: &Tensor, k: usize) -> Vec<Vec<usize>> {
    (0..t.rows()).map(|i| topk_indices(t.row(i), k)).collect()
}
