//! Dense row-major `f64` matrices and the handful of kernels the attention
//! code needs: products, row softmax and axis means over head stacks.

use std::ops::Range;

use crate::error::{invalid, shape_err, Result};

/// Floor applied to every logarithm of a user-settable scale (`λ`, `ε`).
///
/// `exp(-30) ≈ 9.4e-14`, which is negligible next to any O(1) logit but keeps
/// softmax inputs finite.
pub const LOG_FLOOR: f64 = -30.0;

/// Natural log clamped from below at [`LOG_FLOOR`]. Zero, negatives and NaN
/// all map to the floor.
pub fn floored_ln(x: f64) -> f64 {
    if x > 0.0 {
        let v = x.ln();
        if v < LOG_FLOOR {
            LOG_FLOOR
        } else {
            v
        }
    } else {
        LOG_FLOOR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "accumulate {:?} into {:?}",
                other.shape(),
                self.shape()
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start > range.end || range.end > self.rows {
            return shape_err(format!("row slice {range:?} of {} rows", self.rows));
        }
        Matrix::new(
            range.len(),
            self.cols,
            self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        )
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start > range.end || range.end > self.cols {
            return shape_err(format!("column slice {range:?} of {} columns", self.cols));
        }
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Matrix::new(self.rows, width, data)
    }

    /// Stacks matrices on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return shape_err("vstack over differing column counts");
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Matrix::new(rows, cols, data)
    }

    /// Places matrices side by side.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return shape_err("hstack over differing row counts");
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(i));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self
            .zip_with(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(0.0, f64::max))
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    Ok(dot_rows(a, &b.transpose()))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return shape_err(format!(
            "matmul {}x{} by transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    Ok(dot_rows(a, b))
}

/// `out[i][j] = a.row(i) · b.row(j)`.
fn dot_rows(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, b.rows);
    if a.cols == 0 || b.rows == 0 {
        return out;
    }
    if a.cols < 16 {
        // short inner dimension: accumulate whole output rows from columns of b
        let bt = b.transpose();
        for i in 0..a.rows {
            let out_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
            for (k, &aik) in a.row(i).iter().enumerate() {
                for (o, &x) in out_row.iter_mut().zip(bt.row(k)) {
                    *o += aik * x;
                }
            }
        }
    } else {
        for i in 0..a.rows {
            let ar = a.row(i);
            let out_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(ar, b.row(j));
            }
        }
    }
    out
}

/// Four interleaved partial sums so the compiler can keep them in vector lanes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        lanes[0] += x[0] * y[0];
        lanes[1] += x[1] * y[1];
        lanes[2] += x[2] * y[2];
        lanes[3] += x[3] * y[3];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Numerically stable softmax applied independently to each row.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.cols == 0 {
        return invalid("softmax over rows of length 0");
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Axes of a head-indexed stack `[head, row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Head,
    Row,
    Col,
}

/// Arithmetic mean of a `[head, row, col]` stack over the named axes.
///
/// The axes that survive keep their order and become the result: two
/// remaining axes give an `a x b` matrix, one gives `1 x a`, none gives `1 x 1`.
/// At least one axis must be reduced.
pub fn mean_over(stack: &[Matrix], axes: &[Axis]) -> Result<Matrix> {
    let first = match stack.first() {
        Some(m) => m,
        None => return invalid("mean over an empty head stack"),
    };
    if stack.iter().any(|m| m.shape() != first.shape()) {
        return shape_err("head stack with inconsistent shapes");
    }
    if axes.is_empty() {
        return invalid("mean_over needs at least one axis");
    }
    let extents = [stack.len(), first.rows, first.cols];
    let all = [Axis::Head, Axis::Row, Axis::Col];
    let reduced: Vec<bool> = all.iter().map(|a| axes.contains(a)).collect();
    let count: usize = (0..3).filter(|&k| reduced[k]).map(|k| extents[k]).product();
    if count == 0 {
        return invalid("mean over an empty axis extent");
    }
    if axes.iter().all(|&a| a == Axis::Head) {
        let mut out = first.clone();
        for m in &stack[1..] {
            for (o, v) in out.data.iter_mut().zip(&m.data) {
                *o += v;
            }
        }
        let denom = stack.len() as f64;
        for v in &mut out.data {
            *v /= denom;
        }
        return Ok(out);
    }
    let kept: Vec<usize> = (0..3).filter(|&k| !reduced[k]).collect();
    let (out_rows, out_cols) = match kept.as_slice() {
        [a, b] => (extents[*a], extents[*b]),
        [a] => (1, extents[*a]),
        _ => (1, 1),
    };
    let mut out = Matrix::zeros(out_rows, out_cols);
    for (h, m) in stack.iter().enumerate() {
        for i in 0..m.rows {
            for j in 0..m.cols {
                let idx = [h, i, j];
                let (r, c) = match kept.as_slice() {
                    [a, b] => (idx[*a], idx[*b]),
                    [a] => (0, idx[*a]),
                    _ => (0, 0),
                };
                out.data[r * out_cols + c] += m.get(i, j);
            }
        }
    }
    let denom = count as f64;
    for v in &mut out.data {
        *v /= denom;
    }
    Ok(out)
}
