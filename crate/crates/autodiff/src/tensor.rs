//! Dense row-major fp64 matrices and the GEMM kernels the tape is built on.

use rayon::prelude::*;

use crate::error::{AutodiffError, Result};

/// Rows handled per GEMM task. Fixed so results never depend on the
/// size of the thread pool.
const GEMM_ROW_CHUNK: usize = 64;
/// Below this many multiply-adds a product runs as a single call.
const GEMM_PARALLEL_WORK: usize = 1 << 18;

/// A dense rank-2 value. Vectors are `1 x n` rows or `n x 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
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

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor (first element otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            Operand::plain(self),
            Operand::plain(other),
            &mut out,
        );
        Ok(out)
    }

    /// `self^T * other`.
    pub(crate) fn matmul_tn(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Self::zeros(self.cols, other.cols);
        gemm(Operand::transposed(self), Operand::plain(other), &mut out);
        out
    }

    /// `self * other^T`.
    pub(crate) fn matmul_nt(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(Operand::plain(self), Operand::transposed(other), &mut out);
        out
    }
}

#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Operand<'a> {
    fn plain(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            rows: t.rows,
            cols: t.cols,
            row_stride: t.cols as isize,
            col_stride: 1,
        }
    }

    fn transposed(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            rows: t.cols,
            cols: t.rows,
            row_stride: 1,
            col_stride: t.cols as isize,
        }
    }
}

/// `out = lhs * rhs`, overwriting `out`.
fn gemm(lhs: Operand<'_>, rhs: Operand<'_>, out: &mut Tensor) {
    let (m, k, n) = (lhs.rows, lhs.cols, rhs.cols);
    debug_assert_eq!(k, rhs.rows);
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    let run = |row0: usize, rows: usize, chunk: &mut [f64]| {
        // SAFETY: every pointer/stride pair addresses memory inside the
        // borrowed slices: lhs rows [row0, row0 + rows) x k, rhs k x n and
        // the output chunk rows x n.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                lhs.data.as_ptr().offset(row0 as isize * lhs.row_stride),
                lhs.row_stride,
                lhs.col_stride,
                rhs.data.as_ptr(),
                rhs.row_stride,
                rhs.col_stride,
                0.0,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * n * k < GEMM_PARALLEL_WORK || m <= GEMM_ROW_CHUNK {
        run(0, m, &mut out.data);
    } else {
        out.data
            .par_chunks_mut(GEMM_ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, chunk)| run(i * GEMM_ROW_CHUNK, chunk.len() / n, chunk));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    fn ramp(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| ((r * 31 + c * 17) as f64 * seed).sin())
    }

    #[test]
    fn matmul_matches_naive_including_chunked_path() {
        for &(m, k, n) in &[(3, 4, 5), (1, 7, 1), (300, 64, 64), (130, 33, 70)] {
            let a = ramp(m, k, 0.37);
            let b = ramp(k, n, 0.11);
            let got = a.matmul(&b).unwrap();
            assert!(got.max_abs_diff(&naive(&a, &b)) < 1e-10);
        }
    }

    #[test]
    fn transposed_products() {
        let a = ramp(150, 40, 0.3);
        let b = ramp(150, 20, 0.7);
        let tn = a.matmul_tn(&b);
        assert!(tn.max_abs_diff(&naive(&a.transpose(), &b)) < 1e-10);
        let c = ramp(20, 40, 0.9);
        let nt = a.matmul_nt(&c);
        assert!(nt.max_abs_diff(&naive(&a, &c.transpose())) < 1e-10);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(2, 3);
        assert!(matches!(
            a.matmul(&a),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
    }
}
