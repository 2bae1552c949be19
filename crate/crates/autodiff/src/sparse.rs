use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Constant CSR matrix used as the left operand of [`crate::Tape::spmm`].
///
/// Gradients never flow into the sparse operand; it carries graph
/// structure (normalized adjacency, pooling weights, segment sums).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists. Duplicate columns in a
    /// row are kept as separate entries and therefore summed by `spmm`.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut builder = SparseBuilder::new(cols);
        for row in rows {
            for &(c, v) in row {
                builder.push(c, v)?;
            }
            builder.finish_row();
        }
        Ok(builder.build())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `r` as parallel column/value slices.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(r, c, out.get(r, c) + v);
            }
        }
        out
    }

    /// `self * dense`.
    pub fn mul_dense(&self, dense: &Tensor) -> Result<Tensor> {
        if self.cols != dense.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "spmm",
                left: (self.rows, self.cols),
                right: dense.shape(),
            });
        }
        let width = dense.cols();
        let mut out = Tensor::zeros(self.rows, width);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let dst = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (d, s) in dst.iter_mut().zip(dense.row(c)) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * dense`, the adjoint used in backward.
    pub fn tmul_dense(&self, dense: &Tensor) -> Tensor {
        debug_assert_eq!(self.rows, dense.rows());
        let width = dense.cols();
        let mut out = Tensor::zeros(self.cols, width);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let src = dense.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (d, s) in out.row_mut(c).iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }
}

/// Row-by-row CSR construction.
#[derive(Debug)]
pub struct SparseBuilder {
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseBuilder {
    pub fn new(cols: usize) -> Self {
        Self {
            cols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, col: usize, value: f64) -> Result<()> {
        if col >= self.cols {
            return Err(AutodiffError::IndexOutOfRange {
                op: "sparse",
                index: col,
                len: self.cols,
            });
        }
        self.indices.push(col);
        self.values.push(value);
        Ok(())
    }

    pub fn finish_row(&mut self) {
        self.indptr.push(self.indices.len());
    }

    pub fn build(self) -> SparseMatrix {
        SparseMatrix {
            rows: self.indptr.len() - 1,
            cols: self.cols,
            indptr: self.indptr,
            indices: self.indices,
            values: self.values,
        }
    }
}
