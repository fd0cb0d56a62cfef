//! Weighted compressed-sparse-row matrices.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f32>,
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if row_offsets.len() != rows + 1
            || row_offsets.last().copied() != Some(col_indices.len())
            || col_indices.len() != values.len()
            || row_offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Format("malformed CSR structure".into()));
        }
        if let Some(&bad) = col_indices.iter().find(|&&c| c >= cols) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                num_nodes: cols,
                line: 0,
            });
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Sparse view of a dense tensor, keeping only non-zero entries.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut row_offsets = Vec::with_capacity(t.rows() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for i in 0..t.rows() {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self {
            rows: t.rows(),
            cols: t.cols(),
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, w) in self.row(i) {
                out.set(i, j, out.get(i, j) + w);
            }
        }
        out
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
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `(column, weight)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_sums(&self) -> Vec<f32> {
        (0..self.rows).map(|i| self.row(i).map(|(_, w)| w).sum()).collect()
    }

    /// `self · x`.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if self.cols != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                left: (self.rows, self.cols),
                right: x.shape(),
            });
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows, d);
        for i in 0..self.rows {
            let dst = out.row_mut(i);
            for (j, w) in self.row(i) {
                for (o, &v) in dst.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `selfᵀ · g` into `out`.
    pub(crate) fn transpose_matmul_into(&self, g: &Tensor, out: &mut Tensor) {
        debug_assert_eq!(g.rows(), self.rows);
        debug_assert_eq!(out.rows(), self.cols);
        for i in 0..self.rows {
            let src = g.row(i);
            for (j, w) in self.row(i) {
                for (o, &v) in out.row_mut(j).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }
}
