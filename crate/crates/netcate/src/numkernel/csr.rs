use ndarray::ArrayView2;

use super::Matrix;
use crate::error::{Error, Result};

/// Compressed sparse row matrix with f64 values.
///
/// Rows are stored contiguously; within a row, column indices are strictly
/// increasing. Duplicate (row, col) triplets are summed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Shape(format!(
                    "triplet ({r}, {c}) out of bounds for {n_rows}x{n_cols} matrix"
                )));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));

        // Count entries per row, then prefix-sum into row offsets.
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("value for merged duplicate") += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 1..=n_rows {
            indptr[i] += indptr[i - 1];
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CsrMatrix {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// (column, value) pairs of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// All (row, column, value) entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros((self.n_rows, self.n_cols));
        for (r, c, v) in self.triplets() {
            out[[r, c]] += v;
        }
        out
    }

    /// self · b for dense b.
    pub fn matmul_dense(&self, b: &ArrayView2<f64>) -> Matrix {
        assert_eq!(
            self.n_cols,
            b.nrows(),
            "spmm dimension mismatch: {}x{} vs {}x{}",
            self.n_rows,
            self.n_cols,
            b.nrows(),
            b.ncols()
        );
        let mut out = Matrix::zeros((self.n_rows, b.ncols()));
        for r in 0..self.n_rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &b.row(c));
            }
        }
        out
    }

    /// selfᵀ · g for dense g; the adjoint of [`Self::matmul_dense`].
    pub fn transpose_matmul_dense(&self, g: &ArrayView2<f64>) -> Matrix {
        assert_eq!(
            self.n_rows,
            g.nrows(),
            "spmm adjoint dimension mismatch: {}x{} vs {}x{}",
            self.n_rows,
            self.n_cols,
            g.nrows(),
            g.ncols()
        );
        let mut out = Matrix::zeros((self.n_cols, g.ncols()));
        for r in 0..self.n_rows {
            let g_row = g.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &g_row);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn from_triplets_sorts_and_merges_duplicates() {
        let m = CsrMatrix::from_triplets(3, 3, vec![(2, 1, 1.0), (0, 2, 2.0), (2, 1, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), array![[0., 0., 2.], [0., 0., 0.], [0., 1.5, 0.]]);
    }

    #[test]
    fn out_of_bounds_triplet_is_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn identity_matmul_is_identity() {
        let b = array![[1., 2.], [3., 4.], [5., 6.]];
        let m = CsrMatrix::identity(3);
        assert_eq!(m.matmul_dense(&b.view()), b);
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 1, 2.0), (1, 0, -1.0), (1, 2, 4.0)]).unwrap();
        assert_eq!(m.to_dense(), array![[0., 2., 0.], [-1., 0., 4.]]);
        let b = array![[1., 0.], [2., 1.], [0., 3.]];
        assert_eq!(m.matmul_dense(&b.view()), array![[4., 2.], [-1., 12.]]);
    }

    #[test]
    fn transpose_matmul_matches_dense_reference() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(0, 1, 2.0), (1, 0, -1.0), (1, 2, 4.0)]).unwrap();
        let g = array![[1., 2.], [3., 4.]];
        let expected = m.to_dense().t().dot(&g);
        let got = m.transpose_matmul_dense(&g.view());
        assert!((&expected - &got).iter().all(|d| d.abs() < 1e-12));
    }
}
