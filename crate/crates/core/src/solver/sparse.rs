use nalgebra::{DMatrix, DVector};

/// Compressed-sparse-column matrix.
///
/// Duplicate entries are summed at construction and explicit zeros are
/// dropped, so the layout can be handed straight to a sparse factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowval: Vec<usize>,
    nzval: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowval: Vec::new(),
            nzval: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets.
    ///
    /// Panics if an index is out of bounds.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        for &(r, c, _) in &triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
        }
        triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));

        let mut colptr = vec![0; ncols + 1];
        let mut rowval = Vec::with_capacity(triplets.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *nzval.last_mut().unwrap() += v;
            } else {
                rowval.push(r);
                nzval.push(v);
                colptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..ncols {
            colptr[c + 1] += colptr[c];
        }
        let mut m = Self { nrows, ncols, colptr, rowval, nzval };
        m.drop_zeros();
        m
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for c in 0..dense.ncols() {
            for r in 0..dense.nrows() {
                let v = dense[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), triplets)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    fn drop_zeros(&mut self) {
        if self.nzval.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut colptr = vec![0; self.ncols + 1];
        let mut rowval = Vec::with_capacity(self.rowval.len());
        let mut nzval = Vec::with_capacity(self.nzval.len());
        for c in 0..self.ncols {
            for idx in self.colptr[c]..self.colptr[c + 1] {
                if self.nzval[idx] != 0.0 {
                    rowval.push(self.rowval[idx]);
                    nzval.push(self.nzval[idx]);
                }
            }
            colptr[c + 1] = rowval.len();
        }
        self.colptr = colptr;
        self.rowval = rowval;
        self.nzval = nzval;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }

    /// Iterates `(row, col, value)` in column-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            (self.colptr[c]..self.colptr[c + 1]).map(move |i| (self.rowval[i], c, self.nzval[i]))
        })
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = DVector::zeros(self.nrows);
        for (r, c, v) in self.iter() {
            y[r] += v * x[c];
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = DVector::zeros(self.ncols);
        for (r, c, v) in self.iter() {
            y[c] += v * x[r];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            d[(r, c)] += v;
        }
        d
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.ncols, self.nrows, self.iter().map(|(r, c, v)| (c, r, v)).collect())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&SparseMatrix]) -> Self {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        let mut triplets = Vec::new();
        let mut offset = 0;
        for b in blocks {
            assert_eq!(b.ncols, ncols, "vstack column mismatch");
            triplets.extend(b.iter().map(|(r, c, v)| (r + offset, c, v)));
            offset += b.nrows;
        }
        Self::from_triplets(offset, ncols, triplets)
    }

    /// Upper triangle (including the diagonal).
    pub fn upper_triangle(&self) -> Self {
        Self::from_triplets(
            self.nrows,
            self.ncols,
            self.iter().filter(|&(r, c, _)| r <= c).collect(),
        )
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let mut entries: std::collections::HashMap<(usize, usize), f64> = self.iter().map(|(r, c, v)| ((r, c), v)).collect();
        for (r, c, v) in self.iter() {
            *entries.entry((c, r)).or_insert(0.0) -= v;
        }
        entries.values().fold(0.0, |m, d| m.max(d.abs()))
    }

    pub(crate) fn csc_parts(&self) -> (&[usize], &[usize], &[f64]) {
        (&self.colptr, &self.rowval, &self.nzval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_zeros_dropped() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 0.0), (1, 0, -1.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), DMatrix::from_row_slice(2, 2, &[3.0, 0.0, -1.0, 0.0]));
    }

    #[test]
    fn products_match_dense() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -3.0, 4.0]);
        let s = SparseMatrix::from_dense(&d);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![-1.0, 5.0]);
        assert_eq!(s.mul_vec(&x), &d * &x);
        assert_eq!(s.tr_mul_vec(&y), d.transpose() * &y);
        assert_eq!(s.transpose().to_dense(), d.transpose());
    }

    #[test]
    fn asymmetry_matches_dense() {
        let d = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 1.5, 0.0, 0.0, -4.0, 0.0, 7.0]);
        let s = SparseMatrix::from_dense(&d);
        assert_eq!(s.asymmetry(), (&d - d.transpose()).amax());
        assert_eq!(SparseMatrix::identity(4).asymmetry(), 0.0);
        assert_eq!(SparseMatrix::from_triplets(2, 3, vec![]).asymmetry(), f64::INFINITY);
    }

    #[test]
    fn vstack_offsets_rows() {
        let a = SparseMatrix::identity(2);
        let b = SparseMatrix::from_triplets(1, 2, vec![(0, 1, 5.0)]);
        let s = SparseMatrix::vstack(&[&a, &b]);
        assert_eq!(s.to_dense(), DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 5.0]));
    }
}
