//! Compressed sparse column matrices, sized for the problems at hand.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Sparse matrix in compressed sparse column form with sorted row indices in
/// each column and no duplicate entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from triplets; duplicates are summed, entries are sorted.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            if v != 0.0 {
                cols[c].push((r, v));
            }
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in &mut cols {
            col.sort_unstable_by_key(|&(r, _)| r);
            let mut iter = col.iter().peekable();
            while let Some(&(r, v)) = iter.next() {
                let mut sum = v;
                while let Some(&&(r2, v2)) = iter.peek() {
                    if r2 == r {
                        sum += v2;
                        iter.next();
                    } else {
                        break;
                    }
                }
                if sum != 0.0 {
                    row_idx.push(r);
                    values.push(sum);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self::from_triplets(nrows, ncols, std::iter::empty())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)))
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if m[(r, c)] != 0.0 {
                    triplets.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), triplets)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            self.col_range(c)
                .map(move |p| (self.row_idx[p], c, self.values[p]))
        })
    }

    fn col_range(&self, c: usize) -> std::ops::Range<usize> {
        self.col_ptr[c]..self.col_ptr[c + 1]
    }

    /// Entries of column `c` as `(row, value)` pairs.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.col_range(c)
            .map(move |p| (self.row_idx[p], self.values[p]))
    }

    /// `out = self * x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        out.fill(0.0);
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.col_range(c) {
                out[self.row_idx[p]] += self.values[p] * xc;
            }
        }
    }

    /// `out = self' * x`.
    pub fn transpose_mul_vec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(out.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.col_range(c) {
                acc += self.values[p] * x[self.row_idx[p]];
            }
            out[c] = acc;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(
            self.ncols,
            self.nrows,
            self.triplets().map(|(r, c, v)| (c, r, v)),
        )
    }

    /// `max |self - other|` over the union pattern.
    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut worst: f64 = 0.0;
        let mut dense_row = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            for p in self.col_range(c) {
                dense_row[self.row_idx[p]] = self.values[p];
            }
            for p in other.col_range(c) {
                let r = other.row_idx[p];
                worst = worst.max((dense_row[r] - other.values[p]).abs());
                dense_row[r] = other.values[p];
            }
            for p in self.col_range(c) {
                let r = self.row_idx[p];
                if dense_row[r] != 0.0 {
                    // Entry present in self but cancelled/absent in other.
                    let other_val = other
                        .col(c)
                        .find(|&(rr, _)| rr == r)
                        .map_or(0.0, |(_, v)| v);
                    worst = worst.max((self.values[p] - other_val).abs());
                }
                dense_row[r] = 0.0;
            }
            for p in other.col_range(c) {
                dense_row[other.row_idx[p]] = 0.0;
            }
        }
        worst
    }

    /// Per-column infinity norms.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|c| {
                self.col_range(c)
                    .map(|p| self.values[p].abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Per-row infinity norms.
    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0_f64; self.nrows];
        for p in 0..self.values.len() {
            let r = self.row_idx[p];
            norms[r] = norms[r].max(self.values[p].abs());
        }
        norms
    }

    /// In-place scaling `self <- diag(left) * self * diag(right)`.
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        assert_eq!(left.len(), self.nrows);
        assert_eq!(right.len(), self.ncols);
        for c in 0..self.ncols {
            let range = self.col_ptr[c]..self.col_ptr[c + 1];
            for p in range {
                self.values[p] *= left[self.row_idx[p]] * right[c];
            }
        }
    }

    /// Scale every entry by a scalar.
    pub fn scale_values(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn triplet_build_sums_duplicates() {
        let m = CscMatrix::from_triplets(2, 2, [(0, 0, 1.0), (0, 0, 2.0), (1, 1, -1.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -1.0]));
    }

    #[test]
    fn mul_vec_matches_dense() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, -1.0, 4.0, 0.0]);
        let m = CscMatrix::from_dense(&d);
        let x = [2.0, 3.0];
        let mut out = [0.0; 3];
        m.mul_vec(&x, &mut out);
        let expected = &d * DVector::from_column_slice(&x);
        assert_eq!(DVector::from_column_slice(&out), expected);

        let y = [1.0, -1.0, 0.5];
        let mut out_t = [0.0; 2];
        m.transpose_mul_vec(&y, &mut out_t);
        let expected_t = d.transpose() * DVector::from_column_slice(&y);
        assert_eq!(DVector::from_column_slice(&out_t), expected_t);
    }

    #[test]
    fn transpose_round_trip() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let m = CscMatrix::from_dense(&d);
        assert_eq!(m.transpose().to_dense(), d.transpose());
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn symmetry_difference_detects_asymmetry() {
        let sym = CscMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
        assert_eq!(sym.max_abs_difference(&sym.transpose()), 0.0);
        let asym = CscMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]));
        assert_eq!(asym.max_abs_difference(&asym.transpose()), 0.5);
    }

    #[test]
    fn scaling_applies_both_sides() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut m = CscMatrix::from_dense(&d);
        m.scale(&[2.0, 0.5], &[1.0, 10.0]);
        assert_eq!(
            m.to_dense(),
            DMatrix::from_row_slice(2, 2, &[2.0, 40.0, 1.5, 20.0])
        );
    }
}
