//! Sparse LDL' factorization of symmetric quasi-definite matrices with a
//! fixed fill-reducing permutation.
//!
//! The factorization is the up-looking elimination-tree algorithm; it does no
//! pivoting, which is sound for the quasi-definite KKT systems assembled by
//! the solver. The permutation is reverse Cuthill-McKee, chosen over
//! minimum-degree for its simplicity and determinism; the KKT systems here are
//! narrow-banded after it.

use super::csc::CscMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LdlError {
    #[error("zero pivot at column {0}; matrix is not quasi-definite")]
    ZeroPivot(usize),
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
/// `perm[k]` is the original index placed at position `k`.
pub fn rcm_ordering(pattern: &CscMatrix) -> Vec<usize> {
    let n = pattern.ncols();
    // Symmetric adjacency (excluding the diagonal), neighbors sorted by
    // (degree, index) for determinism.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, c, _) in pattern.triplets() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    for list in &mut adj {
        list.sort_unstable_by_key(|&v| (degree[v], v));
    }

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    // Start each component from its minimum-degree vertex (ties by index).
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_unstable_by_key(|&v| (degree[v], v));
    for &start in &starts {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    order.reverse();
    order
}

/// Numeric LDL' factorization together with its permutation.
pub struct LdlFactor {
    n: usize,
    /// Unit lower-triangular factor, diagonal not stored, CSC by columns.
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    /// `perm[k]` = original index at permuted position `k`.
    perm: Vec<usize>,
}

impl LdlFactor {
    /// Factor `P' * A * P` where the permutation is reverse Cuthill-McKee of
    /// the pattern of `a`. `a` must be given as a full symmetric matrix.
    pub fn new(a: &CscMatrix) -> Result<Self, LdlError> {
        let perm = rcm_ordering(a);
        Self::with_permutation(a, perm)
    }

    pub fn with_permutation(a: &CscMatrix, perm: Vec<usize>) -> Result<Self, LdlError> {
        let n = a.ncols();
        assert_eq!(a.nrows(), n, "matrix must be square");
        let mut inv_perm = vec![0; n];
        for (k, &orig) in perm.iter().enumerate() {
            inv_perm[orig] = k;
        }
        // Permuted upper triangle. The input stores both triangles, so each
        // unordered pair maps into the upper triangle exactly once.
        let permuted = CscMatrix::from_triplets(
            n,
            n,
            a.triplets().filter_map(|(r, c, v)| {
                let (pr, pc) = (inv_perm[r], inv_perm[c]);
                (pr <= pc).then_some((pr, pc, v))
            }),
        );

        // Symbolic: elimination tree and column counts of L.
        let mut parent = vec![usize::MAX; n];
        let mut l_nz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for j in 0..n {
            flag[j] = j;
            for (i, _) in permuted.col(j) {
                if i >= j {
                    continue;
                }
                let mut k = i;
                while flag[k] != j {
                    if parent[k] == usize::MAX {
                        parent[k] = j;
                    }
                    l_nz[k] += 1;
                    flag[k] = j;
                    k = parent[k];
                }
            }
        }

        let mut l_colptr = vec![0usize; n + 1];
        for j in 0..n {
            l_colptr[j + 1] = l_colptr[j] + l_nz[j];
        }
        let nnz = l_colptr[n];
        let mut l_rowidx = vec![0usize; nnz];
        let mut l_values = vec![0.0f64; nnz];
        let mut d = vec![0.0f64; n];

        // Numeric, up-looking: for each row j, sparse solve against the
        // already-computed columns along the elimination tree.
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut path = Vec::with_capacity(16);
        let mut fill: Vec<usize> = l_colptr[..n].to_vec();
        let mut flag = vec![usize::MAX; n];
        for j in 0..n {
            let mut top = n;
            flag[j] = j;
            y[j] = 0.0;
            for (i, v) in permuted.col(j) {
                if i > j {
                    continue;
                }
                y[i] += v;
                path.clear();
                let mut k = i;
                while flag[k] != j {
                    path.push(k);
                    flag[k] = j;
                    k = parent[k];
                }
                for &node in path.iter().rev() {
                    top -= 1;
                    pattern[top] = node;
                }
            }
            d[j] = y[j];
            y[j] = 0.0;
            for t in top..n {
                let k = pattern[t];
                let yk = y[k];
                y[k] = 0.0;
                for p in l_colptr[k]..fill[k] {
                    y[l_rowidx[p]] -= l_values[p] * yk;
                }
                let l_jk = yk / d[k];
                d[j] -= l_jk * yk;
                l_rowidx[fill[k]] = j;
                l_values[fill[k]] = l_jk;
                fill[k] += 1;
            }
            if d[j] == 0.0 {
                return Err(LdlError::ZeroPivot(j));
            }
        }

        Ok(Self {
            n,
            l_colptr,
            l_rowidx,
            l_values,
            d,
            perm,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of strictly positive entries of D (the positive inertia).
    pub fn positive_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v > 0.0).count()
    }

    /// Solve `A x = b` in place; `work` must have length `n`.
    pub fn solve_with(&self, b: &mut [f64], work: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        assert_eq!(work.len(), self.n);
        let x = work;
        for k in 0..self.n {
            x[k] = b[self.perm[k]];
        }
        // L y = b
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                    x[self.l_rowidx[p]] -= self.l_values[p] * xj;
                }
            }
        }
        // D z = y
        for j in 0..self.n {
            x[j] /= self.d[j];
        }
        // L' w = z
        for j in (0..self.n).rev() {
            let mut acc = x[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                acc -= self.l_values[p] * x[self.l_rowidx[p]];
            }
            x[j] = acc;
        }
        for k in 0..self.n {
            b[self.perm[k]] = x[k];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut out = b.to_vec();
        let mut work = vec![0.0; self.n];
        self.solve_with(&mut out, &mut work);
        out
    }
}
