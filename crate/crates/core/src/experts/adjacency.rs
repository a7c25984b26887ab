use ndarray::{Array2, ArrayView2};

use crate::scalar::Scalar;

/// Symmetric-normalized adjacency `D^-1/2 (A [+ I]) D^-1/2` in CSR form.
/// The matrix is symmetric, so it is its own transpose in backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<T> {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> NormalizedAdjacency<T> {
    /// `edges` are undirected pairs; each contributes both directions.
    pub fn new(n: usize, edges: &[(usize, usize)], self_loops: bool) -> Self {
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u != v {
                neighbors[u].push(v);
                neighbors[v].push(u);
            }
        }
        if self_loops {
            for (v, list) in neighbors.iter_mut().enumerate() {
                list.push(v);
            }
        }
        for list in neighbors.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        let degree: Vec<usize> = neighbors.iter().map(Vec::len).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (u, list) in neighbors.iter().enumerate() {
            for &v in list {
                indices.push(v);
                values.push(T::one() / T::from_usize_lossy(degree[u] * degree[v]).sqrt());
            }
            indptr.push(indices.len());
        }
        NormalizedAdjacency {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `Â · X`.
    pub fn propagate(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        assert_eq!(x.nrows(), self.n, "propagation input has wrong row count");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for u in 0..self.n {
            let mut row = out.row_mut(u);
            for k in self.indptr[u]..self.indptr[u + 1] {
                row.scaled_add(self.values[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut d = Array2::zeros((self.n, self.n));
        for u in 0..self.n {
            for k in self.indptr[u]..self.indptr[u + 1] {
                d[[u, self.indices[k]]] = self.values[k];
            }
        }
        d
    }
}
