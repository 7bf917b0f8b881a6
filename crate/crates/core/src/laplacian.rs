//! Combinatorial graph Laplacian of a triangle mesh.

use alloc::vec;
use alloc::vec::Vec;

use crate::mesh::GridMesh;

/// Symmetric `n x n` matrix with `L_ii = degree(i)` and `L_ij = -1` for every
/// edge `(i, j)`. Stored as full CSR with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLaplacian {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    grid: Option<(usize, usize)>,
}

impl SparseLaplacian {
    /// Builds the Laplacian of the graph with `n` vertices and the given
    /// undirected edges. Duplicate edges and self loops are ignored.
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Self {
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            assert!((a as usize) < n && (b as usize) < n, "edge ({a}, {b}) out of range");
            if a != b {
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (i, nbrs) in adj.iter_mut().enumerate() {
            nbrs.sort_unstable();
            nbrs.dedup();
            let diag = nbrs.len() as f64;
            let mut diag_done = false;
            for &j in nbrs.iter() {
                if !diag_done && j as usize > i {
                    col_idx.push(i as u32);
                    values.push(diag);
                    diag_done = true;
                }
                col_idx.push(j);
                values.push(-1.0);
            }
            if !diag_done {
                col_idx.push(i as u32);
                values.push(diag);
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values, grid: None }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Lattice dimensions when the graph is a [`GridMesh`], used to pick a
    /// fill-reducing ordering.
    #[inline]
    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.grid
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().map(|&c| c as usize).zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn degree(&self, i: usize) -> usize {
        self.get(i, i) as usize
    }

    /// `y = L x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    /// Dense row-major copy, for small matrices only.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }
}

pub fn uniform_laplacian(mesh: &GridMesh) -> SparseLaplacian {
    let mut l = SparseLaplacian::from_edges(mesh.vertex_count(), &mesh.edges());
    l.grid = Some((mesh.grid_w(), mesh.grid_h()));
    l
}
