//! Up-looking sparse Cholesky factorization `P A P^T = L L^T` for symmetric
//! positive definite matrices, plus a nested-dissection ordering for grid
//! graphs.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("permutation of length {actual} does not match dimension {expected}")]
    BadPermutation { expected: usize, actual: usize },
}

/// Lower-triangular factor stored column-wise; the diagonal is the first
/// entry of each column.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseCholesky {
    /// Factors the symmetric matrix given as full CSR (both triangles
    /// present). `perm[new] = old` is the elimination order.
    pub fn factor(row_ptr: &[usize], col_idx: &[u32], values: &[f64], perm: Vec<usize>) -> Result<Self, FactorError> {
        let n = row_ptr.len() - 1;
        if perm.len() != n {
            return Err(FactorError::BadPermutation { expected: n, actual: perm.len() });
        }
        let mut inv = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        if inv.contains(&NONE) {
            return Err(FactorError::BadPermutation { expected: n, actual: perm.len() });
        }

        // upper triangle of C = P A P^T, column k holds rows i <= k
        let mut c_ptr = Vec::with_capacity(n + 1);
        let mut c_idx: Vec<usize> = Vec::with_capacity(values.len() / 2 + n);
        let mut c_val = Vec::with_capacity(values.len() / 2 + n);
        c_ptr.push(0);
        for &old in &perm {
            let k = inv[old];
            for p in row_ptr[old]..row_ptr[old + 1] {
                let i = inv[col_idx[p] as usize];
                if i <= k {
                    c_idx.push(i);
                    c_val.push(values[p]);
                }
            }
            c_ptr.push(c_idx.len());
        }

        // elimination tree
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &i0 in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
                let mut i = i0;
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // column counts from the row patterns
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(k, &c_ptr, &c_idx, &parent, &mut mark, &mut stack);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        for &c in &counts {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0u32; nnz];
        let mut lval = vec![0.0f64; nnz];
        let mut next: Vec<usize> = col_ptr[..n].to_vec();

        // numeric, one row of L at a time
        mark.iter_mut().for_each(|m| *m = NONE);
        let mut x = vec![0.0f64; n];
        for k in 0..n {
            let top = ereach(k, &c_ptr, &c_idx, &parent, &mut mark, &mut stack);
            x[k] = 0.0;
            for p in c_ptr[k]..c_ptr[k + 1] {
                x[c_idx[p]] = c_val[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lval[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..next[i] {
                    x[row_idx[p] as usize] -= lval[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                row_idx[p] = k as u32;
                lval[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(FactorError::NotPositiveDefinite { column: k, pivot: d });
            }
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k as u32;
            lval[p] = libm::sqrt(d);
        }

        Ok(Self { n, perm, col_ptr, row_idx, values: lval })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Nonzeros in the factor, diagonal included.
    #[inline]
    pub fn factor_nnz(&self) -> usize {
        self.values.len()
    }

    /// Solves `A x = b` in place. `work` must have length `dim()`.
    pub fn solve_in_place(&self, b: &mut [f64], work: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        assert_eq!(work.len(), self.n);
        for (w, &old) in work.iter_mut().zip(&self.perm) {
            *w = b[old];
        }
        // L y = P b
        for j in 0..self.n {
            let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
            work[j] /= self.values[s];
            let yj = work[j];
            for p in s + 1..e {
                work[self.row_idx[p] as usize] -= self.values[p] * yj;
            }
        }
        // L^T z = y
        for j in (0..self.n).rev() {
            let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let mut acc = work[j];
            for p in s + 1..e {
                acc -= self.values[p] * work[self.row_idx[p] as usize];
            }
            work[j] = acc / self.values[s];
        }
        for (&w, &old) in work.iter().zip(&self.perm) {
            b[old] = w;
        }
    }
}

/// Nonzero pattern of row `k` of L, written topologically to `stack[top..n]`.
fn ereach(
    k: usize,
    c_ptr: &[usize],
    c_idx: &[usize],
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for &i0 in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
        if i0 > k {
            continue;
        }
        let mut i = i0;
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Nested-dissection order (`perm[new] = old`) for a `w x h` lattice whose
/// vertex `(i, j)` has index `j * w + i`. Works for any stencil whose edges
/// only join vertices in adjacent rows and columns.
pub fn grid_nested_dissection(w: usize, h: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(w * h);
    dissect(w, 0, w, 0, h, &mut out);
    out
}

fn dissect(stride: usize, x0: usize, x1: usize, y0: usize, y1: usize, out: &mut Vec<usize>) {
    let (w, h) = (x1 - x0, y1 - y0);
    if w == 0 || h == 0 {
        return;
    }
    if w * h <= 16 || w.max(h) < 3 {
        for j in y0..y1 {
            for i in x0..x1 {
                out.push(j * stride + i);
            }
        }
        return;
    }
    if w >= h {
        let xm = x0 + w / 2;
        dissect(stride, x0, xm, y0, y1, out);
        dissect(stride, xm + 1, x1, y0, y1, out);
        out.extend((y0..y1).map(|j| j * stride + xm));
    } else {
        let ym = y0 + h / 2;
        dissect(stride, x0, x1, y0, ym, out);
        dissect(stride, x0, x1, ym + 1, y1, out);
        out.extend((x0..x1).map(|i| ym * stride + i));
    }
}
