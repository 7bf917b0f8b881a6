//! Sobolev gradient smoothing: solves `(I + lambda L) x = g` per channel with
//! one Cholesky factorization reused across iterations.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cholesky::{grid_nested_dissection, FactorError, SparseCholesky};
use crate::laplacian::SparseLaplacian;
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrecondError {
    #[error("smoothing weight must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("factorization failed: {0}")]
    Factor(#[from] FactorError),
    #[error("gradient has {actual} entries, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone)]
pub struct PrecondSolver {
    lambda: f64,
    factor: SparseCholesky,
}

pub fn build_preconditioner(laplacian: &SparseLaplacian, lambda: f64) -> Result<PrecondSolver, PrecondError> {
    PrecondSolver::new(laplacian, lambda)
}

impl PrecondSolver {
    pub fn new(laplacian: &SparseLaplacian, lambda: f64) -> Result<Self, PrecondError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(PrecondError::InvalidLambda(lambda));
        }
        let n = laplacian.dim();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(laplacian.nnz());
        let mut values = Vec::with_capacity(laplacian.nnz());
        row_ptr.push(0);
        for i in 0..n {
            for (j, v) in laplacian.row(i) {
                col_idx.push(j as u32);
                values.push(if i == j { 1.0 + lambda * v } else { lambda * v });
            }
            row_ptr.push(col_idx.len());
        }
        let perm = match laplacian.grid_dims() {
            Some((w, h)) => grid_nested_dissection(w, h),
            None => (0..n).collect(),
        };
        let factor = SparseCholesky::factor(&row_ptr, &col_idx, &values, perm)?;
        Ok(Self { lambda, factor })
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn factor(&self) -> &SparseCholesky {
        &self.factor
    }

    /// Returns `(I + lambda L)^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, PrecondError> {
        if b.len() != self.dim() {
            return Err(PrecondError::DimensionMismatch { expected: self.dim(), actual: b.len() });
        }
        let mut x = b.to_vec();
        let mut work = vec![0.0; self.dim()];
        self.factor.solve_in_place(&mut x, &mut work);
        Ok(x)
    }

    /// Applies the inverse to the x, y and z channels independently.
    pub fn precondition_gradient(&self, grad: &[Vec3]) -> Result<Vec<Vec3>, PrecondError> {
        let n = self.dim();
        if grad.len() != n {
            return Err(PrecondError::DimensionMismatch { expected: n, actual: grad.len() });
        }
        let mut out = vec![Vec3::ZERO; n];
        let mut chan = vec![0.0; n];
        let mut work = vec![0.0; n];
        for c in 0..3 {
            for (dst, g) in chan.iter_mut().zip(grad) {
                *dst = g[c];
            }
            self.factor.solve_in_place(&mut chan, &mut work);
            for (o, &v) in out.iter_mut().zip(&chan) {
                o[c] = v;
            }
        }
        Ok(out)
    }
}
