//! Dense LU solves with an explicit singularity threshold.

use nalgebra::{Dyn, LU};

use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Pivots smaller than this fraction of the largest entry magnitude are
/// treated as zero.
pub const PIVOT_REL_TOL: f64 = 1e-12;

/// A reusable LU factorization for repeated right-hand sides.
#[derive(Clone, Debug)]
pub struct LinearSolver {
    matrix: Matrix,
    lu: LU<f64, Dyn, Dyn>,
}

impl LinearSolver {
    pub fn factor(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "solve_linear needs a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax();
        let threshold = PIVOT_REL_TOL * scale;
        let lu = m.clone().lu();
        let pivot = if m.nrows() == 0 {
            f64::INFINITY
        } else {
            lu.u().diagonal().amin()
        };
        if scale == 0.0 || !(pivot > threshold) {
            return Err(Error::SingularMatrix { pivot, threshold });
        }
        Ok(Self {
            matrix: m.clone(),
            lu,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Solves `M y = b`, followed by one step of iterative refinement.
    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has length {}, expected {}",
                b.len(),
                self.dim()
            )));
        }
        let mut y = self
            .lu
            .solve(b)
            .ok_or(Error::SingularMatrix { pivot: 0.0, threshold: 0.0 })?;
        let r = b - &self.matrix * &y;
        if let Some(dy) = self.lu.solve(&r) {
            y += dy;
        }
        Ok(y)
    }

    /// Solves `M Y = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.dim(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).into_owned())?;
            out.set_column(j, &col);
        }
        Ok(out)
    }
}

/// Solves `M y = b` for square `M`.
pub fn solve_linear(m: &Matrix, b: &Vector) -> Result<Vector> {
    LinearSolver::factor(m)?.solve(b)
}
