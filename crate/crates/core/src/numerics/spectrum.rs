use nalgebra::{Complex, Schur};

use super::Matrix;
use crate::error::{Error, Result};

const SCHUR_EPS: f64 = 1e-14;

/// Outcome of a Hurwitz test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HurwitzReport {
    pub hurwitz: bool,
    /// Largest real part over the spectrum.
    pub abscissa: f64,
}

/// All eigenvalues of a square real matrix.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(m.clone(), SCHUR_EPS, 1000 * m.nrows().max(10))
        .ok_or(Error::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

pub fn spectral_abscissa(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Hurwitz test with zero margin.
pub fn is_hurwitz(m: &Matrix) -> Result<HurwitzReport> {
    is_hurwitz_with_margin(m, 0.0)
}

/// True iff every eigenvalue has real part `< -margin`.
pub fn is_hurwitz_with_margin(m: &Matrix, margin: f64) -> Result<HurwitzReport> {
    let abscissa = spectral_abscissa(m)?;
    Ok(HurwitzReport {
        hurwitz: abscissa < -margin,
        abscissa,
    })
}
