//! Dense real linear algebra and Riccati solvers.

pub mod care;
pub mod linear;
pub mod riccati_ode;
pub mod schur;
pub mod spectrum;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

pub use care::{
    care_residual, control_gain, solve_care, solve_care_newton, solve_lyapunov, CareConfig, CareForm, CareMethod,
    CareSolution, MarginalModes,
};
pub use linear::{solve_linear, LinearSolver, PIVOT_REL_TOL};
pub use riccati_ode::{integrate_riccati_backward, RhoPath, RiccatiProblem, RiccatiTrajectory};
pub use spectrum::{eigenvalues, is_hurwitz, is_hurwitz_with_margin, spectral_abscissa, HurwitzReport};

/// True when every entry is finite.
pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}
