//! Continuous-time algebraic Riccati equations.
//!
//! Standard form: `AᵀΦ + ΦA − ΦSΦ + Q = 0` with `S = B R⁻¹ Bᵀ`.
//! Literal form:  `AᵀΦ + Φᵀ(−S)Φ + Q = 0`, kept as a diagnostic; its solution
//! is not symmetrized and its residual is reported rather than enforced.

use nalgebra::SVD;

use super::{
    linear::LinearSolver,
    schur::OrderedSchur,
    spectrum::{eigenvalues, is_hurwitz},
    Matrix,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CareMethod {
    /// Stable invariant subspace of the Hamiltonian via ordered real Schur.
    #[default]
    HamiltonianEigen,
    /// Newton–Kleinman iteration from a stabilizing initial guess.
    NewtonKleinman,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CareForm {
    #[default]
    StandardSymmetric,
    OneSided,
}

/// Treatment of Hamiltonian eigenvalues on the imaginary axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MarginalModes {
    /// Fail with `NoStabilizingSolution`.
    #[default]
    Reject,
    /// Remove marginal modes of `A` that `Q` cannot see (`Ae = λe`, `Qe = 0`)
    /// and solve on the complement. The result is the limit of the backward
    /// Riccati flow from any terminal weight vanishing on those modes, but the
    /// closed loop keeps the removed modes and is not Hurwitz.
    DeflateUnobservable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CareConfig {
    pub method: CareMethod,
    pub max_iter: usize,
    pub residual_tol: f64,
    pub form: CareForm,
    pub marginal: MarginalModes,
}

impl Default for CareConfig {
    fn default() -> Self {
        Self {
            method: CareMethod::HamiltonianEigen,
            max_iter: 50,
            residual_tol: 1e-8,
            form: CareForm::StandardSymmetric,
            marginal: MarginalModes::Reject,
        }
    }
}

impl CareConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > 0.0) {
            return Err(Error::InvalidParams("residual_tol must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParams("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CareSolution {
    pub phi: Matrix,
    /// Frobenius norm of the residual in the requested form.
    pub residual: f64,
    pub form: CareForm,
    pub method: CareMethod,
    /// Newton–Kleinman iterations spent (as solver or as polish).
    pub newton_iterations: usize,
    /// Dimension of the removed marginal subspace.
    pub deflated_modes: usize,
}

/// `B R⁻¹ Bᵀ` for symmetric positive definite `R`.
pub fn control_gain(b: &Matrix, r: &Matrix) -> Result<Matrix> {
    if !r.is_square() || r.nrows() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "R must be {0}x{0}, got {1}x{2}",
            b.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("R must be symmetric positive definite".into()))?;
    let rinv_bt = chol.solve(&b.transpose());
    Ok(b * rinv_bt)
}

/// Residual matrix of the chosen form.
pub fn care_residual(a: &Matrix, s: &Matrix, q: &Matrix, phi: &Matrix, form: CareForm) -> Matrix {
    match form {
        CareForm::StandardSymmetric => a.transpose() * phi + phi * a - phi * s * phi + q,
        CareForm::OneSided => a.transpose() * phi - phi.transpose() * s * phi + q,
    }
}

fn check_dims(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::DimensionMismatch("A must be square".into()));
    }
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!("B must have {n} rows")));
    }
    if q.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!("Q must be {n}x{n}")));
    }
    if r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::DimensionMismatch(format!("R must be {0}x{0}", b.ncols())));
    }
    let qs = (q - q.transpose()).amax();
    if qs > 1e-12 * (1.0 + q.amax()) {
        return Err(Error::InvalidParams("Q must be symmetric".into()));
    }
    let rs = (r - r.transpose()).amax();
    if rs > 1e-12 * (1.0 + r.amax()) {
        return Err(Error::InvalidParams("R must be symmetric".into()));
    }
    if a.iter().chain(b.iter()).chain(q.iter()).chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("non-finite entry in Riccati data".into()));
    }
    Ok(())
}

/// Solves the continuous-time algebraic Riccati equation.
pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, cfg: &CareConfig) -> Result<CareSolution> {
    cfg.validate()?;
    check_dims(a, b, q, r)?;
    let s = control_gain(b, r)?;

    if cfg.form == CareForm::OneSided {
        return solve_literal(a, &s, q, cfg);
    }

    if cfg.marginal == MarginalModes::DeflateUnobservable {
        let basis = marginal_unobservable_basis(a, q)?;
        if basis.ncols() > 0 {
            return solve_deflated(a, b, q, r, &basis, cfg);
        }
    }

    match cfg.method {
        CareMethod::HamiltonianEigen => {
            let phi = hamiltonian_stable_solution(a, &s, q)?;
            let mut sol = finish_standard(a, &s, q, phi, cfg, CareMethod::HamiltonianEigen)?;
            if sol.residual > cfg.residual_tol {
                let (phi, iters) = newton_kleinman(a, &s, q, &sol.phi, cfg)?;
                sol = finish_standard(a, &s, q, phi, cfg, CareMethod::HamiltonianEigen)?;
                sol.newton_iterations = iters;
            }
            if sol.residual > cfg.residual_tol {
                return Err(Error::NotConverged {
                    iterations: sol.newton_iterations,
                    residual: sol.residual,
                });
            }
            Ok(sol)
        }
        CareMethod::NewtonKleinman => {
            if !is_hurwitz(a)?.hurwitz {
                return Err(Error::NoStabilizingSolution(
                    "Newton-Kleinman from zero needs a Hurwitz A; supply a stabilizing guess via solve_care_newton".into(),
                ));
            }
            solve_care_newton(a, b, q, r, &Matrix::zeros(a.nrows(), a.nrows()), cfg)
        }
    }
}

/// Newton–Kleinman iteration from `initial`, which must make `A − SΦ₀` Hurwitz.
pub fn solve_care_newton(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    initial: &Matrix,
    cfg: &CareConfig,
) -> Result<CareSolution> {
    cfg.validate()?;
    check_dims(a, b, q, r)?;
    let s = control_gain(b, r)?;
    if !is_hurwitz(&(a - &s * initial))?.hurwitz {
        return Err(Error::NoStabilizingSolution("initial guess is not stabilizing".into()));
    }
    let (phi, iters) = newton_kleinman(a, &s, q, initial, cfg)?;
    let mut sol = finish_standard(a, &s, q, phi, cfg, CareMethod::NewtonKleinman)?;
    sol.newton_iterations = iters;
    if sol.residual > cfg.residual_tol {
        return Err(Error::NotConverged {
            iterations: iters,
            residual: sol.residual,
        });
    }
    Ok(sol)
}

fn finish_standard(
    a: &Matrix,
    s: &Matrix,
    q: &Matrix,
    phi: Matrix,
    cfg: &CareConfig,
    method: CareMethod,
) -> Result<CareSolution> {
    let phi = 0.5 * (&phi + phi.transpose());
    let residual = care_residual(a, s, q, &phi, CareForm::StandardSymmetric).norm();
    if !phi.iter().all(|v| v.is_finite()) {
        return Err(Error::NoStabilizingSolution("non-finite solution".into()));
    }
    Ok(CareSolution {
        phi,
        residual,
        form: cfg.form,
        method,
        newton_iterations: 0,
        deflated_modes: 0,
    })
}

fn hamiltonian(a: &Matrix, s: &Matrix, q: &Matrix) -> Matrix {
    let n = a.nrows();
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    h
}

/// `Φ = U₂₁ U₁₁⁻¹` from an `n`-dimensional invariant subspace basis `[U₁₁; U₂₁]`.
fn graph_solution(basis: &Matrix, n: usize) -> Result<Matrix> {
    let u11 = basis.rows(0, n).into_owned();
    let u21 = basis.rows(n, n).into_owned();
    let solver = LinearSolver::factor(&u11.transpose()).map_err(|_| {
        Error::NoStabilizingSolution("invariant subspace is not a graph over the state space".into())
    })?;
    Ok(solver.solve_matrix(&u21.transpose())?.transpose())
}

fn axis_tolerance(h: &Matrix) -> f64 {
    1e-9 * (1.0 + h.norm())
}

fn hamiltonian_stable_solution(a: &Matrix, s: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let h = hamiltonian(a, s, q);
    let tol = axis_tolerance(&h);
    let mut schur = OrderedSchur::new(&h)?;
    if let Some(b) = schur.blocks().iter().find(|b| b.re.abs() <= tol) {
        return Err(Error::NoStabilizingSolution(format!(
            "Hamiltonian eigenvalue {:.3e}{:+.3e}i lies on the imaginary axis",
            b.re, b.im
        )));
    }
    // Only the split matters; sorting by sign never swaps blocks with
    // (nearly) equal eigenvalues, whose Sylvester swap equation is singular.
    schur.sort_by_key(|b| if b.re < 0.0 { 0.0 } else { 1.0 }, 0.5)?;
    let stable: usize = schur.blocks().iter().filter(|b| b.re < 0.0).map(|b| b.size).sum();
    if stable != n {
        return Err(Error::NoStabilizingSolution(format!(
            "stable invariant subspace has dimension {stable}, expected {n}"
        )));
    }
    let basis = schur
        .leading_basis(n)
        .ok_or_else(|| Error::NoStabilizingSolution("stable subspace splits a complex pair".into()))?;
    graph_solution(&basis, n)
}

fn solve_literal(a: &Matrix, s: &Matrix, q: &Matrix, cfg: &CareConfig) -> Result<CareSolution> {
    let n = a.nrows();
    // [[0, −S], [−Q, −Aᵀ]] carries the graph subspaces of AᵀΦ − ΦSΦ + Q = 0.
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, n), (n, n)).copy_from(&(-s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let tie = 1e-8 * (1.0 + h.norm());
    let mut schur = OrderedSchur::new(&h)?;
    schur.sort_by_key(|b| b.re, tie)?;
    let basis = schur.leading_basis(n).ok_or_else(|| {
        Error::NoStabilizingSolution("literal-form subspace splits a complex pair".into())
    })?;
    let phi = graph_solution(&basis, n)?;
    if !phi.iter().all(|v| v.is_finite()) {
        return Err(Error::NoStabilizingSolution("non-finite literal-form solution".into()));
    }
    let residual = care_residual(a, s, q, &phi, CareForm::OneSided).norm();
    Ok(CareSolution {
        phi,
        residual,
        form: cfg.form,
        method: CareMethod::HamiltonianEigen,
        newton_iterations: 0,
        deflated_modes: 0,
    })
}

/// Newton–Kleinman: `(A − SΦₖ)ᵀΦₖ₊₁ + Φₖ₊₁(A − SΦₖ) = −(Q + ΦₖSΦₖ)`.
fn newton_kleinman(a: &Matrix, s: &Matrix, q: &Matrix, initial: &Matrix, cfg: &CareConfig) -> Result<(Matrix, usize)> {
    let mut phi = initial.clone();
    let mut residual = care_residual(a, s, q, &phi, CareForm::StandardSymmetric).norm();
    for it in 1..=cfg.max_iter {
        let closed = a - s * &phi;
        let rhs = -(q + &phi * s * &phi);
        let next = solve_lyapunov(&closed, &rhs)?;
        let next = 0.5 * (&next + next.transpose());
        let next_res = care_residual(a, s, q, &next, CareForm::StandardSymmetric).norm();
        let step = (&next - &phi).norm();
        phi = next;
        residual = next_res;
        if residual <= 0.1 * cfg.residual_tol || step <= 1e-14 * (1.0 + phi.norm()) {
            return Ok((phi, it));
        }
    }
    if residual <= cfg.residual_tol {
        Ok((phi, cfg.max_iter))
    } else {
        Err(Error::NotConverged {
            iterations: cfg.max_iter,
            residual,
        })
    }
}

/// Solves `AᵀX + XA = C` for symmetric `C` on the `n(n+1)/2` independent
/// entries of the symmetric unknown.
pub fn solve_lyapunov(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    // Row offsets for the packed upper triangle.
    let mut offset = vec![0usize; n + 1];
    for i in 0..n {
        offset[i + 1] = offset[i] + (n - i);
    }
    let pack = |i: usize, j: usize| {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        offset[i] + (j - i)
    };
    let dim = offset[n];
    let mut k = Matrix::zeros(dim, dim);
    let mut rhs = super::Vector::zeros(dim);
    for i in 0..n {
        for j in i..n {
            let row = pack(i, j);
            rhs[row] = c[(i, j)];
            for l in 0..n {
                // (AᵀX)_{ij} = Σ_l A_{li} X_{lj}
                k[(row, pack(l, j))] += a[(l, i)];
                // (XA)_{ij} = Σ_l X_{il} A_{lj}
                k[(row, pack(i, l))] += a[(l, j)];
            }
        }
    }
    let packed = LinearSolver::factor(&k)?.solve(&rhs)?;
    Ok(Matrix::from_fn(n, n, |i, j| packed[pack(i, j)]))
}

/// Orthonormal basis of the span of eigenvectors `e` of `A` with eigenvalue on
/// the imaginary axis and `Qe = 0`.
fn marginal_unobservable_basis(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let scale = 1.0 + a.norm() + q.norm();
    let tol = 1e-9 * scale;
    let mut freqs: Vec<f64> = Vec::new();
    for z in eigenvalues(a)? {
        if z.re.abs() <= tol && z.im >= -tol {
            let w = z.im.max(0.0);
            if !freqs.iter().any(|f| (f - w).abs() <= 1e-7 * scale) {
                freqs.push(w);
            }
        }
    }
    let mut vecs: Vec<super::Vector> = Vec::new();
    for w in freqs {
        if w <= 1e-7 * scale {
            let mut m = Matrix::zeros(2 * n, n);
            m.rows_mut(0, n).copy_from(a);
            m.rows_mut(n, n).copy_from(q);
            vecs.extend(null_space(&m, tol));
        } else {
            // (A − iωI)(x + iy) = 0 and Q x = Q y = 0, over the reals.
            let mut m = Matrix::zeros(4 * n, 2 * n);
            m.view_mut((0, 0), (n, n)).copy_from(a);
            m.view_mut((n, n), (n, n)).copy_from(a);
            for i in 0..n {
                m[(i, n + i)] = w;
                m[(n + i, i)] = -w;
            }
            m.view_mut((2 * n, 0), (n, n)).copy_from(q);
            m.view_mut((3 * n, n), (n, n)).copy_from(q);
            for v in null_space(&m, tol) {
                vecs.push(v.rows(0, n).into_owned());
                vecs.push(v.rows(n, n).into_owned());
            }
        }
    }
    if vecs.is_empty() {
        return Ok(Matrix::zeros(n, 0));
    }
    let stacked = Matrix::from_columns(&vecs);
    let svd = SVD::new(stacked, true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&v| v > 1e-8 * smax).count();
    Ok(u.columns(0, rank).into_owned())
}

fn null_space(m: &Matrix, tol: f64) -> Vec<super::Vector> {
    let cols = m.ncols();
    let svd = SVD::new(m.clone(), false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    (0..cols)
        .filter(|&i| svd.singular_values[i] <= tol)
        .map(|i| vt.row(i).transpose())
        .collect()
}

fn solve_deflated(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    basis: &Matrix,
    cfg: &CareConfig,
) -> Result<CareSolution> {
    let n = a.nrows();
    let k = basis.ncols();
    let mut aug = Matrix::zeros(n, k + n);
    aug.columns_mut(0, k).copy_from(basis);
    aug.columns_mut(k, n).copy_from(&Matrix::identity(n, n));
    let t = aug.qr().q();

    let at = t.transpose() * a * &t;
    let qt = t.transpose() * q * &t;
    let bt = t.transpose() * b;
    let leak = at.view((k, 0), (n - k, k)).amax();
    if leak > 1e-8 * (1.0 + a.norm()) {
        return Err(Error::NoStabilizingSolution("marginal subspace is not invariant".into()));
    }
    let a_ff = at.view((k, k), (n - k, n - k)).into_owned();
    let b_f = bt.rows(k, n - k).into_owned();
    let q_ff = qt.view((k, k), (n - k, n - k)).into_owned();
    let q_ff = 0.5 * (&q_ff + q_ff.transpose());
    let inner_cfg = CareConfig {
        marginal: MarginalModes::Reject,
        ..*cfg
    };
    let reduced = solve_care(&a_ff, &b_f, &q_ff, r, &inner_cfg)?;

    let mut full = Matrix::zeros(n, n);
    full.view_mut((k, k), (n - k, n - k)).copy_from(&reduced.phi);
    let phi = &t * full * t.transpose();
    let phi = 0.5 * (&phi + phi.transpose());
    let s = control_gain(b, r)?;
    let residual = care_residual(a, &s, q, &phi, CareForm::StandardSymmetric).norm();
    if residual > cfg.residual_tol {
        return Err(Error::NotConverged {
            iterations: reduced.newton_iterations,
            residual,
        });
    }
    Ok(CareSolution {
        phi,
        residual,
        form: cfg.form,
        method: reduced.method,
        newton_iterations: reduced.newton_iterations,
        deflated_modes: k,
    })
}
