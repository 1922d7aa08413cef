//! Linear-quadratic mean-field layer: penalties, control matrix, the
//! quadratic value-function coefficients and the resulting feedback.

use crate::dynamics::SystemMatrices;
use crate::error::{Error, Result};
use crate::numerics::{
    care_residual, control_gain, solve_care, CareConfig, CareForm, CareSolution, LinearSolver, Matrix, Vector,
};
use crate::state::Layout;

/// Shape of the control input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ControlMode {
    /// One scalar input added to every capacity.
    #[default]
    ScalarOnC,
    /// One input per edge capacity.
    PerEdgeOnC,
}

impl ControlMode {
    pub fn inputs(&self, layout: Layout) -> usize {
        match self {
            ControlMode::ScalarOnC => 1,
            ControlMode::PerEdgeOnC => layout.m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlMatrix {
    b: Matrix,
    mode: ControlMode,
}

impl ControlMatrix {
    pub fn new(layout: Layout, mode: ControlMode) -> Self {
        let m = layout.m;
        let q = mode.inputs(layout);
        let b = Matrix::from_fn(layout.dim(), q, |i, j| {
            let in_c = i >= m && i < 2 * m;
            match mode {
                ControlMode::ScalarOnC if in_c => 1.0,
                ControlMode::PerEdgeOnC if in_c && i - m == j => 1.0,
                _ => 0.0,
            }
        });
        Self { b, mode }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.b
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfgPenalties {
    pub q: Matrix,
    pub r: Matrix,
    pub s: Matrix,
}

impl MfgPenalties {
    /// Validates diagonality and definiteness.
    pub fn new(q: Matrix, r: Matrix, s: Matrix) -> Result<Self> {
        for (name, mat, strict) in [("Q", &q, false), ("R", &r, true), ("S", &s, false)] {
            if !mat.is_square() {
                return Err(Error::InvalidParams(format!("{name} must be square")));
            }
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    let v = mat[(i, j)];
                    if !v.is_finite() || (i != j && v != 0.0) {
                        return Err(Error::InvalidParams(format!("{name} must be finite and diagonal")));
                    }
                }
                let d = mat[(i, i)];
                if d < 0.0 || (strict && d <= 0.0) {
                    return Err(Error::InvalidParams(format!(
                        "{name} diagonal entry {i} = {d} violates {}",
                        if strict { "positive definiteness" } else { "positive semidefiniteness" }
                    )));
                }
            }
        }
        if q.shape() != s.shape() {
            return Err(Error::DimensionMismatch("Q and S must have the same size".into()));
        }
        Ok(Self { q, r, s })
    }
}

/// `Q = q·I` and `S = s·I` on the capacity block, `R = r·I`.
pub fn build_penalties(layout: Layout, q_weight: f64, r_weight: f64, s_weight: f64, mode: ControlMode) -> Result<MfgPenalties> {
    if !(q_weight >= 0.0) || !(s_weight >= 0.0) || !(r_weight > 0.0) {
        return Err(Error::InvalidParams(format!(
            "weights need q >= 0, s >= 0, r > 0; got q = {q_weight}, r = {r_weight}, s = {s_weight}"
        )));
    }
    let c_diag = |w: f64| Matrix::from_diagonal(&(layout.c_indicator() * w));
    let r = Matrix::identity(mode.inputs(layout), mode.inputs(layout)) * r_weight;
    MfgPenalties::new(c_diag(q_weight), r, c_diag(s_weight))
}

/// Quadratic value function `½xᵀΦx + Hᵀx + χ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueCoeffs {
    pub phi: Matrix,
    pub h: Vector,
    /// `None` when the constant term is not determined.
    pub chi: Option<f64>,
    /// Rate `HᵀSH + HᵀC + ½ρᵀQρ` at which χ would drift; zero when a
    /// stationary χ exists.
    pub chi_residual: f64,
    pub stationary: bool,
}

/// Stationary Φ with the factorization of `Aᵀ − 2ΦBR⁻¹Bᵀ` kept for repeated
/// solves of H.
#[derive(Clone, Debug)]
pub struct StationaryValue {
    care: CareSolution,
    gain: Matrix,
    h_solver: LinearSolver,
    q: Matrix,
}

impl StationaryValue {
    pub fn new(sys: &SystemMatrices, ctrl: &ControlMatrix, pen: &MfgPenalties, care_cfg: &CareConfig) -> Result<Self> {
        let d = sys.layout().dim();
        if ctrl.matrix().nrows() != d || pen.q.nrows() != d || pen.r.nrows() != ctrl.inputs() {
            return Err(Error::DimensionMismatch("control or penalty sizes do not match the system".into()));
        }
        let care = solve_care(sys.a(), ctrl.matrix(), &pen.q, &pen.r, care_cfg)?;
        let gain = control_gain(ctrl.matrix(), &pen.r)?;
        let h_solver = LinearSolver::factor(&(sys.a().transpose() - 2.0 * &care.phi * &gain))?;
        Ok(Self {
            care,
            gain,
            h_solver,
            q: pen.q.clone(),
        })
    }

    pub fn phi(&self) -> &Matrix {
        &self.care.phi
    }

    pub fn care(&self) -> &CareSolution {
        &self.care
    }

    /// `B R⁻¹ Bᵀ`.
    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    /// `Aᵀ − 2ΦBR⁻¹Bᵀ`.
    pub fn h_matrix(&self) -> &Matrix {
        self.h_solver.matrix()
    }

    /// `H = [Aᵀ − 2ΦBR⁻¹Bᵀ]⁻¹ (Qρ − ΦᵀC)`.
    pub fn solve_h(&self, rho: &Vector, c: &Vector) -> Result<Vector> {
        self.h_solver.solve(&(&self.q * rho - self.care.phi.transpose() * c))
    }

    pub fn coeffs(&self, rho: &Vector, c: &Vector) -> Result<ValueCoeffs> {
        let h = self.solve_h(rho, c)?;
        let chi_residual = h.dot(&(&self.gain * &h)) + h.dot(c) + 0.5 * rho.dot(&(&self.q * rho));
        let scale = 1.0 + h.norm_squared() + rho.norm_squared();
        Ok(ValueCoeffs {
            phi: self.care.phi.clone(),
            h,
            chi: (chi_residual.abs() <= 1e-10 * scale).then_some(0.0),
            chi_residual,
            stationary: true,
        })
    }

    /// Residual of the stationary H equation for a given H.
    pub fn h_residual(&self, h: &Vector, rho: &Vector, c: &Vector) -> f64 {
        (self.h_matrix() * h - (&self.q * rho - self.care.phi.transpose() * c)).amax()
    }

    /// Frobenius residual of the standard-form CARE at Φ.
    pub fn care_residual(&self, a: &Matrix) -> f64 {
        care_residual(a, &self.gain, &self.q, &self.care.phi, CareForm::StandardSymmetric).norm()
    }
}

/// Stationary coefficients for one ρ, built from scratch.
pub fn solve_value_stationary(
    sys: &SystemMatrices,
    ctrl: &ControlMatrix,
    pen: &MfgPenalties,
    rho: &Vector,
    care_cfg: &CareConfig,
) -> Result<ValueCoeffs> {
    if rho.len() != sys.layout().dim() {
        return Err(Error::DimensionMismatch("rho length does not match the system".into()));
    }
    StationaryValue::new(sys, ctrl, pen, care_cfg)?.coeffs(rho, sys.c())
}

fn r_solve(r: &Matrix, y: &Vector) -> Result<Vector> {
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("R must be positive definite".into()))?;
    Ok(chol.solve(y))
}

/// `v* = −R⁻¹Bᵀ(Φᵀx + H)`.
pub fn optimal_control(coeffs: &ValueCoeffs, ctrl: &ControlMatrix, pen: &MfgPenalties, x: &Vector) -> Result<Vector> {
    let y = ctrl.matrix().transpose() * (coeffs.phi.transpose() * x + &coeffs.h);
    Ok(-r_solve(&pen.r, &y)?)
}

/// Euler step of `ṁ = [A − BR⁻¹BᵀΦ]m − BR⁻¹BᵀH + C`.
pub fn mean_state_step(
    sys: &SystemMatrices,
    ctrl: &ControlMatrix,
    pen: &MfgPenalties,
    coeffs: &ValueCoeffs,
    mean: &Vector,
    dt: f64,
) -> Result<Vector> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    let gain = control_gain(ctrl.matrix(), &pen.r)?;
    let drift = sys.a() * mean - &gain * (&coeffs.phi * mean + &coeffs.h) + sys.c();
    Ok(mean + drift * dt)
}

/// `½vᵀRv + ½(ρ − x)ᵀQ(ρ − x) + pᵀ(Ax + Bv + C)` at the given `v`.
pub fn hamiltonian(
    x: &Vector,
    costate: &Vector,
    rho: &Vector,
    v: &Vector,
    sys: &SystemMatrices,
    ctrl: &ControlMatrix,
    pen: &MfgPenalties,
) -> f64 {
    let dev = rho - x;
    let flow = sys.a() * x + ctrl.matrix() * v + sys.c();
    0.5 * v.dot(&(&pen.r * v)) + 0.5 * dev.dot(&(&pen.q * &dev)) + costate.dot(&flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::assemble_system;
    use crate::micro::{CostParams, Demand, MicroNetwork};
    use crate::numerics::is_hurwitz;

    fn example_setup(q: f64, r: f64) -> (SystemMatrices, ControlMatrix, MfgPenalties) {
        let net = MicroNetwork::example();
        let sys = assemble_system(&net, &CostParams::example(), &Demand::example()).unwrap();
        let ctrl = ControlMatrix::new(net.layout(), ControlMode::ScalarOnC);
        let pen = build_penalties(net.layout(), q, r, 1.0, ControlMode::ScalarOnC).unwrap();
        (sys, ctrl, pen)
    }

    #[test]
    fn control_matrix_lives_on_capacities() {
        let l = Layout::new(9, 6);
        let scalar = ControlMatrix::new(l, ControlMode::ScalarOnC);
        assert_eq!(scalar.matrix().shape(), (33, 1));
        assert_eq!(scalar.matrix().sum(), 9.0);
        assert!((9..18).all(|i| scalar.matrix()[(i, 0)] == 1.0));
        let per = ControlMatrix::new(l, ControlMode::PerEdgeOnC);
        assert_eq!(per.matrix().shape(), (33, 9));
        assert_eq!(per.matrix().view((9, 0), (9, 9)), Matrix::identity(9, 9));
        assert_eq!(per.matrix().sum(), 9.0);
    }

    #[test]
    fn penalty_regimes() {
        let l = Layout::new(9, 6);
        let p = build_penalties(l, 10.0, 1.0, 1.0, ControlMode::ScalarOnC).unwrap();
        assert_eq!(p.q[(9, 9)], 10.0);
        assert_eq!(p.q[(0, 0)], 0.0);
        assert_eq!(p.q.sum(), 90.0);
        assert_eq!(p.r.shape(), (1, 1));
        let z = build_penalties(l, 0.0, 1.0, 0.0, ControlMode::PerEdgeOnC).unwrap();
        assert_eq!(z.q.amax(), 0.0);
        assert_eq!(z.r.shape(), (9, 9));
        assert!(build_penalties(l, 1.0, 0.0, 1.0, ControlMode::ScalarOnC).is_err());
        let offdiag = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(MfgPenalties::new(offdiag, Matrix::identity(1, 1), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn scalar_worked_values() {
        // Scalar data a = 0, b = q = r = 1, so Φ = 1.
        let phi = Matrix::from_element(1, 1, 1.0);
        let gain = Matrix::from_element(1, 1, 1.0);
        let m = Matrix::from_element(1, 1, 0.0).transpose() - 2.0 * &phi * &gain;
        let h = LinearSolver::factor(&m).unwrap().solve(&Vector::from_element(1, 5.0)).unwrap();
        assert_eq!(h[0], -2.5);

        let coeffs = ValueCoeffs {
            phi,
            h: Vector::zeros(1),
            chi: None,
            chi_residual: 0.0,
            stationary: true,
        };
        let pen = MfgPenalties::new(Matrix::identity(1, 1), Matrix::identity(1, 1), Matrix::zeros(1, 1)).unwrap();
        let ctrl = ControlMatrix {
            b: Matrix::identity(1, 1),
            mode: ControlMode::ScalarOnC,
        };
        let v = optimal_control(&coeffs, &ctrl, &pen, &Vector::from_element(1, 2.0)).unwrap();
        assert_eq!(v[0], -2.0);
    }

    #[test]
    fn example_stationary_solution() {
        let (sys, ctrl, pen) = example_setup(1.0, 1.0);
        let sv = StationaryValue::new(&sys, &ctrl, &pen, &CareConfig::default()).unwrap();
        assert!(sv.care_residual(sys.a()) <= 1e-8);
        assert!((sv.phi() - sv.phi().transpose()).amax() <= 1e-10);
        assert!(sv.phi().clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        assert!(is_hurwitz(&(sys.a() - sv.gain() * sv.phi())).unwrap().hurwitz);
        let rho = sys.layout().c_indicator() * 40.0;
        let h = sv.solve_h(&rho, sys.c()).unwrap();
        assert!(sv.h_residual(&h, &rho, sys.c()) <= 1e-10);
    }

    #[test]
    fn stationarity_identity_and_scalar_collapse() {
        let (sys, ctrl, pen) = example_setup(1.0, 1.0);
        let rho = sys.layout().c_indicator() * 40.0;
        let coeffs = solve_value_stationary(&sys, &ctrl, &pen, &rho, &CareConfig::default()).unwrap();
        let x = Vector::from_fn(33, |i, _| (i as f64 * 0.7).sin() * 10.0);
        let v = optimal_control(&coeffs, &ctrl, &pen, &x).unwrap();
        let y = coeffs.phi.transpose() * &x + &coeffs.h;
        let res = &pen.r * &v + ctrl.matrix().transpose() * &y;
        assert!(res.amax() <= 1e-12);
        let collapsed: f64 = (9..18).map(|i| y[i]).sum();
        assert!((v[0] + collapsed).abs() <= 1e-12 * (1.0 + collapsed.abs()));
    }

    #[test]
    fn hamiltonian_minimized_at_feedback() {
        let (sys, ctrl, pen) = example_setup(1.0, 1.0);
        let rho = sys.layout().c_indicator() * 30.0;
        let coeffs = solve_value_stationary(&sys, &ctrl, &pen, &rho, &CareConfig::default()).unwrap();
        let x = Vector::from_fn(33, |i, _| 20.0 + (i as f64).cos() * 5.0);
        let p = &coeffs.phi * &x + &coeffs.h;
        let v = optimal_control(&coeffs, &ctrl, &pen, &x).unwrap();
        let h0 = hamiltonian(&x, &p, &rho, &v, &sys, &ctrl, &pen);
        for d in [1e-3, -1e-3, 1e-1, -1e-1] {
            let mut w = v.clone();
            w[0] += d;
            assert!(hamiltonian(&x, &p, &rho, &w, &sys, &ctrl, &pen) >= h0);
        }
    }

    #[test]
    fn hamiltonian_reduces_to_control_cost() {
        let (sys, ctrl, _) = example_setup(1.0, 1.0);
        let pen = build_penalties(sys.layout(), 0.0, 1.0, 0.0, ControlMode::ScalarOnC).unwrap();
        let zero = Vector::zeros(33);
        let v = Vector::from_element(1, 3.0);
        assert_eq!(hamiltonian(&zero, &zero, &zero, &v, &sys, &ctrl, &pen), 4.5);
    }

    #[test]
    fn mean_state_fixed_point() {
        let (sys, ctrl, pen) = example_setup(1.0, 1.0);
        let rho = sys.layout().c_indicator() * 40.0;
        let coeffs = solve_value_stationary(&sys, &ctrl, &pen, &rho, &CareConfig::default()).unwrap();
        let gain = control_gain(ctrl.matrix(), &pen.r).unwrap();
        let closed = sys.a() - &gain * &coeffs.phi;
        let fixed = LinearSolver::factor(&closed)
            .unwrap()
            .solve(&(&gain * &coeffs.h - sys.c()))
            .unwrap();
        let next = mean_state_step(&sys, &ctrl, &pen, &coeffs, &fixed, 0.1).unwrap();
        assert!((&next - &fixed).amax() < 1e-9);
    }

    #[test]
    fn control_ignores_rho_outside_capacities() {
        let (sys, ctrl, pen) = example_setup(1.0, 1.0);
        let sv = StationaryValue::new(&sys, &ctrl, &pen, &CareConfig::default()).unwrap();
        let rho = sys.layout().c_indicator() * 40.0;
        let mut rho2 = rho.clone();
        rho2[0] += 100.0;
        rho2[30] -= 50.0;
        let x = Vector::from_element(33, 10.0);
        let v1 = optimal_control(&sv.coeffs(&rho, sys.c()).unwrap(), &ctrl, &pen, &x).unwrap();
        let v2 = optimal_control(&sv.coeffs(&rho2, sys.c()).unwrap(), &ctrl, &pen, &x).unwrap();
        assert_eq!(v1, v2);
    }
}
