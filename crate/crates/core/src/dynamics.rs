//! Stacked primal-dual system `ẋ = Ax + C` and its projected Euler flow.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::micro::{kkt_residual, CostParams, Demand, KktResidual, MicroNetwork};
use crate::numerics::{Matrix, Vector};
use crate::state::{Layout, StackedState};

/// States with `‖x‖∞` above this are treated as diverged.
pub const DIVERGENCE_GUARD: f64 = 1e9;

/// The affine saddle-point dynamics of one agent.
#[derive(Clone, Debug)]
pub struct SystemMatrices {
    network: MicroNetwork,
    costs: CostParams,
    demand: Demand,
    a: Matrix,
    c: Vector,
}

/// Builds
///
/// ```text
/// A = [ −Q₂   0   −B̃ᵀ  −I ]      C = [ −f₂ ]
///     [  0   −Q₁   0    I ]          [ −f₁ ]
///     [  B̃    0    0    0 ]          [ −ω  ]
///     [  I   −I    0    0 ]          [  0  ]
/// ```
pub fn assemble_system(net: &MicroNetwork, costs: &CostParams, omega: &Demand) -> Result<SystemMatrices> {
    let (m, n) = (net.m(), net.n());
    if costs.m() != m {
        return Err(Error::DimensionMismatch(format!("costs have {} edges, network has {m}", costs.m())));
    }
    if omega.as_vector().len() != n {
        return Err(Error::DimensionMismatch(format!(
            "demand has length {}, network has {n} nodes",
            omega.as_vector().len()
        )));
    }
    let l = net.layout();
    let d = l.dim();
    let b = net.incidence();
    let eye = Matrix::identity(m, m);
    let mut a = Matrix::zeros(d, d);
    a.view_mut((0, 0), (m, m)).copy_from(&(-costs.q2_matrix()));
    a.view_mut((0, l.lambda().start), (m, n)).copy_from(&(-b.transpose()));
    a.view_mut((0, l.mu().start), (m, m)).copy_from(&(-&eye));
    a.view_mut((m, m), (m, m)).copy_from(&(-costs.q1_matrix()));
    a.view_mut((m, l.mu().start), (m, m)).copy_from(&eye);
    a.view_mut((l.lambda().start, 0), (n, m)).copy_from(b);
    a.view_mut((l.mu().start, 0), (m, m)).copy_from(&eye);
    a.view_mut((l.mu().start, m), (m, m)).copy_from(&(-&eye));

    let mut c = Vector::zeros(d);
    c.rows_mut(0, m).copy_from(&(-&costs.f2));
    c.rows_mut(m, m).copy_from(&(-&costs.f1));
    c.rows_mut(l.lambda().start, n).copy_from(&(-omega.as_vector()));
    Ok(SystemMatrices {
        network: net.clone(),
        costs: costs.clone(),
        demand: omega.clone(),
        a,
        c,
    })
}

impl SystemMatrices {
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn c(&self) -> &Vector {
        &self.c
    }

    pub fn network(&self) -> &MicroNetwork {
        &self.network
    }

    pub fn costs(&self) -> &CostParams {
        &self.costs
    }

    pub fn demand(&self) -> &Demand {
        &self.demand
    }

    pub fn layout(&self) -> Layout {
        self.network.layout()
    }

    /// Rows of `C` holding `−ω`.
    pub fn demand_slice(&self) -> Range<usize> {
        self.layout().lambda()
    }

    /// Replaces `ω`; only the demand slice of `C` changes.
    pub fn set_demand(&mut self, omega: Demand) -> Result<()> {
        if omega.as_vector().len() != self.network.n() {
            return Err(Error::DimensionMismatch("demand length does not match the network".into()));
        }
        let r = self.demand_slice();
        self.c.rows_mut(r.start, r.len()).copy_from(&(-omega.as_vector()));
        self.demand = omega;
        Ok(())
    }

    /// `C` for another demand without touching `self`.
    pub fn c_with_demand(&self, omega: &Vector) -> Vector {
        let mut c = self.c.clone();
        let r = self.demand_slice();
        c.rows_mut(r.start, r.len()).copy_from(&(-omega));
        c
    }

    /// `Ax + C`.
    pub fn drift(&self, x: &Vector) -> Vector {
        &self.a * x + &self.c
    }
}

/// One explicit Euler step `x + dt(Ax + C)`, clamping `u`, `c`, `μ` when
/// `projected` is set.
pub fn pd_step(sys: &SystemMatrices, x: &StackedState, dt: f64, projected: bool) -> Result<StackedState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    if x.layout() != sys.layout() {
        return Err(Error::DimensionMismatch("state layout does not match the system".into()));
    }
    let mut next = x.as_vector() + sys.drift(x.as_vector()) * dt;
    if projected {
        sys.layout().project(&mut next);
    }
    StackedState::from_vector(sys.layout(), next)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// Stop once `‖x' − x‖∞ / dt` falls to this value.
    pub stop_tol: f64,
    pub projected: bool,
    /// Record every `record_stride`-th state (first and last always kept).
    pub record_stride: usize,
}

impl Default for PdConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            max_steps: 1_000_000,
            stop_tol: 1e-6,
            projected: true,
            record_stride: 1000,
        }
    }
}

/// Diagnostics at the last iterate.
#[derive(Clone, Debug)]
pub struct FixedPointReport {
    pub steps: usize,
    pub converged: bool,
    /// `‖x' − x‖∞ / dt` at the last step.
    pub rate: f64,
    pub kkt: KktResidual,
    /// Largest unprojected drift over coordinates held at zero by the
    /// projection. Nonpositive at a projected fixed point.
    pub clamped_drift_max: f64,
}

#[derive(Clone, Debug)]
pub struct PdRun {
    pub times: Vec<f64>,
    pub trajectory: Vec<StackedState>,
    pub final_state: StackedState,
    pub report: FixedPointReport,
}

pub fn pd_run(sys: &SystemMatrices, x0: &StackedState, cfg: &PdConfig) -> Result<PdRun> {
    if !(cfg.dt > 0.0) || !(cfg.stop_tol >= 0.0) || cfg.record_stride == 0 {
        return Err(Error::InvalidParams("pd_run needs dt > 0, stop_tol >= 0, record_stride >= 1".into()));
    }
    if x0.layout() != sys.layout() {
        return Err(Error::DimensionMismatch("state layout does not match the system".into()));
    }
    let layout = sys.layout();
    let mut x = x0.as_vector().clone();
    if cfg.projected {
        layout.project(&mut x);
    }
    let mut times = vec![0.0];
    let mut traj = vec![StackedState::from_vector(layout, x.clone())?];
    let mut steps = 0;
    let mut rate = f64::INFINITY;
    let mut converged = false;

    while steps < cfg.max_steps {
        let mut next = &x + sys.drift(&x) * cfg.dt;
        if cfg.projected {
            layout.project(&mut next);
        }
        rate = (&next - &x).amax() / cfg.dt;
        x = next;
        steps += 1;
        let norm = x.amax();
        if !(norm <= DIVERGENCE_GUARD) {
            return Err(Error::Diverged { step: steps, norm });
        }
        let stop = rate <= cfg.stop_tol;
        if steps % cfg.record_stride == 0 || stop || steps == cfg.max_steps {
            times.push(steps as f64 * cfg.dt);
            traj.push(StackedState::from_vector(layout, x.clone())?);
        }
        if stop {
            converged = true;
            break;
        }
    }
    // A start that is already stationary stops after one zero-length move.
    let final_state = StackedState::from_vector(layout, x.clone())?;
    let kkt = kkt_residual(sys.network(), sys.costs(), &final_state, sys.demand())?;
    let drift = sys.drift(&x);
    let clamped_drift_max = (0..layout.dim())
        .filter(|&i| cfg.projected && layout.is_constrained(i) && x[i] == 0.0)
        .map(|i| drift[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let run = PdRun {
        times,
        trajectory: traj,
        final_state,
        report: FixedPointReport {
            steps,
            converged,
            rate,
            kkt,
            clamped_drift_max,
        },
    };
    if converged {
        Ok(run)
    } else {
        Err(Error::MaxStepsExceeded(Box::new(run)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro::solve_deterministic_qp;

    fn one_edge() -> (MicroNetwork, CostParams) {
        let net = MicroNetwork::new(Matrix::from_row_slice(2, 1, &[-1.0, 1.0]), vec![0, 1]).unwrap();
        let one = Vector::from_element(1, 1.0);
        let costs = CostParams::new(one.clone(), one.clone(), one.clone(), one).unwrap();
        (net, costs)
    }

    #[test]
    fn example_system_has_expected_blocks() {
        let net = MicroNetwork::example();
        let sys = assemble_system(&net, &CostParams::example(), &Demand::example()).unwrap();
        let l = sys.layout();
        assert_eq!(sys.a().shape(), (33, 33));
        let b = net.incidence();
        assert_eq!(sys.a().view((l.lambda().start, 0), (6, 9)), *b);
        assert_eq!(sys.a().view((0, l.lambda().start), (9, 6)), -b.transpose());
        assert_eq!(sys.c()[l.lambda().start + 2], -23.0);
        assert_eq!(sys.c()[7], -2.0);
    }

    #[test]
    fn five_by_five_pattern() {
        let (net, costs) = one_edge();
        let sys = assemble_system(&net, &costs, &Demand::zeros(&net)).unwrap();
        #[rustfmt::skip]
        let expect = Matrix::from_row_slice(5, 5, &[
            -1.0,  0.0,  1.0, -1.0, -1.0,
             0.0, -1.0,  0.0,  0.0,  1.0,
            -1.0,  0.0,  0.0,  0.0,  0.0,
             1.0,  0.0,  0.0,  0.0,  0.0,
             1.0, -1.0,  0.0,  0.0,  0.0,
        ]);
        assert_eq!(*sys.a(), expect);
    }

    #[test]
    fn demand_refresh_touches_only_its_slice() {
        let net = MicroNetwork::example();
        let mut sys = assemble_system(&net, &CostParams::example(), &Demand::example()).unwrap();
        let before = sys.c().clone();
        let w = Demand::new(&net, Vector::from_vec(vec![0.0, 0.0, 20.0, 9.0, 0.0, 0.0])).unwrap();
        sys.set_demand(w).unwrap();
        let r = sys.demand_slice();
        for i in 0..33 {
            if !r.contains(&i) {
                assert_eq!(before[i], sys.c()[i]);
            }
        }
        assert_eq!(sys.c()[r.start + 2], -20.0);
    }

    #[test]
    fn zero_is_fixed_without_forcing() {
        let (net, _) = one_edge();
        let zero = Vector::zeros(1);
        let costs = CostParams::new(Vector::from_element(1, 1.0), Vector::from_element(1, 1.0), zero.clone(), zero).unwrap();
        let sys = assemble_system(&net, &costs, &Demand::zeros(&net)).unwrap();
        let x = StackedState::zeros(net.layout());
        assert_eq!(pd_step(&sys, &x, 0.1, false).unwrap(), x);
    }

    #[test]
    fn projected_single_step_on_one_edge() {
        let (net, costs) = one_edge();
        let d = 3.0;
        let omega = Demand::new(&net, Vector::from_vec(vec![-d, d])).unwrap();
        let sys = assemble_system(&net, &costs, &omega).unwrap();
        let x = StackedState::zeros(net.layout());
        let dt = 0.01;
        let next = pd_step(&sys, &x, dt, true).unwrap();
        // u̇ = −f₂ < 0 is clamped; λ moves by −dt·ω.
        assert_eq!(next.u()[0], 0.0);
        assert_eq!(next.c()[0], 0.0);
        assert_eq!(next.mu()[0], 0.0);
        assert!((next.lambda()[0] - dt * d).abs() < 1e-15);
        assert!((next.lambda()[1] + dt * d).abs() < 1e-15);
    }

    #[test]
    fn oracle_point_is_stationary() {
        let net = MicroNetwork::example();
        let costs = CostParams::example();
        let omega = Demand::example();
        let sys = assemble_system(&net, &costs, &omega).unwrap();
        let sol = solve_deterministic_qp(&net, &costs, &omega).unwrap();
        let x0 = sol.to_state(net.layout()).unwrap();
        let run = pd_run(&sys, &x0, &PdConfig::default()).unwrap();
        assert_eq!(run.report.steps, 1);
        assert!(run.report.kkt.max_abs() <= 1e-8);
        assert!(run.report.clamped_drift_max <= 1e-8);
    }

    #[test]
    fn max_steps_returns_the_run() {
        let net = MicroNetwork::example();
        let sys = assemble_system(&net, &CostParams::example(), &Demand::example()).unwrap();
        let cfg = PdConfig {
            max_steps: 10,
            ..Default::default()
        };
        match pd_run(&sys, &StackedState::zeros(net.layout()), &cfg) {
            Err(Error::MaxStepsExceeded(run)) => {
                assert_eq!(run.report.steps, 10);
                assert!(!run.report.converged);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn divergence_is_caught() {
        let net = MicroNetwork::example();
        let sys = assemble_system(&net, &CostParams::example(), &Demand::example()).unwrap();
        let cfg = PdConfig {
            dt: 10.0,
            max_steps: 10_000,
            projected: false,
            ..Default::default()
        };
        assert!(matches!(
            pd_run(&sys, &StackedState::zeros(net.layout()), &cfg),
            Err(Error::Diverged { .. })
        ));
    }
}
