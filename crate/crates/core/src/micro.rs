//! Physical flow network, quadratic costs, KKT residuals and an exact
//! enumeration oracle for the deterministic capacity-design QP
//!
//! ```text
//! min  ½cᵀQ₁c + f₁ᵀc + ½uᵀQ₂u + f₂ᵀu   s.t.  B̃u = ω,  0 ≤ u ≤ c.
//! ```
//!
//! Incidence convention: `+1` marks the node an edge flows into, `−1` the
//! node it leaves. A column with a single `+1` is a source edge feeding the
//! network from outside, so `B̃u = ω` reads "inflow minus outflow equals the
//! demand pulled at the node".

use nalgebra::SVD;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{LinearSolver, Matrix, Vector};
use crate::state::{Layout, StackedState};

/// Enumeration is refused above this many edges.
pub const MAX_ORACLE_EDGES: usize = 20;

/// Tolerance used when deciding whether a candidate point is feasible.
const FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MicroNetwork {
    incidence: Matrix,
    sink_nodes: Vec<usize>,
    edge_labels: Vec<String>,
}

impl MicroNetwork {
    pub fn new(incidence: Matrix, sink_nodes: Vec<usize>) -> Result<Self> {
        let labels = (1..=incidence.ncols()).map(|e| format!("e{e}")).collect();
        Self::with_labels(incidence, sink_nodes, labels)
    }

    pub fn with_labels(incidence: Matrix, mut sink_nodes: Vec<usize>, edge_labels: Vec<String>) -> Result<Self> {
        let (n, m) = incidence.shape();
        if n < 2 || m < 1 {
            return Err(Error::InvalidIncidence(format!(
                "need at least 2 nodes and 1 edge, got {n} nodes and {m} edges"
            )));
        }
        for e in 0..m {
            let (mut heads, mut tails) = (0, 0);
            for v in 0..n {
                match incidence[(v, e)] {
                    x if x == 1.0 => heads += 1,
                    x if x == -1.0 => tails += 1,
                    x if x == 0.0 => {}
                    x => {
                        return Err(Error::InvalidIncidence(format!(
                            "entry ({v}, {e}) = {x} is not in {{-1, 0, 1}}"
                        )))
                    }
                }
            }
            if heads > 1 {
                return Err(Error::InvalidIncidence(format!("edge {e} has {heads} heads (+1 entries)")));
            }
            if tails > 1 {
                return Err(Error::InvalidIncidence(format!("edge {e} has {tails} tails (-1 entries)")));
            }
            if heads + tails == 0 {
                return Err(Error::InvalidIncidence(format!("edge {e} has an all-zero column")));
            }
        }
        sink_nodes.sort_unstable();
        sink_nodes.dedup();
        if let Some(&bad) = sink_nodes.iter().find(|&&s| s >= n) {
            return Err(Error::InvalidIncidence(format!("sink node {bad} out of range 0..{n}")));
        }
        if edge_labels.len() != m {
            return Err(Error::DimensionMismatch(format!("{} edge labels for {m} edges", edge_labels.len())));
        }
        Ok(Self {
            incidence,
            sink_nodes,
            edge_labels,
        })
    }

    /// The six-node, nine-edge example network. Edges 1 and 2 are sources;
    /// nodes 2 and 3 (zero-based) are the sinks.
    pub fn example() -> Self {
        #[rustfmt::skip]
        let b = Matrix::from_row_slice(6, 9, &[
            1.0, 0.0, -1.0, -1.0,  0.0,  0.0,  0.0,  0.0,  0.0,
            0.0, 1.0,  0.0,  0.0, -1.0, -1.0,  0.0,  0.0,  0.0,
            0.0, 0.0,  0.0,  0.0,  0.0,  1.0,  1.0,  0.0,  0.0,
            0.0, 0.0,  1.0,  0.0,  0.0,  0.0,  0.0,  0.0,  1.0,
            0.0, 0.0,  0.0,  1.0,  1.0,  0.0,  0.0, -1.0,  0.0,
            0.0, 0.0,  0.0,  0.0,  0.0,  0.0, -1.0,  1.0, -1.0,
        ]);
        Self::new(b, vec![2, 3]).expect("built-in network is valid")
    }

    pub fn n(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn m(&self) -> usize {
        self.incidence.ncols()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.m(), self.n())
    }

    pub fn incidence(&self) -> &Matrix {
        &self.incidence
    }

    pub fn sink_nodes(&self) -> &[usize] {
        &self.sink_nodes
    }

    pub fn edge_labels(&self) -> &[String] {
        &self.edge_labels
    }

    /// Edges with both a head and a tail.
    pub fn internal_edges(&self) -> Vec<usize> {
        (0..self.m())
            .filter(|&e| {
                let col = self.incidence.column(e);
                col.iter().any(|&v| v == 1.0) && col.iter().any(|&v| v == -1.0)
            })
            .collect()
    }

    pub fn is_sink(&self, v: usize) -> bool {
        self.sink_nodes.binary_search(&v).is_ok()
    }
}

/// Diagonal quadratic costs `f₁(c) = ½cᵀQ₁c + f₁ᵀc`, `f₂(u) = ½uᵀQ₂u + f₂ᵀu`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostParams {
    /// Diagonal of Q₁.
    pub q1: Vector,
    /// Diagonal of Q₂.
    pub q2: Vector,
    pub f1: Vector,
    pub f2: Vector,
}

impl CostParams {
    pub fn new(q1: Vector, q2: Vector, f1: Vector, f2: Vector) -> Result<Self> {
        let m = q1.len();
        if q2.len() != m || f1.len() != m || f2.len() != m {
            return Err(Error::DimensionMismatch("cost vectors must share one length".into()));
        }
        let all = q1.iter().chain(q2.iter()).chain(f1.iter()).chain(f2.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCosts("non-finite cost entry".into()));
        }
        if let Some(i) = (0..m).find(|&i| q1[i] < 0.0 || q2[i] < 0.0) {
            return Err(Error::InvalidCosts(format!("negative curvature on edge {i}")));
        }
        Ok(Self { q1, q2, f1, f2 })
    }

    /// Builds costs from full matrices, rejecting off-diagonal entries.
    pub fn from_matrices(q1: &Matrix, q2: &Matrix, f1: Vector, f2: Vector) -> Result<Self> {
        for (name, q) in [("Q1", q1), ("Q2", q2)] {
            if !q.is_square() {
                return Err(Error::InvalidCosts(format!("{name} must be square")));
            }
            let off = Matrix::from_fn(q.nrows(), q.ncols(), |i, j| if i == j { 0.0 } else { q[(i, j)] });
            if off.amax() != 0.0 {
                return Err(Error::InvalidCosts(format!("{name} must be diagonal")));
            }
        }
        Self::new(q1.diagonal(), q2.diagonal(), f1, f2)
    }

    /// Unit curvatures, unit linear costs, and a doubled flow cost on edge 8.
    pub fn example() -> Self {
        let mut f2 = Vector::from_element(9, 1.0);
        f2[7] = 2.0;
        Self::new(Vector::from_element(9, 1.0), Vector::from_element(9, 1.0), Vector::from_element(9, 1.0), f2)
            .expect("built-in costs are valid")
    }

    pub fn m(&self) -> usize {
        self.q1.len()
    }

    pub fn q1_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&self.q1)
    }

    pub fn q2_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&self.q2)
    }

    pub fn capacity_cost(&self, c: &Vector) -> f64 {
        (0..self.m()).map(|i| 0.5 * self.q1[i] * c[i] * c[i] + self.f1[i] * c[i]).sum()
    }

    pub fn flow_cost(&self, u: &Vector) -> f64 {
        (0..self.m()).map(|i| 0.5 * self.q2[i] * u[i] * u[i] + self.f2[i] * u[i]).sum()
    }

    pub fn objective(&self, u: &Vector, c: &Vector) -> f64 {
        self.capacity_cost(c) + self.flow_cost(u)
    }

    fn check_against(&self, net: &MicroNetwork) -> Result<()> {
        if self.m() != net.m() {
            return Err(Error::DimensionMismatch(format!(
                "costs have {} edges, network has {}",
                self.m(),
                net.m()
            )));
        }
        Ok(())
    }
}

/// Demand pulled at the nodes; zero away from sinks.
#[derive(Clone, Debug, PartialEq)]
pub struct Demand(Vector);

impl Demand {
    pub fn new(net: &MicroNetwork, omega: Vector) -> Result<Self> {
        if omega.len() != net.n() {
            return Err(Error::InvalidDemand(format!(
                "demand has length {}, network has {} nodes",
                omega.len(),
                net.n()
            )));
        }
        if let Some(v) = omega.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidDemand(format!("non-finite demand at node {v}")));
        }
        if let Some(v) = (0..net.n()).find(|&v| !net.is_sink(v) && omega[v] != 0.0) {
            return Err(Error::InvalidDemand(format!(
                "node {v} is not a sink but has demand {}",
                omega[v]
            )));
        }
        Ok(Self(omega))
    }

    pub fn zeros(net: &MicroNetwork) -> Self {
        Self(Vector::zeros(net.n()))
    }

    /// `(0, 0, 23, 7, 0, 0)` on the built-in network.
    pub fn example() -> Self {
        Self(Vector::from_vec(vec![0.0, 0.0, 23.0, 7.0, 0.0, 0.0]))
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn into_vector(self) -> Vector {
        self.0
    }
}

/// `B̃u − ω`.
pub fn flow_balance_residual(net: &MicroNetwork, u: &Vector, omega: &Demand) -> Result<Vector> {
    if u.len() != net.m() {
        return Err(Error::DimensionMismatch(format!("u has length {}, expected {}", u.len(), net.m())));
    }
    Ok(net.incidence() * u - omega.as_vector())
}

/// Blockwise violation of the first-order conditions.
///
/// Stationarity is projected at bound coordinates: where `u_i ≤ 0` (or
/// `c_i ≤ 0`) a positive gradient is the multiplier of the sign constraint and
/// only its negative part is reported.
#[derive(Clone, Debug, PartialEq)]
pub struct KktResidual {
    pub stationarity_u: Vector,
    pub stationarity_c: Vector,
    pub primal_eq: Vector,
    pub primal_ineq_violation: Vector,
    pub complementarity: Vector,
    pub dual_sign_violation: Vector,
}

impl KktResidual {
    pub fn blocks(&self) -> [(&'static str, &Vector); 6] {
        [
            ("stationarity_u", &self.stationarity_u),
            ("stationarity_c", &self.stationarity_c),
            ("primal_eq", &self.primal_eq),
            ("primal_ineq_violation", &self.primal_ineq_violation),
            ("complementarity", &self.complementarity),
            ("dual_sign_violation", &self.dual_sign_violation),
        ]
    }

    /// Largest absolute entry over all blocks.
    pub fn max_abs(&self) -> f64 {
        self.blocks().iter().map(|(_, v)| v.amax()).fold(0.0, f64::max)
    }
}

pub fn kkt_residual(net: &MicroNetwork, costs: &CostParams, x: &StackedState, omega: &Demand) -> Result<KktResidual> {
    costs.check_against(net)?;
    if x.layout() != net.layout() {
        return Err(Error::DimensionMismatch("state layout does not match the network".into()));
    }
    let m = net.m();
    let (u, c, lam, mu) = (x.u(), x.c(), x.lambda(), x.mu());
    let bt_lam = net.incidence().transpose() * lam;
    let mut su = Vector::zeros(m);
    let mut sc = Vector::zeros(m);
    let mut ineq = Vector::zeros(m);
    let mut comp = Vector::zeros(m);
    let mut dual = Vector::zeros(m);
    for i in 0..m {
        let ru = mu[i] + bt_lam[i] + costs.q2[i] * u[i] + costs.f2[i];
        su[i] = if u[i] <= 0.0 { ru.min(0.0) } else { ru };
        let rc = costs.q1[i] * c[i] + costs.f1[i] - mu[i];
        sc[i] = if c[i] <= 0.0 { rc.min(0.0) } else { rc };
        ineq[i] = (u[i] - c[i]).max(-u[i]).max(-c[i]).max(0.0);
        comp[i] = mu[i] * (u[i] - c[i]);
        dual[i] = (-mu[i]).max(0.0);
    }
    let primal_eq = net.incidence() * u - omega.as_vector();
    Ok(KktResidual {
        stationarity_u: su,
        stationarity_c: sc,
        primal_eq,
        primal_ineq_violation: ineq,
        complementarity: comp,
        dual_sign_violation: dual,
    })
}

/// Inequality constraints active at a solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActiveConstraint {
    /// `u_i ≥ 0` holds with equality.
    FlowZero(usize),
    /// `u_i ≤ c_i` holds with equality.
    CapacityBinding(usize),
    /// `c_i ≥ 0` holds with equality.
    CapacityZero(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub u: Vector,
    pub c: Vector,
    pub lambda: Vector,
    pub mu: Vector,
    pub objective: f64,
    pub active_set: Vec<ActiveConstraint>,
}

impl QpSolution {
    pub fn to_state(&self, layout: Layout) -> Result<StackedState> {
        StackedState::from_blocks(layout, &self.u, &self.c, &self.lambda, &self.mu)
    }
}

/// Which branch of the reduced per-edge cost a pattern pins an edge to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    /// `u = 0`.
    Zero,
    /// `0 < u ≤ c̄`, capacity idles at `c̄`.
    Low,
    /// `u ≥ c̄`, capacity tracks the flow.
    High,
}

/// Capacity each edge would buy with zero flow: argmin of `½q₁c² + f₁c` on `c ≥ 0`.
fn idle_capacity(costs: &CostParams) -> Result<Vector> {
    let mut cbar = Vector::zeros(costs.m());
    for i in 0..costs.m() {
        let (q, f) = (costs.q1[i], costs.f1[i]);
        if q > 0.0 {
            cbar[i] = (-f / q).max(0.0);
        } else if f < 0.0 {
            return Err(Error::InvalidCosts(format!(
                "edge {i}: zero capacity curvature with negative linear cost is unbounded"
            )));
        }
    }
    Ok(cbar)
}

struct Candidate {
    objective: f64,
    index: u64,
    u: Vector,
    lambda: Vector,
}

fn solve_pattern(
    net: &MicroNetwork,
    costs: &CostParams,
    cbar: &Vector,
    omega: &Vector,
    pieces: &[Piece],
    index: u64,
) -> Option<Candidate> {
    let (n, m) = (net.n(), net.m());
    let free: Vec<usize> = (0..m).filter(|&i| pieces[i] != Piece::Zero).collect();
    let k = free.len();
    let mut kkt = Matrix::zeros(k + n, k + n);
    let mut rhs = Vector::zeros(k + n);
    for (a, &i) in free.iter().enumerate() {
        let (d, l) = match pieces[i] {
            Piece::Low => (costs.q2[i], costs.f2[i]),
            _ => (costs.q1[i] + costs.q2[i], costs.f1[i] + costs.f2[i]),
        };
        kkt[(a, a)] = d;
        rhs[a] = -l;
        for v in 0..n {
            let b = net.incidence()[(v, i)];
            kkt[(k + v, a)] = b;
            kkt[(a, k + v)] = b;
        }
    }
    rhs.rows_mut(k, n).copy_from(omega);

    let sol = match LinearSolver::factor(&kkt).and_then(|s| s.solve(&rhs)) {
        Ok(s) => s,
        Err(_) => {
            let svd = SVD::new(kkt.clone(), true, true);
            let eps = 1e-10 * svd.singular_values.max().max(1.0);
            let s = svd.solve(&rhs, eps).ok()?;
            if (&kkt * &s - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
                return None;
            }
            s
        }
    };

    let mut u = Vector::zeros(m);
    let scale = 1.0 + omega.amax();
    for (a, &i) in free.iter().enumerate() {
        let v = sol[a];
        let ok = match pieces[i] {
            Piece::Low => v >= -FEAS_TOL * scale && v <= cbar[i] + FEAS_TOL * scale,
            Piece::High => v >= cbar[i] - FEAS_TOL * scale,
            Piece::Zero => unreachable!(),
        };
        if !ok {
            return None;
        }
        u[i] = v.max(0.0);
    }
    if (net.incidence() * &u - omega).amax() > 1e-8 * scale {
        return None;
    }
    let c = u.zip_map(cbar, f64::max);
    Some(Candidate {
        objective: costs.objective(&u, &c),
        index,
        u,
        lambda: sol.rows(k, n).into_owned(),
    })
}

/// Exact minimizer of the deterministic QP by enumeration of per-edge
/// pieces of the reduced flow cost.
///
/// For fixed flows the optimal capacity is `c_i = max(u_i, c̄_i)`, which
/// leaves a convex piecewise-quadratic cost in `u` alone. Each combination of
/// pieces is an equality-constrained QP solved through its KKT system, and the
/// cheapest candidate that lies inside its own pieces is the global optimum.
pub fn solve_deterministic_qp(net: &MicroNetwork, costs: &CostParams, omega: &Demand) -> Result<QpSolution> {
    costs.check_against(net)?;
    if omega.as_vector().len() != net.n() {
        return Err(Error::InvalidDemand("demand length does not match the network".into()));
    }
    let m = net.m();
    if m > MAX_ORACLE_EDGES {
        return Err(Error::EnumerationGuard {
            edges: m,
            limit: MAX_ORACLE_EDGES,
        });
    }
    let cbar = idle_capacity(costs)?;
    let choices: Vec<Vec<Piece>> = (0..m)
        .map(|i| {
            if cbar[i] > 0.0 {
                vec![Piece::Zero, Piece::Low, Piece::High]
            } else {
                vec![Piece::Zero, Piece::High]
            }
        })
        .collect();
    let total: u64 = choices.iter().map(|c| c.len() as u64).product();

    let w = omega.as_vector();
    let best = (0..total)
        .into_par_iter()
        .filter_map(|idx| {
            let mut rest = idx;
            let pieces: Vec<Piece> = choices
                .iter()
                .map(|opts| {
                    let p = opts[(rest % opts.len() as u64) as usize];
                    rest /= opts.len() as u64;
                    p
                })
                .collect();
            solve_pattern(net, costs, &cbar, w, &pieces, idx)
        })
        .min_by(|a, b| a.objective.total_cmp(&b.objective).then(a.index.cmp(&b.index)))
        .ok_or(Error::Infeasible)?;

    let u = best.u;
    let c = u.zip_map(&cbar, f64::max);
    let lambda = best.lambda;
    let bt_lam = net.incidence().transpose() * &lambda;
    let mut mu = Vector::zeros(m);
    let mut active = Vec::new();
    let tol = FEAS_TOL * (1.0 + w.amax());
    for i in 0..m {
        let binding = u[i] >= cbar[i] - tol;
        if u[i] <= tol {
            active.push(ActiveConstraint::FlowZero(i));
        }
        if binding {
            active.push(ActiveConstraint::CapacityBinding(i));
        }
        if c[i] <= tol {
            active.push(ActiveConstraint::CapacityZero(i));
        }
        mu[i] = if u[i] > tol && binding {
            costs.q1[i] * c[i] + costs.f1[i]
        } else if u[i] <= tol && cbar[i] <= tol {
            (-costs.f2[i] - bt_lam[i]).max(0.0)
        } else {
            0.0
        };
    }
    Ok(QpSolution {
        objective: costs.objective(&u, &c),
        u,
        c,
        lambda,
        mu,
        active_set: active,
    })
}

/// Excess cost of a heuristic `(u, c)` over the oracle optimum.
pub fn suboptimality_gap(
    net: &MicroNetwork,
    costs: &CostParams,
    omega: &Demand,
    u: &Vector,
    c: &Vector,
    oracle: &QpSolution,
) -> Result<f64> {
    const TOL: f64 = 1e-6;
    costs.check_against(net)?;
    if u.len() != net.m() || c.len() != net.m() {
        return Err(Error::DimensionMismatch("heuristic point has the wrong length".into()));
    }
    let scale = 1.0 + omega.as_vector().amax();
    let balance = flow_balance_residual(net, u, omega)?.amax();
    if balance > TOL * scale {
        return Err(Error::NotComparable(format!("flow balance violated by {balance:.3e}")));
    }
    let bound = (0..net.m())
        .map(|i| (-u[i]).max(u[i] - c[i]).max(-c[i]))
        .fold(0.0, f64::max);
    if bound > TOL * scale {
        return Err(Error::NotComparable(format!("bounds 0 <= u <= c violated by {bound:.3e}")));
    }
    Ok(costs.objective(u, c) - oracle.objective)
}
