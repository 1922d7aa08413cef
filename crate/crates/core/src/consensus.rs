//! Consensus-type dynamics of the population means under the stationary
//! feedback.
//!
//! Every form handled here has the Kronecker structure
//! `ṁ = (I_p ⊗ X + P ⊗ Y) m + b` with `P` the neighbor-averaging operator.
//! `P = D^{-1/2} V Λ Vᵀ D^{1/2}` with `V` orthogonal, so the spectrum is the
//! union of the spectra of `X + θY` over `θ ∈ eig(P)` and linear solves
//! decouple into `p` blocks of size `d`.

use std::fmt::Write as _;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::dynamics::SystemMatrices;
use crate::error::{Error, Result};
use crate::macro_net::{AggregationOperator, MacroTopology};
use crate::mfg::StationaryValue;
use crate::numerics::{eigenvalues, LinearSolver, Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub enum ConsensusForm {
    /// All `3m + n` coordinates of every population mean.
    FullStacked,
    /// Capacities only, with the aggregate inside the offset δ folded into
    /// the state matrix.
    IsolatedC,
    /// Capacities only, with δ evaluated at a fixed capacity aggregate.
    IsolatedCFrozen { rho_c: Vector },
}

impl ConsensusForm {
    pub fn name(&self) -> &'static str {
        match self {
            ConsensusForm::FullStacked => "full-stacked",
            ConsensusForm::IsolatedC => "isolated-c",
            ConsensusForm::IsolatedCFrozen { .. } => "isolated-c-frozen",
        }
    }
}

/// `ṁ = (I ⊗ X + P ⊗ Y) m + b`.
#[derive(Clone, Debug)]
pub struct ConsensusSystem {
    pub form: ConsensusForm,
    pub x_block: Matrix,
    pub y_block: Matrix,
    /// Per-agent offset, identical across agents.
    pub offset: Vector,
    op: AggregationOperator,
    modes: OnceLock<(Vec<f64>, Matrix)>,
}

impl ConsensusSystem {
    /// Assembles a system directly from its blocks.
    pub fn from_blocks(topo: &MacroTopology, form: ConsensusForm, x_block: Matrix, y_block: Matrix, offset: Vector) -> Result<Self> {
        let d = x_block.nrows();
        if !x_block.is_square() || y_block.shape() != (d, d) || offset.len() != d {
            return Err(Error::DimensionMismatch("consensus blocks must be d x d with a length-d offset".into()));
        }
        Ok(Self {
            form,
            x_block,
            y_block,
            offset,
            op: AggregationOperator::new(topo),
            modes: OnceLock::new(),
        })
    }

    pub fn p(&self) -> usize {
        self.op.p()
    }

    /// Block dimension.
    pub fn d(&self) -> usize {
        self.x_block.nrows()
    }

    pub fn operator(&self) -> &AggregationOperator {
        &self.op
    }

    /// Stacked offset `𝟙_p ⊗ b`.
    pub fn b(&self) -> Vector {
        let d = self.d();
        Vector::from_fn(self.p() * d, |i, _| self.offset[i % d])
    }

    /// Dense `I ⊗ X + P ⊗ Y`; only sensible for small `p·d`.
    pub fn dense_matrix(&self) -> Matrix {
        let (p, d) = (self.p(), self.d());
        let pm = self.op.matrix();
        let mut m = Matrix::zeros(p * d, p * d);
        for k in 0..p {
            m.view_mut((k * d, k * d), (d, d)).copy_from(&self.x_block);
            for &j in self.op.topology().neighbors(k) {
                let mut blk = m.view_mut((k * d, j * d), (d, d));
                blk += &self.y_block * pm[(k, j)];
            }
        }
        m
    }

    /// `(I ⊗ X + P ⊗ Y) m`.
    pub fn apply(&self, m: &Vector) -> Vector {
        let (p, d) = (self.p(), self.d());
        let blocks: Vec<Vector> = (0..p).map(|k| m.rows(k * d, d).into_owned()).collect();
        let mut out = Vector::zeros(p * d);
        for k in 0..p {
            let rho = self.op.average(k, &blocks);
            out.rows_mut(k * d, d)
                .copy_from(&(&self.x_block * &blocks[k] + &self.y_block * rho));
        }
        out
    }

    /// Right-hand side `Mm + b`.
    pub fn drift(&self, m: &Vector) -> Vector {
        let mut out = self.apply(m);
        let d = self.d();
        for k in 0..self.p() {
            let mut blk = out.rows_mut(k * d, d);
            blk += &self.offset;
        }
        out
    }

    /// Eigen-decomposition `(θ_i, V)` of the symmetric form of `P`.
    fn p_modes(&self) -> &(Vec<f64>, Matrix) {
        self.modes.get_or_init(|| {
            let eig = self.op.symmetric_form().symmetric_eigen();
            (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
        })
    }

    /// Every eigenvalue of the assembled matrix.
    pub fn eigenvalues(&self) -> Result<Vec<nalgebra::Complex<f64>>> {
        let (theta, _) = self.p_modes();
        let per_mode: Vec<_> = theta
            .par_iter()
            .map(|&t| eigenvalues(&(&self.x_block + &self.y_block * t)))
            .collect::<Result<_>>()?;
        Ok(per_mode.into_iter().flatten().collect())
    }

    /// Solves `(I ⊗ X + P ⊗ Y) m = rhs` mode by mode.
    pub fn solve(&self, rhs: &Vector) -> Result<Vector> {
        let (p, d) = (self.p(), self.d());
        if rhs.len() != p * d {
            return Err(Error::DimensionMismatch("right-hand side has the wrong length".into()));
        }
        let (theta, v) = self.p_modes();
        let sqrt_deg: Vec<f64> = (0..p).map(|k| (self.op.topology().degree(k) as f64).sqrt()).collect();
        // Rows of R are agents, columns block coordinates.
        let r = Matrix::from_fn(p, d, |k, i| rhs[k * d + i] * sqrt_deg[k]);
        let z = v.tr_mul(&r);
        let mut y = Matrix::zeros(p, d);
        for (i, &t) in theta.iter().enumerate() {
            let solver = LinearSolver::factor(&(&self.x_block + &self.y_block * t))?;
            let yi = solver.solve(&z.row(i).transpose())?;
            y.row_mut(i).copy_from(&yi.transpose());
        }
        let m = v * y;
        Ok(Vector::from_fn(p * d, |idx, _| m[(idx / d, idx % d)] / sqrt_deg[idx / d]))
    }
}

/// Rows and columns of the capacity block.
fn c_block(m: &Matrix, start: usize, len: usize) -> Matrix {
    m.view((start, start), (len, len)).into_owned()
}

/// Builds the consensus dynamics for the stationary feedback `value`.
///
/// `mu_freeze` supplies the inequality multipliers held fixed inside the
/// capacity-only forms; it is ignored by the full-stacked form.
pub fn build_consensus_system(
    topo: &MacroTopology,
    sys: &SystemMatrices,
    value: &StationaryValue,
    q: &Matrix,
    form: ConsensusForm,
    mu_freeze: Option<&Vector>,
) -> Result<ConsensusSystem> {
    let layout = sys.layout();
    let dim = layout.dim();
    if q.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch("Q does not match the system".into()));
    }
    let phi = value.phi();
    let gain = value.gain();
    let z = LinearSolver::factor(value.h_matrix())?.solve_matrix(&Matrix::identity(dim, dim))?;

    match &form {
        ConsensusForm::FullStacked => {
            let x = sys.a() - gain * phi;
            let y = -(gain * &z * q);
            let b = gain * &z * phi * sys.c() + sys.c();
            ConsensusSystem::from_blocks(topo, form, x, y, b)
        }
        ConsensusForm::IsolatedC | ConsensusForm::IsolatedCFrozen { .. } => {
            let m = layout.m;
            let mu = mu_freeze
                .ok_or_else(|| Error::InvalidParams("capacity-only consensus forms need a frozen mu".into()))?;
            if mu.len() != m {
                return Err(Error::DimensionMismatch(format!("frozen mu has length {}, expected {m}", mu.len())));
            }
            let cs = layout.c().start;
            let s_c = c_block(gain, cs, m);
            let phi_c = c_block(phi, cs, m);
            let z_c = c_block(&z, cs, m);
            let q_c = c_block(q, cs, m);
            let q1 = sys.costs().q1_matrix();
            let f1 = &sys.costs().f1;
            let ell = &s_c * phi_c.transpose();
            // δ = S_c(Z̃_c Φ_cᵀ μ + (−Z̃_c Q_c − Φ_cᵀ) ρ_c) + μ − f₁
            let delta_rho = &s_c * (-(&z_c * &q_c) - phi_c.transpose());
            let delta_const = &s_c * &z_c * phi_c.transpose() * mu + mu - f1;
            let x = -(&q1 + &ell);
            match &form {
                ConsensusForm::IsolatedC => {
                    let y = &ell + &delta_rho;
                    ConsensusSystem::from_blocks(topo, form, x, y, delta_const)
                }
                ConsensusForm::IsolatedCFrozen { rho_c } => {
                    if rho_c.len() != m {
                        return Err(Error::DimensionMismatch("frozen rho_c has the wrong length".into()));
                    }
                    let b = delta_const + &delta_rho * rho_c;
                    ConsensusSystem::from_blocks(topo, form.clone(), x, ell, b)
                }
                ConsensusForm::FullStacked => unreachable!(),
            }
        }
    }
}

/// Laplacian part `I ⊗ ℓ − P ⊗ ℓ` of a capacity-only system, built from its
/// diagonal block `X = −(Q₁ + ℓ)`.
pub fn isolated_laplacian(cs: &ConsensusSystem, q1: &Matrix) -> Matrix {
    let ell = -(&cs.x_block + q1);
    let p = cs.p();
    let d = cs.d();
    let pm = cs.operator().matrix();
    let mut l = Matrix::zeros(p * d, p * d);
    for k in 0..p {
        for j in 0..p {
            let w = if k == j { 1.0 } else { 0.0 } - pm[(k, j)];
            if w != 0.0 {
                l.view_mut((k * d, j * d), (d, d)).copy_from(&(&ell * w));
            }
        }
    }
    l
}

/// `m̄* = −M⁻¹b`.
pub fn consensus_equilibrium(cs: &ConsensusSystem) -> Result<Vector> {
    let b = cs.b();
    let m = cs.solve(&(-&b))?;
    let res = cs.drift(&m).amax();
    let tol = 1e-10 * (1.0 + b.amax()).max(m.amax());
    if res > tol {
        return Err(Error::NotConverged {
            iterations: 1,
            residual: res,
        });
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub hurwitz: bool,
    pub abscissa: f64,
    /// Decay rate `−abscissa` of the slowest mode.
    pub predicted_rate: f64,
    /// `1 / predicted_rate`, infinite when not Hurwitz.
    pub time_constant: f64,
}

pub fn verify_convergence(cs: &ConsensusSystem) -> Result<ConvergenceReport> {
    let abscissa = cs
        .eigenvalues()?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let hurwitz = abscissa < 0.0;
    Ok(ConvergenceReport {
        hurwitz,
        abscissa,
        predicted_rate: -abscissa,
        time_constant: if hurwitz { -1.0 / abscissa } else { f64::INFINITY },
    })
}

/// Capacity components of a stacked equilibrium, agent by agent.
pub fn capacity_components(cs: &ConsensusSystem, m: &Vector, c_range: std::ops::Range<usize>) -> Vec<Vector> {
    let d = cs.d();
    (0..cs.p())
        .map(|k| m.rows(k * d + c_range.start, c_range.len()).into_owned())
        .collect()
}

/// Structured summary of a consensus analysis.
#[derive(Clone, Debug)]
pub struct ConsensusReport {
    pub form: String,
    pub p: usize,
    pub d: usize,
    pub convergence: ConvergenceReport,
    pub equilibrium: Vector,
    pub notes: Vec<String>,
}

impl ConsensusReport {
    pub fn new(cs: &ConsensusSystem, notes: Vec<String>) -> Result<Self> {
        Ok(Self {
            form: cs.form.name().to_string(),
            p: cs.p(),
            d: cs.d(),
            convergence: verify_convergence(cs)?,
            equilibrium: consensus_equilibrium(cs)?,
            notes,
        })
    }

    pub fn to_text(&self) -> String {
        let c = &self.convergence;
        let mut s = String::new();
        let _ = writeln!(s, "form: {}", self.form);
        let _ = writeln!(s, "agents: {}", self.p);
        let _ = writeln!(s, "block dimension: {}", self.d);
        let _ = writeln!(s, "hurwitz: {}", c.hurwitz);
        let _ = writeln!(s, "abscissa: {:.12e}", c.abscissa);
        let _ = writeln!(s, "predicted rate: {:.12e}", c.predicted_rate);
        let _ = writeln!(s, "time constant: {:.12e}", c.time_constant);
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    /// `agent,index,value` rows of the equilibrium.
    pub fn equilibrium_csv(&self) -> String {
        let mut s = String::from("agent,index,value\n");
        for (idx, v) in self.equilibrium.iter().enumerate() {
            let _ = writeln!(s, "{},{},{:.12e}", idx / self.d, idx % self.d, v);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::assemble_system;
    use crate::micro::{CostParams, Demand, MicroNetwork};
    use crate::mfg::{build_penalties, ControlMatrix, ControlMode};
    use crate::numerics::CareConfig;

    fn example_value() -> (SystemMatrices, StationaryValue, Matrix) {
        let net = MicroNetwork::example();
        let sys = assemble_system(&net, &CostParams::example(), &Demand::example()).unwrap();
        let ctrl = ControlMatrix::new(net.layout(), ControlMode::ScalarOnC);
        let pen = build_penalties(net.layout(), 1.0, 1.0, 1.0, ControlMode::ScalarOnC).unwrap();
        let sv = StationaryValue::new(&sys, &ctrl, &pen, &CareConfig::default()).unwrap();
        (sys, sv, pen.q)
    }

    #[test]
    fn trivial_systems() {
        let topo = MacroTopology::complete(2).unwrap();
        let neg = ConsensusSystem::from_blocks(&topo, ConsensusForm::FullStacked, -Matrix::identity(1, 1), Matrix::zeros(1, 1), Vector::zeros(1)).unwrap();
        let r = verify_convergence(&neg).unwrap();
        assert!(r.hurwitz && (r.abscissa + 1.0).abs() < 1e-14);
        assert_eq!(consensus_equilibrium(&neg).unwrap(), Vector::zeros(2));

        let one = ConsensusSystem::from_blocks(&topo, ConsensusForm::FullStacked, -Matrix::identity(1, 1), Matrix::zeros(1, 1), Vector::from_element(1, 1.0)).unwrap();
        assert!((consensus_equilibrium(&one).unwrap() - Vector::from_element(2, 1.0)).amax() < 1e-14);

        let zero_row = ConsensusSystem::from_blocks(
            &topo,
            ConsensusForm::FullStacked,
            Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]),
            Matrix::zeros(2, 2),
            Vector::zeros(2),
        )
        .unwrap();
        assert!(!verify_convergence(&zero_row).unwrap().hurwitz);
    }

    #[test]
    fn structured_solve_and_spectrum_match_dense() {
        let (sys, sv, q) = example_value();
        let topo = MacroTopology::scale_free(6, 2, 3).unwrap();
        let cs = build_consensus_system(&topo, &sys, &sv, &q, ConsensusForm::FullStacked, None).unwrap();
        let dense = cs.dense_matrix();
        let m = Vector::from_fn(cs.p() * cs.d(), |i, _| (i as f64 * 0.37).sin());
        assert!((&dense * &m - cs.apply(&m)).amax() < 1e-12);
        let eq = consensus_equilibrium(&cs).unwrap();
        assert!((&dense * &eq + cs.b()).amax() < 1e-9);
        let mut a: Vec<f64> = eigenvalues(&dense).unwrap().iter().map(|z| z.re).collect();
        let mut b: Vec<f64> = cs.eigenvalues().unwrap().iter().map(|z| z.re).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn full_stacked_ring_is_hurwitz() {
        let (sys, sv, q) = example_value();
        let cs = build_consensus_system(&MacroTopology::ring(10).unwrap(), &sys, &sv, &q, ConsensusForm::FullStacked, None).unwrap();
        let r = verify_convergence(&cs).unwrap();
        assert!(r.hurwitz, "{r:?}");
        assert!(r.time_constant.is_finite());
    }

    #[test]
    fn isolated_laplacian_kills_consensus_vectors() {
        let (sys, sv, q) = example_value();
        let mu = Vector::from_element(9, 2.0);
        for p in [2usize, 5, 10] {
            let topo = MacroTopology::ring(p).unwrap();
            let cs = build_consensus_system(&topo, &sys, &sv, &q, ConsensusForm::IsolatedC, Some(&mu)).unwrap();
            let l = isolated_laplacian(&cs, &sys.costs().q1_matrix());
            let w = Vector::from_fn(9, |i, _| i as f64 - 3.0);
            let stacked = Vector::from_fn(p * 9, |i, _| w[i % 9]);
            assert!((l * stacked).amax() < 1e-12);
        }
    }

    #[test]
    fn two_agent_block_formula() {
        let (sys, sv, q) = example_value();
        let mu = Vector::zeros(9);
        let topo = MacroTopology::complete(2).unwrap();
        let cs = build_consensus_system(&topo, &sys, &sv, &q, ConsensusForm::IsolatedCFrozen { rho_c: Vector::zeros(9) }, Some(&mu)).unwrap();
        let l = isolated_laplacian(&cs, &sys.costs().q1_matrix());
        let cs_range = sys.layout().c();
        let s_c = sv.gain().view((cs_range.start, cs_range.start), (9, 9)).into_owned();
        let phi_c = sv.phi().view((cs_range.start, cs_range.start), (9, 9)).into_owned();
        let ell = s_c * phi_c.transpose();
        assert!((l.view((0, 0), (9, 9)) - &ell).amax() < 1e-12);
        assert!((l.view((0, 9), (9, 9)) + &ell).amax() < 1e-12);
    }

    #[test]
    fn isolated_forms_need_mu() {
        let (sys, sv, q) = example_value();
        let topo = MacroTopology::ring(3).unwrap();
        assert!(build_consensus_system(&topo, &sys, &sv, &q, ConsensusForm::IsolatedC, None).is_err());
    }

    #[test]
    fn simulated_affine_flow_reaches_equilibrium() {
        let (sys, sv, q) = example_value();
        for p in [2usize, 5, 10] {
            let topo = MacroTopology::ring(p).unwrap();
            let cs = build_consensus_system(&topo, &sys, &sv, &q, ConsensusForm::FullStacked, None).unwrap();
            assert!(verify_convergence(&cs).unwrap().hurwitz);
            let eq = consensus_equilibrium(&cs).unwrap();
            let mut m = Vector::from_fn(p * cs.d(), |i, _| 40.0 + 10.0 * ((i * 7) as f64).sin());
            for _ in 0..40_000 {
                m += cs.drift(&m) * 0.05;
            }
            assert!((&m - &eq).amax() < 1e-6, "p = {p}: {}", (&m - &eq).amax());
        }
    }

    #[test]
    fn report_formats() {
        let (sys, sv, q) = example_value();
        let cs = build_consensus_system(&MacroTopology::ring(3).unwrap(), &sys, &sv, &q, ConsensusForm::FullStacked, None).unwrap();
        let rep = ConsensusReport::new(&cs, vec!["demo".into()]).unwrap();
        let text = rep.to_text();
        assert!(text.contains("form: full-stacked") && text.contains("hurwitz: true") && text.contains("note: demo"));
        let csv = rep.equilibrium_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 33);
    }
}
