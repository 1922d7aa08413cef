//! Agent-based simulation of the multi-population game.
//!
//! Population `k` is represented by `samples_per_population` agents whose
//! average is the population mean. Each step reads a frozen snapshot of all
//! means, so agent updates are order independent and run on a worker pool.
//! Random draws come from a generator keyed by (seed, agent, step, purpose),
//! which makes results independent of scheduling and worker count.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dynamics::{assemble_system, PdRun, SystemMatrices};
use crate::error::{Error, Result};
use crate::macro_net::{AggregationOperator, MacroTopology};
use crate::mfg::{build_penalties, ControlMatrix, ControlMode, MfgPenalties, StationaryValue};
use crate::micro::{CostParams, Demand, MicroNetwork};
use crate::numerics::{CareConfig, Matrix, Vector};
use crate::state::Layout;

/// States whose sup-norm exceeds this are reported as diverged.
pub const SIM_DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySpec {
    ScaleFree { attach: usize, seed: u64 },
    Ring,
    Path,
    Complete,
    Star,
    Edges(Vec<(usize, usize)>),
}

impl TopologySpec {
    pub fn build(&self, p: usize) -> Result<MacroTopology> {
        match self {
            TopologySpec::ScaleFree { attach, seed } => MacroTopology::scale_free(p, *attach, *seed),
            TopologySpec::Ring => MacroTopology::ring(p),
            TopologySpec::Path => MacroTopology::path(p),
            TopologySpec::Complete => MacroTopology::complete(p),
            TopologySpec::Star => MacroTopology::star(p),
            TopologySpec::Edges(e) => MacroTopology::from_edges(p, e),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TopologySpec::ScaleFree { .. } => "scale-free",
            TopologySpec::Ring => "ring",
            TopologySpec::Path => "path",
            TopologySpec::Complete => "complete",
            TopologySpec::Star => "star",
            TopologySpec::Edges(_) => "edges",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub network: MicroNetwork,
    pub costs: CostParams,
    pub p: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub init_mean: f64,
    pub init_std: f64,
    /// Per-node demand mean; nonzero only at sinks.
    pub demand_mean: Vector,
    /// Per-node demand standard deviation; nonzero only at sinks.
    pub demand_std: Vector,
    pub q_weight: f64,
    pub r_weight: f64,
    pub s_weight: f64,
    pub control_mode: ControlMode,
    /// Clamp `u`, `c`, `μ` at zero after initialization and every step.
    pub project: bool,
    pub topology: TopologySpec,
    pub samples_per_population: usize,
    /// Worker threads; `None` uses the global default.
    pub workers: Option<usize>,
    /// Keep full stacked states in the log, not just capacities.
    pub record_states: bool,
}

impl SimConfig {
    /// Example network with the reference simulation parameters.
    pub fn example() -> Self {
        let demand_mean = Vector::from_column_slice(&[0.0, 0.0, 23.0, 7.0, 0.0, 0.0]);
        let demand_std = Vector::from_column_slice(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        Self {
            network: MicroNetwork::example(),
            costs: CostParams::example(),
            p: 1000,
            dt: 0.1,
            steps: 200,
            seed: 0,
            init_mean: 40.0,
            init_std: 15.0,
            demand_mean,
            demand_std,
            q_weight: 1.0,
            r_weight: 1.0,
            s_weight: 1.0,
            control_mode: ControlMode::ScalarOnC,
            project: false,
            topology: TopologySpec::ScaleFree { attach: 2, seed: 0 },
            samples_per_population: 1,
            workers: None,
            record_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) || !self.init_mean.is_finite() {
            return bad("init_std must be nonnegative and init_mean finite".into());
        }
        if self.p < 2 {
            return bad(format!("p must be at least 2, got {}", self.p));
        }
        if self.samples_per_population == 0 {
            return bad("samples_per_population must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if self.costs.m() != self.network.m() {
            return Err(Error::DimensionMismatch(format!(
                "{} cost entries for {} edges",
                self.costs.m(),
                self.network.m()
            )));
        }
        Demand::new(&self.network, self.demand_mean.clone())?;
        if self.demand_std.len() != self.network.n() {
            return Err(Error::InvalidDemand(format!(
                "demand_std has length {}, expected {}",
                self.demand_std.len(),
                self.network.n()
            )));
        }
        for (v, &s) in self.demand_std.iter().enumerate() {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidDemand(format!("demand_std[{v}] = {s} must be nonnegative")));
            }
            if s != 0.0 && !self.network.is_sink(v) {
                return Err(Error::InvalidDemand(format!("node {v} is not a sink but has demand noise")));
            }
        }
        for (name, w) in [("q", self.q_weight), ("r", self.r_weight), ("s", self.s_weight)] {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("penalty weight {name} must be positive, got {w}"));
            }
        }
        Ok(())
    }

    /// `key = value` lines describing the run.
    pub fn describe(&self) -> String {
        let vec = |v: &Vector| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "p = {}", self.p);
        let _ = writeln!(s, "dt = {}", self.dt);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "init_mean = {}", self.init_mean);
        let _ = writeln!(s, "init_std = {}", self.init_std);
        let _ = writeln!(s, "demand_mean = {}", vec(&self.demand_mean));
        let _ = writeln!(s, "demand_std = {}", vec(&self.demand_std));
        let _ = writeln!(s, "q_weight = {}", self.q_weight);
        let _ = writeln!(s, "r_weight = {}", self.r_weight);
        let _ = writeln!(s, "s_weight = {}", self.s_weight);
        let _ = writeln!(s, "control_mode = {:?}", self.control_mode);
        let _ = writeln!(s, "project = {}", self.project);
        let _ = writeln!(s, "topology = {}", self.topology.name());
        if let TopologySpec::ScaleFree { attach, seed } = self.topology {
            let _ = writeln!(s, "attach = {attach}");
            let _ = writeln!(s, "topology_seed = {seed}");
        }
        let _ = writeln!(s, "samples_per_population = {}", self.samples_per_population);
        let _ = writeln!(s, "f2 = {}", vec(&self.costs.f2));
        s
    }
}

/// Purpose tags that separate the random streams of one agent.
const TAG_INIT: u64 = 0;
const TAG_DEMAND: u64 = 1;

/// Counter-based stream of agent `agent`: a fresh generator per
/// (step, purpose), so no generator state is shared or carried.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentStream {
    pub seed: u64,
    pub agent: u64,
}

impl AgentStream {
    pub fn rng(&self, step: u64, tag: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (i, word) in [self.seed, self.agent, step, tag].iter().enumerate() {
            key[8 * i..8 * i + 8].copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

#[derive(Clone, Debug)]
pub struct AgentPopulation {
    pub layout: Layout,
    pub samples_per_population: usize,
    /// All agent states, population-major.
    pub states: Vec<Vector>,
    pub streams: Vec<AgentStream>,
    /// Population means at the start of the current step.
    pub means_snapshot: Vec<Vector>,
    pub step: usize,
}

impl AgentPopulation {
    pub fn p(&self) -> usize {
        self.means_snapshot.len()
    }

    fn refresh_means(&mut self) {
        let n = self.samples_per_population;
        self.means_snapshot = self
            .states
            .chunks(n)
            .map(|grp| grp.iter().fold(Vector::zeros(self.layout.dim()), |acc, x| acc + x) / n as f64)
            .collect();
    }
}

fn normal(mean: f64, std: f64) -> Result<Normal<f64>> {
    Normal::new(mean, std).map_err(|e| Error::InvalidParams(format!("normal({mean}, {std}): {e}")))
}

/// Draws every coordinate independently from `N(μ₀, σ₀²)`.
pub fn init_population(cfg: &SimConfig, layout: Layout) -> Result<AgentPopulation> {
    cfg.validate()?;
    let dist = normal(cfg.init_mean, cfg.init_std)?;
    let total = cfg.p * cfg.samples_per_population;
    let streams: Vec<AgentStream> = (0..total)
        .map(|a| AgentStream {
            seed: cfg.seed,
            agent: a as u64,
        })
        .collect();
    let states = streams
        .iter()
        .map(|s| {
            let mut rng = s.rng(u64::MAX, TAG_INIT);
            let mut x = Vector::from_fn(layout.dim(), |_, _| dist.sample(&mut rng));
            if cfg.project {
                layout.project(&mut x);
            }
            x
        })
        .collect();
    let mut pop = AgentPopulation {
        layout,
        samples_per_population: cfg.samples_per_population,
        states,
        streams,
        means_snapshot: Vec::new(),
        step: 0,
    };
    pop.refresh_means();
    Ok(pop)
}

/// One demand vector: normal draws at sinks, exact zeros elsewhere.
pub fn sample_demand(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Vector> {
    let mut w = Vector::zeros(cfg.network.n());
    for &v in cfg.network.sink_nodes() {
        w[v] = normal(cfg.demand_mean[v], cfg.demand_std[v])?.sample(rng);
    }
    Ok(w)
}

/// Everything fixed for the whole run: system template, feedback, topology.
#[derive(Clone, Debug)]
pub struct SimContext {
    pub sys: SystemMatrices,
    pub ctrl: ControlMatrix,
    pub pen: MfgPenalties,
    pub value: StationaryValue,
    pub op: AggregationOperator,
    closed_loop: Matrix,
}

impl SimContext {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let demand = Demand::new(&cfg.network, cfg.demand_mean.clone())?;
        let sys = assemble_system(&cfg.network, &cfg.costs, &demand)?;
        let layout = sys.layout();
        let ctrl = ControlMatrix::new(layout, cfg.control_mode);
        let pen = build_penalties(layout, cfg.q_weight, cfg.r_weight, cfg.s_weight, cfg.control_mode)?;
        let value = StationaryValue::new(&sys, &ctrl, &pen, &CareConfig::default())?;
        let topo = cfg.topology.build(cfg.p)?;
        let closed_loop = sys.a() - value.gain() * value.phi();
        Ok(Self {
            sys,
            ctrl,
            pen,
            value,
            op: AggregationOperator::new(&topo),
            closed_loop,
        })
    }

    /// Euler update of one agent with demand `omega`.
    pub fn agent_update(&self, x: &Vector, rho: &Vector, omega: &Vector, dt: f64, project: bool) -> Result<Vector> {
        let c = self.sys.c_with_demand(omega);
        let h = self.value.solve_h(rho, &c)?;
        let drift = &self.closed_loop * x - self.value.gain() * h + c;
        let mut next = x + drift * dt;
        if project {
            self.sys.layout().project(&mut next);
        }
        Ok(next)
    }
}

/// Advances every agent by one step. Returns the new population and the
/// sink demands drawn, agent-major.
pub fn step_population(
    pop: &AgentPopulation,
    ctx: &SimContext,
    cfg: &SimConfig,
    pool: &rayon::ThreadPool,
) -> Result<(AgentPopulation, Vec<f64>)> {
    if pop.p() != ctx.op.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} populations on a {}-node topology",
            pop.p(),
            ctx.op.p()
        )));
    }
    let n = pop.samples_per_population;
    let step = pop.step;
    let sinks = cfg.network.sink_nodes();
    let results: Vec<Result<(Vector, Vec<f64>)>> = pool.install(|| {
        (0..pop.states.len())
            .into_par_iter()
            .map(|a| {
                let k = a / n;
                let rho = ctx.op.average(k, &pop.means_snapshot);
                let mut rng = pop.streams[a].rng(step as u64, TAG_DEMAND);
                let omega = sample_demand(cfg, &mut rng)?;
                let next = ctx.agent_update(&pop.states[a], &rho, &omega, cfg.dt, cfg.project)?;
                let norm = next.amax();
                if !(norm <= SIM_DIVERGENCE_BOUND) {
                    return Err(Error::Diverged { step: step + 1, norm });
                }
                Ok((next, sinks.iter().map(|&v| omega[v]).collect()))
            })
            .collect()
    });
    let mut states = Vec::with_capacity(results.len());
    let mut demands = Vec::with_capacity(results.len() * sinks.len());
    for (a, r) in results.into_iter().enumerate() {
        match r {
            Ok((x, d)) => {
                states.push(x);
                demands.extend(d);
            }
            Err(e) => {
                return Err(Error::Agent {
                    agent: a,
                    source: Box::new(e),
                })
            }
        }
    }
    let mut next = AgentPopulation {
        layout: pop.layout,
        samples_per_population: n,
        states,
        streams: pop.streams.clone(),
        means_snapshot: Vec::new(),
        step: step + 1,
    };
    next.refresh_means();
    Ok((next, demands))
}

/// Per-edge population standard deviation of capacities across agents.
#[derive(Clone, Debug, PartialEq)]
pub struct SpreadMetric {
    pub per_edge: Vector,
    pub max: f64,
    pub mean: f64,
}

/// `caps` holds one row per agent and one column per edge.
pub fn spread_metric(caps: &Matrix) -> Result<SpreadMetric> {
    let p = caps.nrows();
    if p < 2 {
        return Err(Error::InvalidParams(format!("spread needs at least 2 agents, got {p}")));
    }
    let per_edge = Vector::from_fn(caps.ncols(), |e, _| {
        let col = caps.column(e);
        let mean = col.sum() / p as f64;
        (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p as f64).sqrt()
    });
    Ok(SpreadMetric {
        max: per_edge.max(),
        mean: per_edge.mean(),
        per_edge,
    })
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    /// One `p × m` capacity matrix per recorded step.
    pub capacities: Vec<Matrix>,
    /// Population means per step, when requested.
    pub states: Option<Vec<Vec<Vector>>>,
    /// Sink demands per step after the initial one, agent-major.
    pub demands: Vec<Vec<f64>>,
    pub sink_nodes: Vec<usize>,
    pub spread: Vec<SpreadMetric>,
    pub final_means: Vec<Vector>,
    pub edge_labels: Vec<String>,
    pub metadata: Vec<(String, String)>,
}

impl TrajectoryLog {
    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// Step of the first sample with `spread_max ≤ fraction · spread_max(0)`.
    pub fn time_to_fraction(&self, fraction: f64) -> Option<usize> {
        time_to_fraction(&self.spread, fraction)
    }

    pub fn write_long_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,time,agent,edge,c_value")?;
        for (step, (t, caps)) in self.times.iter().zip(&self.capacities).enumerate() {
            for agent in 0..caps.nrows() {
                for (e, label) in self.edge_labels.iter().enumerate() {
                    writeln!(w, "{step},{t},{agent},{label},{}", caps[(agent, e)])?;
                }
            }
        }
        w.flush()
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,time,spread_max,spread_mean")?;
        for (step, (t, s)) in self.times.iter().zip(&self.spread).enumerate() {
            writeln!(w, "{step},{t},{},{}", s.max, s.mean)?;
        }
        w.flush()
    }

    pub fn metadata_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            if v.contains('\n') {
                let _ = writeln!(s, "[{k}]");
                s.push_str(v);
                if !v.ends_with('\n') {
                    s.push('\n');
                }
            } else {
                let _ = writeln!(s, "{k}: {v}");
            }
        }
        s
    }

    /// Writes `trajectory.csv`, `summary.csv` and `metadata.txt` into `dir`.
    pub fn write_all(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let long = dir.join("trajectory.csv");
        let summary = dir.join("summary.csv");
        let meta = dir.join("metadata.txt");
        self.write_long_csv(io::BufWriter::new(std::fs::File::create(&long)?))?;
        self.write_summary_csv(io::BufWriter::new(std::fs::File::create(&summary)?))?;
        std::fs::write(&meta, self.metadata_text())?;
        Ok(vec![long, summary, meta])
    }

    /// Recasts a primal-dual run as a one-agent log with the same schema.
    pub fn from_pd_run(run: &PdRun, dt: f64, edge_labels: Vec<String>) -> Self {
        let zero = |m: usize| SpreadMetric {
            per_edge: Vector::zeros(m),
            max: 0.0,
            mean: 0.0,
        };
        let m = edge_labels.len();
        let capacities: Vec<Matrix> = run
            .trajectory
            .iter()
            .map(|x| Matrix::from_row_slice(1, m, x.c().as_slice()))
            .collect();
        Self {
            times: run.times.clone(),
            spread: capacities.iter().map(|_| zero(m)).collect(),
            capacities,
            states: Some(run.trajectory.iter().map(|x| vec![x.as_vector().clone()]).collect()),
            demands: Vec::new(),
            sink_nodes: Vec::new(),
            final_means: vec![run.final_state.as_vector().clone()],
            edge_labels,
            metadata: vec![
                ("mode".into(), "pd-run".into()),
                ("dt".into(), dt.to_string()),
                ("steps".into(), run.report.steps.to_string()),
                ("converged".into(), run.report.converged.to_string()),
                ("kkt_residual".into(), run.report.kkt.max_abs().to_string()),
            ],
        }
    }
}

pub fn time_to_fraction(spread: &[SpreadMetric], fraction: f64) -> Option<usize> {
    let first = spread.first()?.max;
    spread.iter().position(|s| s.max <= fraction * first)
}

fn capacity_matrix(means: &[Vector], layout: Layout) -> Matrix {
    let c = layout.c();
    Matrix::from_fn(means.len(), layout.m, |k, e| means[k][c.start + e])
}

pub fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParams(format!("cannot build worker pool: {e}")))
}

/// Full pipeline: topology, stationary feedback, stepping and logging.
pub fn run_simulation(cfg: &SimConfig) -> Result<TrajectoryLog> {
    let ctx = SimContext::new(cfg)?;
    let layout = ctx.sys.layout();
    let pool = build_pool(cfg.workers)?;
    let mut pop = init_population(cfg, layout)?;

    let mut times = Vec::with_capacity(cfg.steps + 1);
    let mut capacities = Vec::with_capacity(cfg.steps + 1);
    let mut spread = Vec::with_capacity(cfg.steps + 1);
    let mut states = cfg.record_states.then(Vec::new);
    let mut demands = Vec::with_capacity(cfg.steps);
    let mut record = |pop: &AgentPopulation| -> Result<()> {
        times.push(pop.step as f64 * cfg.dt);
        let caps = capacity_matrix(&pop.means_snapshot, layout);
        spread.push(spread_metric(&caps)?);
        capacities.push(caps);
        if let Some(s) = states.as_mut() {
            s.push(pop.means_snapshot.clone());
        }
        Ok(())
    };
    record(&pop)?;
    for _ in 0..cfg.steps {
        let (next, d) = step_population(&pop, &ctx, cfg, &pool)?;
        pop = next;
        demands.push(d);
        record(&pop)?;
    }

    let metadata = vec![
        ("mode".to_string(), "simulate".to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("care_residual".into(), format!("{:e}", ctx.value.care_residual(ctx.sys.a()))),
        ("projection".into(), cfg.project.to_string()),
        ("config".into(), cfg.describe()),
    ];
    Ok(TrajectoryLog {
        times,
        capacities,
        states,
        demands,
        sink_nodes: cfg.network.sink_nodes().to_vec(),
        spread,
        final_means: pop.means_snapshot,
        edge_labels: cfg.network.edge_labels().to_vec(),
        metadata,
    })
}
