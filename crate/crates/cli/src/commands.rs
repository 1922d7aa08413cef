use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use mfcap::consensus::{build_consensus_system, ConsensusForm, ConsensusReport};
use mfcap::dynamics::{assemble_system, pd_run, PdRun};
use mfcap::micro::{kkt_residual, solve_deterministic_qp, suboptimality_gap, ActiveConstraint};
use mfcap::mfg::{build_penalties, ControlMatrix};
use mfcap::numerics::{care_residual, solve_care, spectral_abscissa, CareConfig, CareForm};
use mfcap::sim::{run_simulation, SimContext, TrajectoryLog};
use mfcap::state::StackedState;

use crate::config::{read_config_text, Config, FileConfig};
use crate::error::CliError;
use crate::plot::emit_plots;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Simulate,
    Oracle,
    PdRun,
    ConsensusAnalyze,
    CareCheck,
}

#[derive(Debug, Parser)]
#[command(name = "mfcap", version, allow_negative_numbers = true, about = "Mean-field capacity design: simulation, oracle and analysis tools")]
pub struct Cli {
    /// Mode to run; may also be given with --mode.
    #[arg(value_enum)]
    pub command: Option<Mode>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Configuration file, or `example` for the bundled example.
    #[arg(long, default_value = "example")]
    pub config: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub no_plot: bool,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    /// Comma-separated fixed demand for the oracle and primal-dual modes.
    #[arg(long, allow_hyphen_values = true)]
    pub omega: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Cli {
    pub fn resolved_mode(&self) -> Result<Mode, CliError> {
        match (self.command, self.mode) {
            (Some(a), Some(b)) if a != b => Err(CliError::validation(
                "ConflictingMode",
                format!("positional mode {a:?} disagrees with --mode {b:?}"),
            )),
            (Some(a), _) | (None, Some(a)) => Ok(a),
            (None, None) => Err(CliError::validation("MissingMode", "give a mode, e.g. `mfcap simulate`")),
        }
    }

    fn apply_overrides(&self, file: &mut FileConfig) -> Result<(), CliError> {
        if let Some(v) = self.seed {
            file.simulation.seed = v;
        }
        if let Some(v) = self.agents {
            file.simulation.agents = v;
        }
        if let Some(v) = self.steps {
            file.simulation.steps = v;
        }
        if let Some(v) = self.dt {
            file.simulation.dt = v;
        }
        if let Some(v) = self.q {
            file.penalties.q = v;
        }
        if let Some(v) = self.r {
            file.penalties.r = v;
        }
        if let Some(v) = self.s {
            file.penalties.s = v;
        }
        if let Some(v) = self.workers {
            file.simulation.workers = Some(v);
        }
        if let Some(text) = &self.omega {
            file.primal_dual.omega = text
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Parse(format!("--omega: {e}")))?;
        }
        Ok(())
    }

    /// Loads the configuration named by `--config` with flag overrides.
    pub fn load_config(&self) -> Result<Config, CliError> {
        let mut file = FileConfig::parse(&read_config_text(&self.config)?)?;
        self.apply_overrides(&mut file)?;
        file.validate()
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, CliError> {
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Runs one mode and returns the text printed on success.
pub fn dispatch(cli: &Cli) -> Result<String, CliError> {
    let mode = cli.resolved_mode()?;
    let cfg = cli.load_config()?;
    ensure_dir(&cli.out)?;
    match mode {
        Mode::Simulate => simulate(&cfg, cli),
        Mode::Oracle => oracle(&cfg, &cli.out),
        Mode::PdRun => primal_dual(&cfg, cli),
        Mode::ConsensusAnalyze => consensus(&cfg, &cli.out),
        Mode::CareCheck => care_check(&cfg, &cli.out),
    }
}

fn simulate(cfg: &Config, cli: &Cli) -> Result<String, CliError> {
    let sim = cfg.sim_config()?;
    let start = Instant::now();
    let log = run_simulation(&sim)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut files = log.write_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    files.push(write(cli.out.join("config.toml"), &cfg.file.to_toml())?);
    if !cli.no_plot {
        let title = format!("capacities, Q = {}, R = {}", sim.q_weight, sim.r_weight);
        files.push(emit_plots(&log, &cli.out, &title)?);
    }
    let first = log.spread[0].max;
    let last = log.spread.last().map_or(first, |s| s.max);
    let mut out = String::new();
    let _ = writeln!(out, "agents: {}  steps: {}  dt: {}  seed: {}", sim.p, sim.steps, sim.dt, sim.seed);
    let _ = writeln!(out, "initial spread: {first:.6}");
    let _ = writeln!(out, "final spread: {last:.6}  (ratio {:.6})", last / first);
    match log.time_to_fraction(0.2) {
        Some(s) => {
            let _ = writeln!(out, "steps to 20% spread: {s}");
        }
        None => {
            let _ = writeln!(out, "steps to 20% spread: not reached");
        }
    }
    let _ = writeln!(out, "elapsed: {elapsed:.3} s");
    for f in files {
        let _ = writeln!(out, "wrote {}", f.display());
    }
    Ok(out)
}

fn oracle(cfg: &Config, out_dir: &Path) -> Result<String, CliError> {
    let sol = solve_deterministic_qp(&cfg.network, &cfg.costs, &cfg.omega)?;
    let state = sol.to_state(cfg.network.layout())?;
    let kkt = kkt_residual(&cfg.network, &cfg.costs, &state, &cfg.omega)?.max_abs();

    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>12} {:>12} {:>12}  active", "edge", "u", "c", "mu");
    let mut csv = String::from("edge,u,c,mu,active\n");
    for (e, label) in cfg.network.edge_labels().iter().enumerate() {
        let tags: Vec<&str> = sol
            .active_set
            .iter()
            .filter_map(|a| match *a {
                ActiveConstraint::FlowZero(i) if i == e => Some("flow-zero"),
                ActiveConstraint::CapacityBinding(i) if i == e => Some("binding"),
                ActiveConstraint::CapacityZero(i) if i == e => Some("capacity-zero"),
                _ => None,
            })
            .collect();
        let active = if tags.is_empty() { "-".to_string() } else { tags.join("+") };
        let _ = writeln!(out, "{label:<8} {:>12.6} {:>12.6} {:>12.6}  {active}", sol.u[e], sol.c[e], sol.mu[e]);
        let _ = writeln!(csv, "{label},{},{},{},{active}", sol.u[e], sol.c[e], sol.mu[e]);
    }
    let lambda: Vec<String> = sol.lambda.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(out, "lambda: [{}]", lambda.join(", "));
    let _ = writeln!(out, "objective: {:.9}", sol.objective);
    let _ = writeln!(out, "kkt residual: {kkt:.3e}");

    // Compare against the point reached by the projected primal-dual flow.
    let sys = assemble_system(&cfg.network, &cfg.costs, &cfg.omega)?;
    let pd = match pd_run(&sys, &StackedState::zeros(cfg.network.layout()), &cfg.pd_config()) {
        Ok(run) => Some(run),
        Err(mfcap::Error::MaxStepsExceeded(run)) => Some(*run),
        Err(_) => None,
    };
    if let Some(run) = pd {
        let u = run.final_state.u().into_owned();
        let c = run.final_state.c().into_owned();
        match suboptimality_gap(&cfg.network, &cfg.costs, &cfg.omega, &u, &c, &sol) {
            Ok(gap) => {
                let _ = writeln!(out, "primal-dual point after {} steps: suboptimality gap {gap:.3e}", run.report.steps);
            }
            Err(e) => {
                let _ = writeln!(out, "primal-dual point after {} steps: not comparable ({e})", run.report.steps);
            }
        }
    }
    let path = write(out_dir.join("oracle.csv"), &csv)?;
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(out)
}

fn pd_report(run: &PdRun) -> String {
    let r = &run.report;
    let mut out = String::new();
    let _ = writeln!(out, "steps: {}", r.steps);
    let _ = writeln!(out, "converged: {}", r.converged);
    let _ = writeln!(out, "final rate: {:.3e}", r.rate);
    let _ = writeln!(out, "kkt residual: {:.3e}", r.kkt.max_abs());
    for (name, block) in r.kkt.blocks() {
        let _ = writeln!(out, "  {name}: {:.3e}", block.amax());
    }
    let _ = writeln!(out, "largest clamped drift: {:.3e}", r.clamped_drift_max);
    let fmt = |v: nalgebra::DVectorView<'_, f64>| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ");
    let _ = writeln!(out, "u: [{}]", fmt(run.final_state.u()));
    let _ = writeln!(out, "c: [{}]", fmt(run.final_state.c()));
    out
}

fn primal_dual(cfg: &Config, cli: &Cli) -> Result<String, CliError> {
    let sys = assemble_system(&cfg.network, &cfg.costs, &cfg.omega)?;
    let pd = cfg.pd_config();
    let (run, failure) = match pd_run(&sys, &StackedState::zeros(cfg.network.layout()), &pd) {
        Ok(run) => (run, None),
        Err(mfcap::Error::MaxStepsExceeded(run)) => (*run, Some(mfcap::Error::NotConverged {
            iterations: pd.max_steps,
            residual: f64::NAN,
        })),
        Err(e) => return Err(e.into()),
    };
    let mut out = pd_report(&run);
    if let Ok(sol) = solve_deterministic_qp(&cfg.network, &cfg.costs, &cfg.omega) {
        let du = (run.final_state.u() - &sol.u).amax();
        let dc = (run.final_state.c() - &sol.c).amax();
        let _ = writeln!(out, "distance to oracle: u {du:.3e}, c {dc:.3e}");
    }
    let log = TrajectoryLog::from_pd_run(&run, pd.dt, cfg.network.edge_labels().to_vec());
    let files = log.write_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    write(cli.out.join("pd_report.txt"), &out)?;
    if !cli.no_plot {
        emit_plots(&log, &cli.out, "primal-dual capacities")?;
    }
    for f in files {
        let _ = writeln!(out, "wrote {}", f.display());
    }
    match failure {
        None => Ok(out),
        Some(e) => {
            print!("{out}");
            Err(CliError::Numerical(e))
        }
    }
}

fn consensus(cfg: &Config, out_dir: &Path) -> Result<String, CliError> {
    let sim = cfg.sim_config()?;
    let ctx = SimContext::new(&sim)?;
    let topo = sim.topology.build(sim.p)?;
    let layout = ctx.sys.layout();
    let full = build_consensus_system(&topo, &ctx.sys, &ctx.value, &ctx.pen.q, ConsensusForm::FullStacked, None)?;
    let full_report = ConsensusReport::new(&full, Vec::new())?;
    let mu = full_report.equilibrium.rows(layout.mu().start, layout.m).into_owned();
    let iso = build_consensus_system(&topo, &ctx.sys, &ctx.value, &ctx.pen.q, ConsensusForm::IsolatedC, Some(&mu))?;
    let mut iso_report = ConsensusReport::new(&iso, Vec::new())?;
    let c_full = full_report.equilibrium.rows(layout.c().start, layout.m);
    let gap = (iso_report.equilibrium.rows(0, layout.m) - c_full).amax();
    iso_report
        .notes
        .push(format!("capacity equilibrium differs from the full-stacked one by {gap:.6e} (max norm)"));

    let mut out = full_report.to_text();
    out.push('\n');
    out.push_str(&iso_report.to_text());
    write(out_dir.join("consensus.txt"), &out)?;
    write(out_dir.join("equilibrium_full.csv"), &full_report.equilibrium_csv())?;
    write(out_dir.join("equilibrium_isolated.csv"), &iso_report.equilibrium_csv())?;
    let _ = writeln!(out, "wrote {}", out_dir.join("consensus.txt").display());
    Ok(out)
}

fn care_check(cfg: &Config, out_dir: &Path) -> Result<String, CliError> {
    let sim = cfg.sim_config()?;
    let sys = assemble_system(&cfg.network, &cfg.costs, &cfg.omega)?;
    let layout = sys.layout();
    let ctrl = ControlMatrix::new(layout, sim.control_mode);
    let pen = build_penalties(layout, sim.q_weight, sim.r_weight, sim.s_weight, sim.control_mode)?;
    let start = Instant::now();
    let sol = solve_care(sys.a(), ctrl.matrix(), &pen.q, &pen.r, &CareConfig::default())?;
    let elapsed = start.elapsed().as_secs_f64();
    let r_inv = pen
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| CliError::validation("InvalidParams", "R is singular"))?;
    let s = ctrl.matrix() * r_inv * ctrl.matrix().transpose();
    let residual = care_residual(sys.a(), &s, &pen.q, &sol.phi, CareForm::StandardSymmetric).norm();
    let abscissa = spectral_abscissa(&(sys.a() - &s * &sol.phi))?;
    let mut out = String::new();
    let _ = writeln!(out, "state dimension: {}", layout.dim());
    let _ = writeln!(out, "riccati residual (Frobenius): {residual:.3e}");
    let _ = writeln!(out, "closed-loop spectral abscissa: {abscissa:.6e}");
    let _ = writeln!(out, "closed loop hurwitz: {}", abscissa < 0.0);
    let _ = writeln!(out, "solve time: {elapsed:.4} s");
    write(out_dir.join("care.txt"), &out)?;
    Ok(out)
}
