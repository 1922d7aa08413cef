//! On-disk configuration: a TOML file with dense row lists for matrices.

use std::path::Path;

use mfcap::dynamics::PdConfig;
use mfcap::micro::{CostParams, Demand, MicroNetwork};
use mfcap::mfg::ControlMode;
use mfcap::numerics::{Matrix, Vector};
use mfcap::sim::{SimConfig, TopologySpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Built-in configuration selected with `--config example`.
pub const BUNDLED_EXAMPLE: &str = include_str!("../configs/example.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub network: NetworkSection,
    pub costs: CostSection,
    pub demand: DemandSection,
    pub penalties: PenaltySection,
    pub simulation: SimulationSection,
    pub topology: TopologySection,
    pub primal_dual: PrimalDualSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// One row per node, one column per edge; `+1` marks the head.
    pub incidence: Vec<Vec<f64>>,
    pub sinks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_labels: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlKind {
    ScalarOnC,
    PerEdgeOnC,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub control: ControlKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub agents: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub init_mean: f64,
    pub init_std: f64,
    pub project: bool,
    pub samples_per_population: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    ScaleFree,
    Ring,
    Path,
    Complete,
    Star,
    Edges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attach: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimalDualSection {
    pub dt: f64,
    pub max_steps: usize,
    pub stop_tol: f64,
    pub projected: bool,
    pub record_stride: usize,
    /// Fixed demand used by the oracle and primal-dual modes.
    pub omega: Vec<f64>,
}

/// Validated configuration with the model objects already built.
#[derive(Clone, Debug)]
pub struct Config {
    pub file: FileConfig,
    pub network: MicroNetwork,
    pub costs: CostParams,
    pub omega: Demand,
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<Matrix, CliError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(CliError::validation("DimensionMismatch", format!("{field} is empty")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != ncols) {
        return Err(CliError::validation(
            "DimensionMismatch",
            format!("{field} row {i} has {} entries, expected {ncols}", rows[i].len()),
        ));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn core_err(field: &str) -> impl Fn(mfcap::Error) -> CliError + '_ {
    move |e| CliError::validation(e.kind(), format!("{field}: {e}"))
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn control_mode(&self) -> ControlMode {
        match self.penalties.control {
            ControlKind::ScalarOnC => ControlMode::ScalarOnC,
            ControlKind::PerEdgeOnC => ControlMode::PerEdgeOnC,
        }
    }

    pub fn topology_spec(&self) -> Result<TopologySpec, CliError> {
        let t = &self.topology;
        Ok(match t.kind {
            TopologyKind::ScaleFree => TopologySpec::ScaleFree {
                attach: t.attach.ok_or_else(|| CliError::validation("MissingField", "topology.attach is required for scale-free"))?,
                seed: t.seed.unwrap_or(0),
            },
            TopologyKind::Ring => TopologySpec::Ring,
            TopologyKind::Path => TopologySpec::Path,
            TopologyKind::Complete => TopologySpec::Complete,
            TopologyKind::Star => TopologySpec::Star,
            TopologyKind::Edges => TopologySpec::Edges(
                t.edges
                    .as_ref()
                    .ok_or_else(|| CliError::validation("MissingField", "topology.edges is required for kind = \"edges\""))?
                    .iter()
                    .map(|&[a, b]| (a, b))
                    .collect(),
            ),
        })
    }

    /// Builds and checks every model object.
    pub fn validate(self) -> Result<Config, CliError> {
        let inc = matrix(&self.network.incidence, "network.incidence")?;
        let network = match &self.network.edge_labels {
            Some(labels) => MicroNetwork::with_labels(inc, self.network.sinks.clone(), labels.clone()),
            None => MicroNetwork::new(inc, self.network.sinks.clone()),
        }
        .map_err(core_err("network"))?;
        let costs = CostParams::from_matrices(
            &matrix(&self.costs.q1, "costs.q1")?,
            &matrix(&self.costs.q2, "costs.q2")?,
            Vector::from_vec(self.costs.f1.clone()),
            Vector::from_vec(self.costs.f2.clone()),
        )
        .map_err(core_err("costs"))?;
        if costs.m() != network.m() {
            return Err(CliError::validation(
                "DimensionMismatch",
                format!("costs cover {} edges but the network has {}", costs.m(), network.m()),
            ));
        }
        let omega = Demand::new(&network, Vector::from_vec(self.primal_dual.omega.clone())).map_err(core_err("primal_dual.omega"))?;
        let cfg = Config {
            network,
            costs,
            omega,
            file: self,
        };
        cfg.sim_config()?.validate().map_err(core_err("simulation"))?;
        validate_pd(&cfg.pd_config())?;
        Ok(cfg)
    }
}

fn validate_pd(pd: &PdConfig) -> Result<(), CliError> {
    if !(pd.dt > 0.0) || !(pd.stop_tol >= 0.0) || pd.record_stride == 0 || pd.max_steps == 0 {
        return Err(CliError::validation(
            "InvalidParams",
            "primal_dual needs dt > 0, stop_tol >= 0, record_stride >= 1 and max_steps >= 1",
        ));
    }
    Ok(())
}

impl Config {
    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let f = &self.file;
        Ok(SimConfig {
            network: self.network.clone(),
            costs: self.costs.clone(),
            p: f.simulation.agents,
            dt: f.simulation.dt,
            steps: f.simulation.steps,
            seed: f.simulation.seed,
            init_mean: f.simulation.init_mean,
            init_std: f.simulation.init_std,
            demand_mean: Vector::from_vec(f.demand.mean.clone()),
            demand_std: Vector::from_vec(f.demand.std.clone()),
            q_weight: f.penalties.q,
            r_weight: f.penalties.r,
            s_weight: f.penalties.s,
            control_mode: f.control_mode(),
            project: f.simulation.project,
            topology: f.topology_spec()?,
            samples_per_population: f.simulation.samples_per_population,
            workers: f.simulation.workers,
            record_states: false,
        })
    }

    pub fn pd_config(&self) -> PdConfig {
        let pd = &self.file.primal_dual;
        PdConfig {
            dt: pd.dt,
            max_steps: pd.max_steps,
            stop_tol: pd.stop_tol,
            projected: pd.projected,
            record_stride: pd.record_stride,
        }
    }
}

/// Reads `source`, which is either `example` for the bundled file or a path.
pub fn parse_config(source: &str) -> Result<Config, CliError> {
    FileConfig::parse(&read_config_text(source)?)?.validate()
}

/// Raw text of `source`: the bundled file for `example`, otherwise a path.
pub fn read_config_text(source: &str) -> Result<String, CliError> {
    if source == "example" {
        return Ok(BUNDLED_EXAMPLE.to_string());
    }
    let path = Path::new(source);
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
