//! Communication topology between agent populations and the neighbor
//! averaging that produces each agent's aggregate ρ_k.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Undirected, connected, loop-free graph over `p` agents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroTopology {
    neighbors: Vec<Vec<usize>>,
}

impl MacroTopology {
    /// Builds a topology from an undirected edge list. Duplicate edges are
    /// merged; self-loops, out-of-range indices, isolated nodes and
    /// disconnected graphs are rejected.
    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if p < 2 {
            return Err(Error::InvalidParams(format!("need at least 2 agents, got {p}")));
        }
        let mut neighbors = vec![Vec::new(); p];
        for &(i, j) in edges {
            if i >= p || j >= p {
                return Err(Error::InvalidParams(format!("edge ({i}, {j}) out of range for {p} agents")));
            }
            if i == j {
                return Err(Error::InvalidParams(format!("self-loop at agent {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let topo = Self { neighbors };
        if let Some(k) = (0..p).find(|&k| topo.neighbors[k].is_empty()) {
            return Err(Error::InvalidParams(format!("agent {k} has no neighbors")));
        }
        if !topo.is_connected() {
            return Err(Error::InvalidParams("communication graph is not connected".into()));
        }
        Ok(topo)
    }

    /// Barabási–Albert preferential attachment: a clique on `attach + 1`
    /// nodes, then each new node links to `attach` distinct existing nodes
    /// drawn with probability proportional to their degree.
    pub fn scale_free(p: usize, attach: usize, seed: u64) -> Result<Self> {
        if attach < 1 || p < attach + 1 {
            return Err(Error::InvalidParams(format!(
                "scale-free generation needs p >= attach + 1 >= 2, got p = {p}, attach = {attach}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::with_capacity(attach * p);
        // Each edge contributes both endpoints, so uniform draws from this
        // list are degree-proportional.
        let mut ends: Vec<usize> = Vec::with_capacity(2 * attach * p);
        for i in 0..=attach {
            for j in (i + 1)..=attach {
                edges.push((i, j));
                ends.extend([i, j]);
            }
        }
        let mut targets = Vec::with_capacity(attach);
        for new in (attach + 1)..p {
            targets.clear();
            while targets.len() < attach {
                let t = ends[rng.random_range(0..ends.len())];
                if !targets.contains(&t) {
                    targets.push(t);
                }
            }
            for &t in &targets {
                edges.push((t, new));
                ends.extend([t, new]);
            }
        }
        Self::from_edges(p, &edges)
    }

    pub fn ring(p: usize) -> Result<Self> {
        let edges: Vec<_> = (0..p).map(|i| (i, (i + 1) % p)).filter(|(i, j)| i != j).collect();
        Self::from_edges(p, &edges)
    }

    pub fn path(p: usize) -> Result<Self> {
        let edges: Vec<_> = (1..p).map(|i| (i - 1, i)).collect();
        Self::from_edges(p, &edges)
    }

    pub fn complete(p: usize) -> Result<Self> {
        let edges: Vec<_> = (0..p).flat_map(|i| ((i + 1)..p).map(move |j| (i, j))).collect();
        Self::from_edges(p, &edges)
    }

    /// Agent 0 is the hub.
    pub fn star(p: usize) -> Result<Self> {
        let edges: Vec<_> = (1..p).map(|j| (0, j)).collect();
        Self::from_edges(p, &edges)
    }

    pub fn p(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighbor list `N(k)`, which excludes `k` itself.
    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges `(i, j)` with `i < j` in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.p())
            .flat_map(|i| self.neighbors[i].iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.p(), self.p());
        for (i, j) in self.edges() {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    /// Breadth-first search from agent 0.
    pub fn is_connected(&self) -> bool {
        let p = self.p();
        let mut seen = vec![false; p];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(k) = queue.pop_front() {
            for &j in &self.neighbors[k] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == p
    }

    /// One `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses an edge list. Blank lines and `#` comments are skipped. The
    /// agent count is the largest index plus one unless `p` is given.
    pub fn parse_edge_list(text: &str, p: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = || -> Result<usize> {
                parts
                    .next()
                    .ok_or_else(|| Error::InvalidParams(format!("line {}: expected two indices", no + 1)))?
                    .parse()
                    .map_err(|e| Error::InvalidParams(format!("line {}: {e}", no + 1)))
            };
            let (i, j) = (next()?, next()?);
            if parts.next().is_some() {
                return Err(Error::InvalidParams(format!("line {}: expected two indices", no + 1)));
            }
            edges.push((i, j));
        }
        let p = p.unwrap_or_else(|| edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0));
        Self::from_edges(p, &edges)
    }

    pub fn read_edge_list(path: &Path, p: Option<usize>) -> std::io::Result<Result<Self>> {
        Ok(Self::parse_edge_list(&std::fs::read_to_string(path)?, p))
    }

    pub fn write_edge_list(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_edge_list())
    }
}

/// Row-stochastic neighbor averaging `P[k, j] = 1/|N(k)|` for `j ∈ N(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOperator {
    topo: MacroTopology,
}

impl AggregationOperator {
    pub fn new(topo: &MacroTopology) -> Self {
        Self { topo: topo.clone() }
    }

    pub fn topology(&self) -> &MacroTopology {
        &self.topo
    }

    pub fn p(&self) -> usize {
        self.topo.p()
    }

    pub fn matrix(&self) -> Matrix {
        let p = self.p();
        let mut m = Matrix::zeros(p, p);
        for k in 0..p {
            let w = 1.0 / self.topo.degree(k) as f64;
            for &j in self.topo.neighbors(k) {
                m[(k, j)] = w;
            }
        }
        m
    }

    /// `D^{-1/2} Adj D^{-1/2}`, similar to `P` and symmetric, so its
    /// eigenvalues are the (real) spectrum of `P`.
    pub fn symmetric_form(&self) -> Matrix {
        let p = self.p();
        let d: Vec<f64> = (0..p).map(|k| (self.topo.degree(k) as f64).sqrt()).collect();
        let mut m = Matrix::zeros(p, p);
        for k in 0..p {
            for &j in self.topo.neighbors(k) {
                m[(k, j)] = 1.0 / (d[k] * d[j]);
            }
        }
        m
    }

    /// Eigenvalues of `P` in ascending order.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.symmetric_form().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Neighbor average for agent `k`.
    pub fn average(&self, k: usize, means: &[Vector]) -> Vector {
        let nbrs = self.topo.neighbors(k);
        let mut acc = Vector::zeros(means[k].len());
        for &j in nbrs {
            acc += &means[j];
        }
        acc / nbrs.len() as f64
    }
}

/// `ρ_k = Σ_{j ∈ N(k)} m̄_j / |N(k)|` for every agent.
pub fn aggregate_rho(op: &AggregationOperator, means: &[Vector]) -> Result<Vec<Vector>> {
    if means.len() != op.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} means for {} agents",
            means.len(),
            op.p()
        )));
    }
    if let Some(d) = means.first().map(|v| v.len()) {
        if means.iter().any(|v| v.len() != d) {
            return Err(Error::DimensionMismatch("agent means differ in length".into()));
        }
    }
    Ok((0..op.p()).into_par_iter().map(|k| op.average(k, means)).collect())
}

/// `I − P`; rows sum to zero.
pub fn laplacian(topo: &MacroTopology) -> Matrix {
    let p = topo.p();
    Matrix::identity(p, p) - AggregationOperator::new(topo).matrix()
}
