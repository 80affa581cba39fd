//! Communication graphs between agents and the matrices the consensus
//! updates are built from.
//!
//! Edges are unordered pairs stored as `(i, j)` with `i > j`. The signed
//! incidence matrix puts `+1` on the larger endpoint and `-1` on the smaller.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Eigenvalues of `A'A` below this are treated as the zero eigenvalue.
const ZERO_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct CommGraph {
    n_agents: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    n_agents: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<RawGraph> for CommGraph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        CommGraph::new(raw.n_agents, raw.edges.iter().map(|e| (e[0], e[1])))
    }
}

impl From<CommGraph> for RawGraph {
    fn from(g: CommGraph) -> Self {
        RawGraph {
            n_agents: g.n_agents,
            edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
        }
    }
}

impl CommGraph {
    /// Builds a validated graph. Pairs may be given in either orientation;
    /// they are normalized to `(larger, smaller)` and sorted.
    pub fn new(n_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_agents < 2 {
            return Err(invalid(format!("a communication graph needs at least 2 agents, got {n_agents}")));
        }
        let mut norm = Vec::new();
        for (a, b) in edges {
            if a >= n_agents || b >= n_agents {
                return Err(invalid(format!("edge ({a},{b}) out of range for {n_agents} agents")));
            }
            if a == b {
                return Err(invalid(format!("self-loop on agent {a}")));
            }
            norm.push((a.max(b), a.min(b)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(invalid(format!("duplicate edge ({},{})", w[0].0, w[0].1)));
        }
        let g = CommGraph { n_agents, edges: norm };
        if let Some(i) = g.degrees().iter().position(|&d| d == 0) {
            return Err(invalid(format!("agent {i} has no neighbors")));
        }
        if component_labels(n_agents, &g.edges).iter().any(|&c| c != 0) {
            return Err(invalid("communication graph is disconnected"));
        }
        Ok(g)
    }

    pub fn complete(n_agents: usize) -> Result<Self> {
        let edges = (0..n_agents).flat_map(|i| (0..i).map(move |j| (i, j)));
        Self::new(n_agents, edges)
    }

    pub fn ring(n_agents: usize) -> Result<Self> {
        if n_agents < 3 {
            return Self::complete(n_agents);
        }
        Self::new(n_agents, (0..n_agents).map(|i| (i, (i + 1) % n_agents)))
    }

    pub fn path(n_agents: usize) -> Result<Self> {
        Self::new(n_agents, (1..n_agents).map(|i| (i, i - 1)))
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_agents];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    /// Neighbors of `agent` in increasing index order.
    pub fn neighbors(&self, agent: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(i, j)| {
                if i == agent {
                    Some(j)
                } else if j == agent {
                    Some(i)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = (a.max(b), a.min(b));
        self.edges.binary_search(&key).is_ok()
    }
}

/// Labels each node with a component id; ids are assigned in order of the
/// smallest node of each component, so a connected graph is all zeros.
fn component_labels(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = vec![0; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        out[v] = label[r];
    }
    out
}

/// A sampled graph together with how many edges connectivity repair added.
#[derive(Debug, Clone)]
pub struct SampledGraph {
    pub graph: CommGraph,
    pub sampled_edges: usize,
    pub repair_edges: usize,
}

/// Erdős–Rényi graph: every unordered pair is kept independently with
/// probability `connectivity_ratio`. A disconnected sample is repaired by
/// joining its components with a random spanning tree.
pub fn random_graph(n_agents: usize, connectivity_ratio: f64, seed: u64) -> Result<CommGraph> {
    random_graph_with_report(n_agents, connectivity_ratio, seed).map(|s| s.graph)
}

pub fn random_graph_with_report(n_agents: usize, connectivity_ratio: f64, seed: u64) -> Result<SampledGraph> {
    if n_agents < 2 {
        return Err(invalid(format!("random_graph needs n_agents >= 2, got {n_agents}")));
    }
    if !(connectivity_ratio > 0.0 && connectivity_ratio <= 1.0) {
        return Err(invalid(format!("connectivity ratio must lie in (0, 1], got {connectivity_ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 1..n_agents {
        for j in 0..i {
            if rng.gen::<f64>() < connectivity_ratio {
                edges.push((i, j));
            }
        }
    }
    let sampled_edges = edges.len();

    let labels = component_labels(n_agents, &edges);
    let n_comp = labels.iter().max().map_or(0, |m| m + 1);
    if n_comp > 1 {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
        for (v, &c) in labels.iter().enumerate() {
            members[c].push(v);
        }
        let mut order: Vec<usize> = (0..n_comp).collect();
        order.shuffle(&mut rng);
        for k in 1..n_comp {
            let attach = order[rng.gen_range(0..k)];
            let a = *members[order[k]].choose(&mut rng).expect("non-empty component");
            let b = *members[attach].choose(&mut rng).expect("non-empty component");
            edges.push((a.max(b), a.min(b)));
        }
    }
    let repair_edges = edges.len() - sampled_edges;
    Ok(SampledGraph {
        graph: CommGraph::new(n_agents, edges)?,
        sampled_edges,
        repair_edges,
    })
}

/// Degree, incidence and Laplacian matrices of a communication graph.
#[derive(Debug, Clone)]
pub struct GraphMatrices {
    pub degree: DMatrix<f64>,
    /// Signed node-edge incidence, `E x N`.
    pub incidence: DMatrix<f64>,
    /// Signless incidence `|A|`, `E x N`.
    pub signless_incidence: DMatrix<f64>,
    /// Signless Laplacian `B'B`.
    pub lplus: DMatrix<f64>,
    /// Graph Laplacian `A'A`.
    pub lminus: DMatrix<f64>,
    /// Smallest nonzero eigenvalue of `A'A`.
    pub sigma_min: f64,
}

impl GraphMatrices {
    pub fn n_agents(&self) -> usize {
        self.degree.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.degree.diagonal().iter().copied().collect()
    }

    /// Spectral norm of `B'B`, the largest eigenvalue of the signless Laplacian.
    pub fn lplus_norm(&self) -> f64 {
        SymmetricEigen::new(self.lplus.clone())
            .eigenvalues
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v))
    }
}

pub fn build_matrices(g: &CommGraph) -> GraphMatrices {
    let n = g.n_agents();
    let e = g.n_edges();
    let mut a = DMatrix::zeros(e, n);
    for (row, &(i, j)) in g.edges().iter().enumerate() {
        a[(row, i)] = 1.0;
        a[(row, j)] = -1.0;
    }
    let b = a.abs();
    let degree = DMatrix::from_diagonal(&DVector::from_iterator(n, g.degrees().into_iter().map(|d| d as f64)));
    let lplus = b.transpose() * &b;
    let lminus = a.transpose() * &a;
    let sigma_min = SymmetricEigen::new(lminus.clone())
        .eigenvalues
        .iter()
        .copied()
        .filter(|&v| v > ZERO_EIGEN_TOL)
        .fold(f64::INFINITY, f64::min);
    GraphMatrices {
        degree,
        incidence: a,
        signless_incidence: b,
        lplus,
        lminus,
        sigma_min,
    }
}

/// Nonnegative mixing matrix used by the accelerated consensus update.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub w: DMatrix<f64>,
}

impl MixingMatrix {
    pub fn identity(n: usize) -> Self {
        MixingMatrix { w: DMatrix::identity(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Metropolis weights: `1 / (1 + max(d_i, d_j))` on edges, remaining mass on
/// the diagonal.
pub fn metropolis_weights(g: &CommGraph) -> MixingMatrix {
    let n = g.n_agents();
    let deg = g.degrees();
    let mut w = DMatrix::zeros(n, n);
    for &(i, j) in g.edges() {
        let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix { w }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingReport {
    pub nonnegative: bool,
    pub doubly_stochastic: bool,
    pub respects_graph: bool,
    /// Spectral norm of `W'(I - 11'/N)W`.
    pub spectral_norm: f64,
    pub contracts: bool,
}

impl MixingReport {
    pub fn pass(&self) -> bool {
        self.nonnegative && self.doubly_stochastic && self.respects_graph && self.contracts
    }
}

pub const STOCHASTIC_TOL: f64 = 1e-12;

pub fn validate_mixing(w: &MixingMatrix, g: &CommGraph) -> Result<MixingReport> {
    let n = g.n_agents();
    if w.w.nrows() != n || w.w.ncols() != n {
        return Err(invalid(format!(
            "mixing matrix is {}x{}, graph has {n} agents",
            w.w.nrows(),
            w.w.ncols()
        )));
    }
    let nonnegative = w.w.iter().all(|&v| v >= 0.0);
    let rows_ok = w.w.row_iter().all(|r| (r.sum() - 1.0).abs() <= STOCHASTIC_TOL);
    let cols_ok = w.w.column_iter().all(|c| (c.sum() - 1.0).abs() <= STOCHASTIC_TOL);
    let mut respects_graph = true;
    for i in 0..n {
        for j in 0..n {
            if i != j && !g.has_edge(i, j) && w.w[(i, j)] != 0.0 {
                respects_graph = false;
            }
        }
    }
    let centering = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let m = w.w.transpose() * centering * &w.w;
    let spectral_norm = power_iteration_norm(&m, NORM_REL_TOL, 10_000);
    Ok(MixingReport {
        nonnegative,
        doubly_stochastic: rows_ok && cols_ok,
        respects_graph,
        spectral_norm,
        // Round-off can leave a non-contracting norm a hair below one.
        contracts: spectral_norm < 1.0 - 10.0 * NORM_REL_TOL,
    })
}

const NORM_REL_TOL: f64 = 1e-10;

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
pub fn power_iteration_norm(m: &DMatrix<f64>, rel_tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    // Deterministic start vector with no special symmetry.
    let mut v = DVector::from_iterator(n, (0..n).map(|i| 1.0 + ((i as f64 + 1.0) * 0.754_877_666).sin()));
    let nv = v.norm();
    v /= nv;
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let mv = m * &v;
        let norm = mv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = mv / norm;
        if (next - estimate).abs() <= rel_tol * next {
            return next;
        }
        estimate = next;
    }
    estimate
}
