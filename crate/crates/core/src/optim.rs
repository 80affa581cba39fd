//! Consensus optimizers over stacked per-agent parameters.
//!
//! Two update rules share parameter layout: `N x P` matrices with one row per
//! agent. `proxpda_step` is the proximal primal-dual step driven by edge
//! multipliers; `decadam_step` mixes with a doubly stochastic matrix and then
//! takes an adaptive-moment step. Both treat each coordinate column
//! independently with the same `N x N` operator.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{GraphMatrices, MixingMatrix};

/// Per-agent parameters, one row per agent.
pub type StackedParams = DMatrix<f64>;

/// Stabilizer inside the adaptive denominator.
pub const EPS_ADAM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Minimize (value networks).
    Descent,
    /// Maximize (dual networks).
    Ascent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        }
    }
}

/// Stacks per-agent vectors into an `N x P` matrix.
pub fn stack(rows: &[&[f64]]) -> Result<StackedParams> {
    let Some(first) = rows.first() else {
        return Err(invalid("cannot stack zero agents"));
    };
    let p = first.len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(invalid("all agents must share one parameter length"));
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

/// Row `i` as a vector.
pub fn row_vec(m: &StackedParams, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Frobenius norm of the deviation from the agent mean, `‖(I − 11'/N)θ‖`.
pub fn disagreement(theta: &StackedParams) -> f64 {
    let n = theta.nrows() as f64;
    let mean = theta.row_sum() / n;
    let mut acc = 0.0;
    for r in theta.row_iter() {
        acc += (r - &mean).norm_squared();
    }
    acc.sqrt()
}

/// Edge multipliers and the precomputed proximal operators.
#[derive(Debug, Clone)]
pub struct ConsensusState {
    /// `E x P`, initialized to zero.
    pub mu: DMatrix<f64>,
    pub alpha: f64,
    matrices: Arc<GraphMatrices>,
    /// `½ D⁻¹ L⁺`
    mix: DMatrix<f64>,
    /// `½ D⁻¹ A'`
    half_dinv_at: DMatrix<f64>,
    /// `½ D⁻¹` diagonal
    half_dinv: DVector<f64>,
}

impl ConsensusState {
    pub fn new(matrices: Arc<GraphMatrices>, n_params: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid(format!("step size must be positive, got {alpha}")));
        }
        let deg = matrices.degrees();
        if let Some(i) = deg.iter().position(|&d| d == 0.0) {
            return Err(invalid(format!("agent {i} has no neighbors; the degree matrix is singular")));
        }
        let half_dinv = DVector::from_iterator(deg.len(), deg.iter().map(|d| 0.5 / d));
        let mix = DMatrix::from_diagonal(&half_dinv) * &matrices.lplus;
        let half_dinv_at = DMatrix::from_diagonal(&half_dinv) * matrices.incidence.transpose();
        Ok(ConsensusState {
            mu: DMatrix::zeros(matrices.n_edges(), n_params),
            alpha,
            matrices,
            mix,
            half_dinv_at,
            half_dinv,
        })
    }

    pub fn matrices(&self) -> &GraphMatrices {
        &self.matrices
    }
}

/// One proximal primal-dual round: the primal update
/// `θ' = ½D⁻¹L⁺θ − (α/2)D⁻¹A'μ ∓ (α/2)D⁻¹g`, then `μ' = μ + Aθ'/α`.
pub fn proxpda_step(theta: &StackedParams, grads: &StackedParams, state: &mut ConsensusState, direction: Direction) -> Result<StackedParams> {
    let n = state.matrices.n_agents();
    if theta.nrows() != n || theta.shape() != grads.shape() || theta.ncols() != state.mu.ncols() {
        return Err(invalid(format!(
            "shape mismatch: theta {:?}, grads {:?}, multipliers {:?}",
            theta.shape(),
            grads.shape(),
            state.mu.shape()
        )));
    }
    let a = state.alpha;
    let mut next = &state.mix * theta - (&state.half_dinv_at * &state.mu) * a;
    let s = direction.sign() * a;
    for j in 0..next.ncols() {
        for i in 0..n {
            next[(i, j)] -= s * state.half_dinv[i] * grads[(i, j)];
        }
    }
    state.mu += (&state.matrices.incidence * &next) / a;
    Ok(next)
}

/// `θ − α g` per agent, no communication.
pub fn plain_sgd_step(theta: &[f64], grads: &[f64], alpha: f64) -> Vec<f64> {
    theta.iter().zip(grads).map(|(t, g)| t - alpha * g).collect()
}

/// In-place variant of [`plain_sgd_step`] with a direction.
pub(crate) fn sgd_in_place(theta: &mut [f64], grads: &[f64], alpha: f64, direction: Direction) {
    let s = direction.sign() * alpha;
    for (t, g) in theta.iter_mut().zip(grads) {
        *t -= s * g;
    }
}

/// Moment estimates for the mixed adaptive-momentum update.
#[derive(Debug, Clone, PartialEq)]
pub struct DecAdamState {
    pub m: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl DecAdamState {
    pub fn new(n_agents: usize, n_params: usize, alpha: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(alpha > 0.0) {
            return Err(invalid("moment rates must lie in [0, 1) and the step size must be positive"));
        }
        Ok(DecAdamState {
            m: DMatrix::zeros(n_agents, n_params),
            w: DMatrix::zeros(n_agents, n_params),
            beta1,
            beta2,
            alpha,
            eps: EPS_ADAM,
        })
    }
}

/// `m' = β₁m + (1−β₁)(±g)`, `w' = β₂w + (1−β₂)g²`, `θ' = Wθ − α m'/(√w' + ε)`.
///
/// No bias correction is applied. For ascent the first moment accumulates
/// `−g`, so the same subtraction climbs the objective.
pub fn decadam_step(theta: &StackedParams, grads: &StackedParams, adam: &mut DecAdamState, w: &MixingMatrix, direction: Direction) -> Result<StackedParams> {
    if theta.shape() != grads.shape() || theta.shape() != adam.m.shape() || w.dim() != theta.nrows() {
        return Err(invalid(format!(
            "shape mismatch: theta {:?}, grads {:?}, moments {:?}, mixing {}",
            theta.shape(),
            grads.shape(),
            adam.m.shape(),
            w.dim()
        )));
    }
    let mut next = &w.w * theta;
    moment_update(&mut next, grads, adam, direction);
    Ok(next)
}

fn moment_update(theta: &mut DMatrix<f64>, grads: &DMatrix<f64>, adam: &mut DecAdamState, direction: Direction) {
    let s = direction.sign();
    let (b1, b2) = (adam.beta1, adam.beta2);
    for ((t, &g), (m, v)) in theta.iter_mut().zip(grads.iter()).zip(adam.m.iter_mut().zip(adam.w.iter_mut())) {
        *m = b1 * *m + (1.0 - b1) * (s * g);
        *v = b2 * *v + (1.0 - b2) * g * g;
        *t -= adam.alpha * *m / (v.sqrt() + adam.eps);
    }
}

/// The same moment update for one agent's private parameters (no mixing).
pub fn local_adam_step(theta: &mut [f64], grads: &[f64], adam: &mut DecAdamState, direction: Direction) -> Result<()> {
    if adam.m.nrows() != 1 || adam.m.ncols() != theta.len() || grads.len() != theta.len() {
        return Err(invalid("local moment state must be 1 x P and match the parameters"));
    }
    let mut t = DMatrix::from_row_slice(1, theta.len(), theta);
    let g = DMatrix::from_row_slice(1, grads.len(), grads);
    moment_update(&mut t, &g, adam, direction);
    theta.copy_from_slice(t.as_slice());
    Ok(())
}

/// Stationarity-plus-feasibility measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QDiagnostic {
    pub q_value: f64,
    pub gradient_norm_sq: f64,
    pub constraint_violation_sq: f64,
}

/// `‖∇f(x) + A'μ + βA'Ax‖² + ‖Ax‖²`, summed over coordinate columns.
/// Consensus constraints have zero offset.
pub fn q_criterion(x: &StackedParams, mu: &DMatrix<f64>, grads_at_x: &StackedParams, matrices: &GraphMatrices, beta: f64) -> Result<QDiagnostic> {
    if x.shape() != grads_at_x.shape() || x.nrows() != matrices.n_agents() || mu.shape() != (matrices.n_edges(), x.ncols()) {
        return Err(invalid("q_criterion: shape mismatch"));
    }
    let a = &matrices.incidence;
    let ax = a * x;
    let at = a.transpose();
    let lag = grads_at_x + &at * mu + (&at * &ax) * beta;
    let gradient_norm_sq = lag.norm_squared();
    let constraint_violation_sq = ax.norm_squared();
    Ok(QDiagnostic {
        q_value: gradient_norm_sq + constraint_violation_sq,
        gradient_norm_sq,
        constraint_violation_sq,
    })
}

/// `f + ⟨μ, Ax⟩ + (β/2)‖Ax‖² + (cβ/2)(‖Ax‖² + ‖x − x_prev‖²_{B'B})`.
pub fn potential(x: &StackedParams, x_prev: &StackedParams, mu: &DMatrix<f64>, c: f64, beta: f64, f_value: f64, matrices: &GraphMatrices) -> Result<f64> {
    if x.shape() != x_prev.shape() || mu.shape() != (matrices.n_edges(), x.ncols()) {
        return Err(invalid("potential: shape mismatch"));
    }
    let ax = &matrices.incidence * x;
    let dx = x - x_prev;
    let bdx = &matrices.signless_incidence * &dx;
    let infeas = ax.norm_squared();
    Ok(f_value + mu.dot(&ax) + 0.5 * beta * infeas + 0.5 * c * beta * (infeas + bdx.norm_squared()))
}

/// `c = 6‖B'B‖/σ_min` and the smallest `β` with
/// `β ≥ 2cL + 2c + 1 + 6L²/(βσ_min)`.
pub fn theory_constants(matrices: &GraphMatrices, lipschitz: f64) -> (f64, f64) {
    let c = 6.0 * matrices.lplus_norm() / matrices.sigma_min;
    (c, min_beta(c, lipschitz, matrices.sigma_min))
}

pub fn min_beta(c: f64, lipschitz: f64, sigma_min: f64) -> f64 {
    let b = 2.0 * c * lipschitz + 2.0 * c + 1.0;
    0.5 * (b + (b * b + 24.0 * lipschitz * lipschitz / sigma_min).sqrt())
}

/// Distributed least squares: agent `i` holds `½‖M_i x − b_i‖²`.
#[derive(Debug, Clone)]
pub struct LsTestbed {
    pub m: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    /// Consensus optimum `(Σ M_i'M_i)⁻¹ Σ M_i'b_i`.
    pub x_star: DVector<f64>,
    /// Largest eigenvalue of any `M_i'M_i`.
    pub lipschitz: f64,
}

/// Random orthogonal matrix from the QR factor of a Gaussian-ish draw.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
    g.qr().q()
}

pub fn make_ls_testbed(n_agents: usize, dim: usize, seed: u64) -> Result<LsTestbed> {
    if n_agents < 2 || dim == 0 {
        return Err(invalid("the testbed needs at least two agents and a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Vec::with_capacity(n_agents);
    let mut b = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let q = random_orthogonal(dim, &mut rng);
        let s = DVector::from_fn(dim, |_, _| rng.gen_range(1.0..3.0));
        m.push(&q * DMatrix::from_diagonal(&s) * q.transpose());
        b.push(DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)));
    }
    let mut h = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut lipschitz: f64 = 0.0;
    for (mi, bi) in m.iter().zip(&b) {
        let mtm = mi.transpose() * mi;
        lipschitz = lipschitz.max(SymmetricEigen::new(mtm.clone()).eigenvalues.max());
        h += mtm;
        rhs += mi.transpose() * bi;
    }
    let x_star = h.lu().solve(&rhs).ok_or_else(|| invalid("testbed Hessian is singular"))?;
    Ok(LsTestbed { m, b, x_star, lipschitz })
}

impl LsTestbed {
    pub fn n_agents(&self) -> usize {
        self.m.len()
    }

    pub fn dim(&self) -> usize {
        self.x_star.len()
    }

    pub fn value(&self, x: &StackedParams) -> f64 {
        self.m
            .iter()
            .zip(&self.b)
            .enumerate()
            .map(|(i, (mi, bi))| 0.5 * (mi * x.row(i).transpose() - bi).norm_squared())
            .sum()
    }

    /// Row `i` holds `M_i'(M_i x_i − b_i)`.
    pub fn grads(&self, x: &StackedParams) -> StackedParams {
        let mut g = DMatrix::zeros(self.n_agents(), self.dim());
        for (i, (mi, bi)) in self.m.iter().zip(&self.b).enumerate() {
            let r = mi.transpose() * (mi * x.row(i).transpose() - bi);
            g.set_row(i, &r.transpose());
        }
        g
    }

    /// `x*` replicated on every agent.
    pub fn optimum(&self) -> StackedParams {
        DMatrix::from_fn(self.n_agents(), self.dim(), |_, j| self.x_star[j])
    }

    /// Multipliers at the optimum: the least-norm solution of `A'μ = −∇f(x*)`.
    pub fn optimal_mu(&self, matrices: &GraphMatrices) -> Result<DMatrix<f64>> {
        let g = self.grads(&self.optimum());
        let pinv = matrices
            .incidence
            .transpose()
            .pseudo_inverse(1e-12)
            .map_err(|e| invalid(format!("pseudo-inverse failed: {e}")))?;
        Ok(-(pinv * g))
    }
}

/// One row of an optimizer trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub q: f64,
    pub potential: f64,
    pub disagreement: f64,
}

pub const TRACE_HEADER: &str = "iter,q,potential,disagreement";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e}", r.iter, r.q, r.potential, r.disagreement);
    }
    out
}

/// Outcome of a Prox-PDA run on the testbed.
#[derive(Debug, Clone)]
pub struct TestbedRun {
    pub trace: Vec<TraceRow>,
    pub x: StackedParams,
    pub mu: DMatrix<f64>,
    /// Largest norm of any multiplier iterate's component outside the range of `A`.
    pub max_mu_off_range: f64,
}

/// Runs Prox-PDA with exact gradients and `α = 1/β` from `x = 0`.
pub fn run_testbed(tb: &LsTestbed, matrices: Arc<GraphMatrices>, beta: f64, c: f64, iters: usize) -> Result<TestbedRun> {
    let mut state = ConsensusState::new(matrices.clone(), tb.dim(), 1.0 / beta)?;
    // Orthonormal basis of range(A): A v / sqrt(lambda) over the nonzero
    // eigenpairs of A'A. Cheaper and steadier than an SVD of the tall A.
    let a = &matrices.incidence;
    let eig = matrices.lminus.clone().symmetric_eigen();
    let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
    let range_cols: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] > tol).collect();
    let mut range_basis = DMatrix::zeros(a.nrows(), range_cols.len());
    for (j, &k) in range_cols.iter().enumerate() {
        range_basis.set_column(j, &((a * eig.eigenvectors.column(k)) / eig.eigenvalues[k].sqrt()));
    }

    let mut x = DMatrix::zeros(tb.n_agents(), tb.dim());
    let mut trace = Vec::with_capacity(iters);
    let mut max_off: f64 = 0.0;
    for t in 1..=iters {
        let g = tb.grads(&x);
        let mu_prev = state.mu.clone();
        let next = proxpda_step(&x, &g, &mut state, Direction::Descent)?;
        let q = q_criterion(&next, &mu_prev, &tb.grads(&next), &matrices, beta)?;
        let p = potential(&next, &x, &state.mu, c, beta, tb.value(&next), &matrices)?;
        let off = (&state.mu - &range_basis * (range_basis.transpose() * &state.mu)).norm();
        max_off = max_off.max(off);
        trace.push(TraceRow {
            iter: t,
            q: q.q_value,
            potential: p,
            disagreement: disagreement(&next),
        });
        x = next;
    }
    Ok(TestbedRun {
        trace,
        x,
        mu: state.mu,
        max_mu_off_range: max_off,
    })
}

/// `min_{t ≤ T} Q` over a trace prefix.
pub fn q_min(trace: &[TraceRow], t: usize) -> f64 {
    trace.iter().take(t).map(|r| r.q).fold(f64::INFINITY, f64::min)
}
