//! Softmax temporal-consistency residuals and the per-agent primal-dual loss
//! that value propagation optimizes, plus exact tabular solvers for the
//! entropy-regularized Bellman fixed point.
//!
//! For agent `i` and a window `s_0..s_k` the residual target is
//!
//! ```text
//! δ_i = Σ_{t<k} γ^t (R_i(s_t,a_t) − λN log π^i(s_t,a_t^i)) + γ^k V_i(s_k)
//! ```
//!
//! and the per-agent objective is `(δ_i − V_i(s_0))² − η(δ_i − ρ_i(s_0,a_0))²`.
//! Gradients flow through both `V_i(s_0)` and the bootstrap `V_i(s_k)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envs::TabularMdp;
use crate::error::{invalid, Error, Result};
use crate::neural::{log_prob, log_prob_grad, ParamVector};

/// One observation vector shared by every agent, or one per agent.
#[derive(Debug, Clone, PartialEq)]
pub enum Views {
    Shared(Vec<f64>),
    PerAgent(Vec<Vec<f64>>),
}

impl Views {
    pub fn get(&self, agent: usize) -> &[f64] {
        match self {
            Views::Shared(v) => v,
            Views::PerAgent(vs) => &vs[agent],
        }
    }

    /// Collapses to `Shared` when every agent sees the same vector.
    pub fn from_per_agent(vs: Vec<Vec<f64>>) -> Self {
        if vs.windows(2).all(|w| w[0] == w[1]) && !vs.is_empty() {
            Views::Shared(vs.into_iter().next().unwrap())
        } else {
            Views::PerAgent(vs)
        }
    }
}

/// Everything the learners observe about one environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub critic: Views,
    pub actor: Views,
    pub central: Vec<f64>,
}

impl Snapshot {
    /// Snapshot in which every view is the same vector (tabular one-hot states).
    pub fn uniform(obs: Vec<f64>) -> Self {
        Snapshot {
            critic: Views::Shared(obs.clone()),
            actor: Views::Shared(obs.clone()),
            central: obs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Arc<Snapshot>,
    pub joint_action: Vec<usize>,
    pub next_state: Arc<Snapshot>,
    pub rewards: Vec<f64>,
}

/// A window of `k` consecutive steps: `k + 1` states, `k` joint actions,
/// `k` per-agent reward vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub states: Vec<Arc<Snapshot>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
}

impl Segment {
    pub fn k(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        let k = self.k();
        if k == 0 || self.states.len() != k + 1 || self.rewards.len() != k {
            return Err(invalid(format!(
                "segment lengths inconsistent: {} states, {} actions, {} rewards",
                self.states.len(),
                k,
                self.rewards.len()
            )));
        }
        if self.actions.iter().any(|a| a.len() != n_agents) || self.rewards.iter().any(|r| r.len() != n_agents) {
            return Err(invalid(format!("segment entries must cover {n_agents} agents")));
        }
        Ok(())
    }
}

impl From<&Transition> for Segment {
    fn from(t: &Transition) -> Self {
        Segment {
            states: vec![t.state.clone(), t.next_state.clone()],
            actions: vec![t.joint_action.clone()],
            rewards: vec![t.rewards.clone()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub n_agents: usize,
    pub k: usize,
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.n_agents == 0 || self.k == 0 {
            return Err(invalid("n_agents and k must be positive"));
        }
        Ok(())
    }
}

/// Value, policy and dual networks of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNets {
    pub v: ParamVector,
    pub pi: ParamVector,
    pub rho: ParamVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// `(δ − V(s))²`
    pub primal: f64,
    /// `−η(δ − ρ(s,a))²`
    pub dual: f64,
}

impl LossParts {
    pub fn objective(&self) -> f64 {
        self.primal + self.dual
    }
}

/// Minibatch-mean gradients for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    /// Of primal + dual with respect to the value parameters.
    pub v: Vec<f64>,
    /// Of primal + dual with respect to the policy parameters.
    pub pi: Vec<f64>,
    /// Of the dual term alone with respect to the dual parameters.
    pub rho: Vec<f64>,
    pub loss: LossParts,
}

/// Minibatch-mean gradients of the centralized learner.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralGrads {
    pub v: Vec<f64>,
    pub pis: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub loss: LossParts,
}

/// Whose reward and which observations a critic uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Perspective {
    /// Agent `i`: own reward, own critic view, entropy weight `λN` on its own policy.
    Agent(usize),
    /// Central learner: averaged reward, central view, weight `λ` on every policy.
    Central,
}

/// Input of the dual network: critic view followed by one-hot actions per agent.
pub fn rho_input(critic_view: &[f64], joint_action: &[usize], n_actions: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(critic_view.len() + joint_action.len() * n_actions);
    x.extend_from_slice(critic_view);
    for &a in joint_action {
        let start = x.len();
        x.resize(start + n_actions, 0.0);
        x[start + a] = 1.0;
    }
    x
}

/// Which parameter groups a gradient pass should fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct GradMask {
    pub v: bool,
    pub pi: bool,
    pub rho: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask { v: true, pi: true, rho: true };
    pub const PRIMAL: GradMask = GradMask { v: true, pi: true, rho: false };
    pub const DUAL: GradMask = GradMask { v: false, pi: false, rho: true };
}

struct Accumulators<'a> {
    mask: GradMask,
    v: &'a mut [f64],
    rho: &'a mut [f64],
    pis: Vec<&'a mut [f64]>,
}

/// Evaluates `δ` and the loss on one window; when `acc` is given, adds
/// `scale` times the gradients.
fn window(
    persp: Perspective,
    v: &ParamVector,
    rho: Option<&ParamVector>,
    policies: &[&ParamVector],
    seg: &Segment,
    cfg: &ConsistencyConfig,
    mut acc: Option<(&mut Accumulators<'_>, f64)>,
) -> Result<(f64, LossParts)> {
    seg.validate(cfg.n_agents)?;
    let k = seg.k();
    if k > cfg.k {
        return Err(invalid(format!("segment has {k} steps, configured rollout length is {}", cfg.k)));
    }
    let n = cfg.n_agents as f64;
    let (coef, agents): (f64, Vec<usize>) = match persp {
        Perspective::Agent(i) => {
            if i >= cfg.n_agents {
                return Err(invalid(format!("agent {i} out of range")));
            }
            (cfg.lambda * n, vec![i])
        }
        Perspective::Central => (cfg.lambda, (0..cfg.n_agents).collect()),
    };
    if policies.len() != agents.len() {
        return Err(invalid("policy count does not match the learner's perspective"));
    }
    let critic = |s: &Snapshot| -> Vec<f64> {
        match persp {
            Perspective::Agent(i) => s.critic.get(i).to_vec(),
            Perspective::Central => s.central.clone(),
        }
    };
    let want_pi = acc.as_ref().is_some_and(|(a, _)| a.mask.pi);

    let mut total = 0.0;
    let mut disc = 1.0;
    // (policy slot, discount, log-prob gradient) for the backward pass
    let mut lp_grads: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    for t in 0..k {
        let reward = match persp {
            Perspective::Agent(i) => seg.rewards[t][i],
            Perspective::Central => seg.rewards[t].iter().sum::<f64>() / n,
        };
        let mut lp = 0.0;
        for (slot, (&agent, pol)) in agents.iter().zip(policies).enumerate() {
            let x = seg.states[t].actor.get(agent);
            if want_pi {
                let (l, g) = log_prob_grad(pol, x, seg.actions[t][agent])?;
                lp += l;
                lp_grads.push((slot, disc, g));
            } else {
                lp += log_prob(pol, x, seg.actions[t][agent])?;
            }
        }
        total += disc * (reward - coef * lp);
        disc *= cfg.gamma;
    }
    let end_in = critic(&seg.states[k]);
    let (v_end, end_tape) = v.forward(&end_in)?;
    let delta = total + disc * v_end[0];

    let start_in = critic(&seg.states[0]);
    let (v0, start_tape) = v.forward(&start_in)?;
    let primal_res = delta - v0[0];
    let (dual, dual_res, rho_tape) = match rho {
        Some(r) => {
            let x = rho_input(&start_in, &seg.actions[0], policies[0].spec().output_dim());
            let (out, tape) = r.forward(&x)?;
            let res = delta - out[0];
            (-cfg.eta * res * res, res, Some(tape))
        }
        None => (0.0, 0.0, None),
    };
    let loss = LossParts {
        primal: primal_res * primal_res,
        dual,
    };

    if let Some((acc, scale)) = acc.as_mut() {
        let d_delta = 2.0 * primal_res - 2.0 * cfg.eta * dual_res;
        if acc.mask.v {
            v.backward_into(&end_tape, &[d_delta * disc], *scale, acc.v)?;
            v.backward_into(&start_tape, &[-2.0 * primal_res], *scale, acc.v)?;
        }
        for (slot, d, g) in &lp_grads {
            let w = *scale * d_delta * d * (-coef);
            for (a, gi) in acc.pis[*slot].iter_mut().zip(g) {
                *a += w * gi;
            }
        }
        if let (true, Some(r), Some(tape)) = (acc.mask.rho, rho, rho_tape.as_ref()) {
            r.backward_into(tape, &[2.0 * cfg.eta * dual_res], *scale, acc.rho)?;
        }
    }
    Ok((delta, loss))
}

fn one_step_segment(t: &Transition) -> Segment {
    Segment::from(t)
}

/// `R_i(s,a) + γ V_i(s') − λN log π^i(s, a^i)`.
pub fn delta_i(agent: usize, v: &ParamVector, pi: &ParamVector, t: &Transition, cfg: &ConsistencyConfig) -> Result<f64> {
    if agent >= cfg.n_agents || t.rewards.len() != cfg.n_agents || t.joint_action.len() != cfg.n_agents {
        return Err(invalid("transition does not match the configured agent count"));
    }
    let (_, lp) = {
        let x = t.state.actor.get(agent);
        (0, log_prob_grad(pi, x, t.joint_action[agent])?.0)
    };
    let v_next = v.eval_scalar(t.next_state.critic.get(agent))?;
    let coef = cfg.lambda * cfg.n_agents as f64;
    Ok((t.rewards[agent] - coef * lp) + cfg.gamma * v_next)
}

/// Multi-step residual target over a (possibly truncated) window.
pub fn delta_i_multistep(agent: usize, v: &ParamVector, pi: &ParamVector, seg: &Segment, cfg: &ConsistencyConfig) -> Result<f64> {
    window(Perspective::Agent(agent), v, None, &[pi], seg, cfg, None).map(|(d, _)| d)
}

pub fn local_loss_i(agent: usize, nets: &AgentNets, seg: &Segment, cfg: &ConsistencyConfig) -> Result<LossParts> {
    window(Perspective::Agent(agent), &nets.v, Some(&nets.rho), &[&nets.pi], seg, cfg, None).map(|(_, l)| l)
}

/// Loss on a single transition.
pub fn local_loss_transition(agent: usize, nets: &AgentNets, t: &Transition, cfg: &ConsistencyConfig) -> Result<LossParts> {
    local_loss_i(agent, nets, &one_step_segment(t), cfg)
}

/// Minibatch-mean gradients of agent `agent`'s loss.
pub fn local_grads_i(agent: usize, nets: &AgentNets, batch: &[&Segment], cfg: &ConsistencyConfig) -> Result<LocalGrads> {
    let mut g = grads_for(Perspective::Agent(agent), &nets.v, &nets.rho, &[&nets.pi], batch, cfg, GradMask::ALL)?;
    Ok(LocalGrads {
        v: g.v,
        pi: g.pis.pop().expect("one policy"),
        rho: g.rho,
        loss: g.loss,
    })
}

pub fn central_loss(v: &ParamVector, rho: &ParamVector, policies: &[&ParamVector], seg: &Segment, cfg: &ConsistencyConfig) -> Result<LossParts> {
    window(Perspective::Central, v, Some(rho), policies, seg, cfg, None).map(|(_, l)| l)
}

pub fn central_grads(v: &ParamVector, rho: &ParamVector, policies: &[&ParamVector], batch: &[&Segment], cfg: &ConsistencyConfig) -> Result<CentralGrads> {
    grads_for(Perspective::Central, v, rho, policies, batch, cfg, GradMask::ALL)
}

pub(crate) fn grads_for(
    persp: Perspective,
    v: &ParamVector,
    rho: &ParamVector,
    policies: &[&ParamVector],
    batch: &[&Segment],
    cfg: &ConsistencyConfig,
    mask: GradMask,
) -> Result<CentralGrads> {
    if batch.is_empty() {
        return Err(invalid("minibatch is empty"));
    }
    let mut gv = vec![0.0; v.len()];
    let mut grho = vec![0.0; rho.len()];
    let mut gpis: Vec<Vec<f64>> = policies.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut loss = LossParts::default();
    {
        let mut acc = Accumulators {
            mask,
            v: &mut gv,
            rho: &mut grho,
            pis: gpis.iter_mut().map(|g| g.as_mut_slice()).collect(),
        };
        for seg in batch {
            let (_, l) = window(persp, v, Some(rho), policies, seg, cfg, Some((&mut acc, 1.0)))?;
            loss.primal += l.primal;
            loss.dual += l.dual;
        }
    }
    let m = batch.len() as f64;
    for g in gv.iter_mut().chain(grho.iter_mut()).chain(gpis.iter_mut().flatten()) {
        *g /= m;
    }
    loss.primal /= m;
    loss.dual /= m;
    Ok(CentralGrads {
        v: gv,
        pis: gpis,
        rho: grho,
        loss,
    })
}

// ---------------------------------------------------------------------------
// Tabular oracles
// ---------------------------------------------------------------------------

/// `Q(s,a) = R̄(s,a) + γ Σ_{s'} P(s'|s,a) V(s')` over joint actions.
pub fn tabular_q(mdp: &TabularMdp, v: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_joint_actions())
                .map(|a| {
                    let ev: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
                    mdp.mean_reward(s, a) + gamma * ev
                })
                .collect()
        })
        .collect()
}

fn log_sum_exp_scaled(q: &[f64], lambda: f64) -> f64 {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q.iter().map(|&x| ((x - m) / lambda).exp()).sum();
    m + lambda * s.ln()
}

/// Entropy-regularized backup `V'(s) = λ log Σ_a exp(Q(s,a)/λ)`; the hard
/// max when `λ = 0`.
pub fn soft_bellman_apply(mdp: &TabularMdp, v: &[f64], lambda: f64, gamma: f64) -> Vec<f64> {
    tabular_q(mdp, v, gamma)
        .iter()
        .map(|row| {
            if lambda > 0.0 {
                log_sum_exp_scaled(row, lambda)
            } else {
                row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// A tabular policy, either over joint actions or factored per agent.
#[derive(Debug, Clone, PartialEq)]
pub enum TabularPolicy {
    /// `pi[s][joint]`
    Joint(Vec<Vec<f64>>),
    /// `pi[i][s][a_i]`
    Factored(Vec<Vec<Vec<f64>>>),
}

impl TabularPolicy {
    fn log_prob(&self, mdp: &TabularMdp, s: usize, joint: usize) -> f64 {
        match self {
            TabularPolicy::Joint(p) => p[s][joint].ln(),
            TabularPolicy::Factored(ps) => mdp
                .decode_joint(joint)
                .iter()
                .enumerate()
                .map(|(i, &a)| ps[i][s][a].ln())
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftSolution {
    pub v: Vec<f64>,
    /// `pi[s][joint]`
    pub pi: Vec<Vec<f64>>,
    pub residual: f64,
    pub sweeps: usize,
    /// Sup-norm change of every sweep.
    pub sup_diffs: Vec<f64>,
    pub converged: bool,
}

const MAX_SWEEPS: usize = 200_000;

/// Policy induced by `V`: `π(s,a) ∝ exp(Q(s,a)/λ)`, or greedy with ties to the
/// lowest joint index when `λ = 0`.
pub fn soft_policy(mdp: &TabularMdp, v: &[f64], lambda: f64, gamma: f64) -> Vec<Vec<f64>> {
    tabular_q(mdp, v, gamma)
        .iter()
        .map(|row| {
            if lambda > 0.0 {
                let lse = log_sum_exp_scaled(row, lambda);
                row.iter().map(|&q| ((q - lse) / lambda).exp()).collect()
            } else {
                let best = argmax_lowest(row);
                (0..row.len()).map(|a| if a == best { 1.0 } else { 0.0 }).collect()
            }
        })
        .collect()
}

pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &q) in row.iter().enumerate() {
        if q > row[best] {
            best = i;
        }
    }
    best
}

/// Iterates the soft backup until the sup-norm change drops below `tol`.
pub fn soft_value_iteration(mdp: &TabularMdp, lambda: f64, gamma: f64, tol: f64) -> Result<TabularSoftSolution> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if !(lambda >= 0.0) || !(tol > 0.0) {
        return Err(invalid("lambda must be nonnegative and tol positive"));
    }
    let mut v = vec![0.0; mdp.n_states()];
    let mut sup_diffs = Vec::new();
    let mut converged = false;
    while sup_diffs.len() < MAX_SWEEPS {
        let next = soft_bellman_apply(mdp, &v, lambda, gamma);
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        sup_diffs.push(diff);
        if diff < tol {
            converged = true;
            break;
        }
    }
    let pi = soft_policy(mdp, &v, lambda, gamma);
    let residual = consistency_residual(&v, &TabularPolicy::Joint(pi.clone()), mdp, lambda, gamma)?;
    Ok(TabularSoftSolution {
        v,
        pi,
        residual,
        sweeps: sup_diffs.len(),
        sup_diffs,
        converged,
    })
}

/// `max_{s,a} |V(s) − R̄(s,a) − γ E V(s') + λ log π(s,a)|`.
///
/// With `λ = 0` the entropy term vanishes and only actions the policy plays
/// with positive probability are checked (the hard-max variant).
pub fn consistency_residual(v: &[f64], policy: &TabularPolicy, mdp: &TabularMdp, lambda: f64, gamma: f64) -> Result<f64> {
    if v.len() != mdp.n_states() {
        return Err(invalid("value table does not match the MDP"));
    }
    match policy {
        TabularPolicy::Joint(p) if p.len() != mdp.n_states() || p.iter().any(|r| r.len() != mdp.n_joint_actions()) => {
            return Err(invalid("joint policy table has the wrong shape"))
        }
        TabularPolicy::Factored(ps) if ps.len() != mdp.n_agents() => return Err(invalid("one factor per agent is required")),
        _ => {}
    }
    let q = tabular_q(mdp, v, gamma);
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_joint_actions() {
            let lp = policy.log_prob(mdp, s, a);
            let r = if lambda > 0.0 {
                v[s] - q[s][a] + lambda * lp
            } else if lp.is_finite() {
                v[s] - q[s][a]
            } else {
                continue;
            };
            if r.is_nan() {
                return Err(Error::InvalidState("residual is NaN".into()));
            }
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{finite_diff_grad, relative_error, MlpSpec, OutputHead};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64, n: usize) -> ConsistencyConfig {
        ConsistencyConfig {
            gamma: 0.9,
            lambda,
            eta: 0.1,
            n_agents: n,
            k: 1,
        }
    }

    /// Value net with constant output `c` (zero weights, bias `c`).
    fn const_v(dim: usize, c: f64) -> ParamVector {
        let spec = MlpSpec::new(vec![dim, 1], OutputHead::Identity).unwrap();
        let mut vals = vec![0.0; spec.n_params()];
        *vals.last_mut().unwrap() = c;
        ParamVector::from_values(spec, vals).unwrap()
    }

    fn uniform_pi(dim: usize, actions: usize) -> ParamVector {
        ParamVector::zeros(&MlpSpec::new(vec![dim, actions], OutputHead::Softmax).unwrap())
    }

    fn transition(rewards: Vec<f64>, actions: Vec<usize>) -> Transition {
        Transition {
            state: Arc::new(Snapshot::uniform(vec![1.0, 0.0])),
            joint_action: actions,
            next_state: Arc::new(Snapshot::uniform(vec![0.0, 1.0])),
            rewards,
        }
    }

    #[test]
    fn delta_examples() {
        let v = const_v(2, 2.0);
        let pi = uniform_pi(2, 2);
        let t = transition(vec![1.0, 0.0], vec![0, 1]);
        let d = delta_i(0, &v, &pi, &t, &cfg(0.0, 2)).unwrap();
        assert!((d - 2.8).abs() < 1e-12);
        let d = delta_i(0, &v, &pi, &t, &cfg(0.01, 2)).unwrap();
        assert!((d - (2.8 - 0.02 * 0.5_f64.ln())).abs() < 1e-12);
        assert!((d - 2.81386).abs() < 1e-5);
        let myopic = ConsistencyConfig { gamma: 1e-300, ..cfg(0.0, 2) };
        let d = delta_i(0, &v, &pi, &t, &myopic).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn multistep_examples() {
        let pi = uniform_pi(2, 2);
        let s = |x: f64| Arc::new(Snapshot::uniform(vec![x, 1.0 - x]));
        let seg = Segment {
            states: vec![s(1.0), s(0.0), s(1.0)],
            actions: vec![vec![0], vec![1]],
            rewards: vec![vec![1.0], vec![1.0]],
        };
        let c = ConsistencyConfig {
            gamma: 0.5,
            lambda: 0.0,
            eta: 0.0,
            n_agents: 1,
            k: 2,
        };
        let d = delta_i_multistep(0, &const_v(2, 4.0), &pi, &seg, &c).unwrap();
        assert!((d - 2.5).abs() < 1e-12);

        let zero_r = Segment {
            rewards: vec![vec![0.0], vec![0.0]],
            ..seg.clone()
        };
        let d = delta_i_multistep(0, &const_v(2, 4.0), &pi, &zero_r, &c).unwrap();
        assert_eq!(d, 0.25 * 4.0);

        let too_long = ConsistencyConfig { k: 1, ..c };
        assert!(delta_i_multistep(0, &const_v(2, 4.0), &pi, &seg, &too_long).is_err());
    }

    #[test]
    fn local_loss_example() {
        // δ = 2.8, V(s) = 1, ρ = 2, η = 0.1
        let nets = AgentNets {
            v: {
                // V(s0)=1 at input (1,0), V(s1)=2 at input (0,1)
                let spec = MlpSpec::new(vec![2, 1], OutputHead::Identity).unwrap();
                ParamVector::from_values(spec, vec![1.0, 2.0, 0.0]).unwrap()
            },
            pi: uniform_pi(2, 2),
            rho: const_v(6, 2.0),
        };
        let t = transition(vec![1.0, 0.0], vec![0, 1]);
        let l = local_loss_transition(0, &nets, &t, &cfg(0.0, 2)).unwrap();
        assert!((l.primal - 3.24).abs() < 1e-12);
        assert!((l.dual + 0.064).abs() < 1e-12);

        let zero_dual = AgentNets {
            rho: const_v(6, 2.8),
            ..nets.clone()
        };
        let l = local_loss_transition(0, &zero_dual, &t, &cfg(0.0, 2)).unwrap();
        assert!(l.dual.abs() < 1e-24);
    }

    #[test]
    fn empty_batch_rejected() {
        let nets = AgentNets {
            v: const_v(2, 0.0),
            pi: uniform_pi(2, 2),
            rho: const_v(6, 0.0),
        };
        assert!(local_grads_i(0, &nets, &[], &cfg(0.01, 2)).is_err());
    }

    #[test]
    fn rho_input_layout() {
        assert_eq!(rho_input(&[0.5], &[1, 0], 3), vec![0.5, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    fn single_state(r: f64) -> TabularMdp {
        TabularMdp::from_tables(1, 1, 1, vec![1.0], vec![r]).unwrap()
    }

    #[test]
    fn forced_policy_fixed_point() {
        for lambda in [0.0, 0.01, 1.0] {
            let sol = soft_value_iteration(&single_state(1.0), lambda, 0.9, 1e-12).unwrap();
            assert!((sol.v[0] - 10.0).abs() < 1e-10);
        }
    }

    #[test]
    fn equal_actions_gain_log2_bonus() {
        let mdp = TabularMdp::from_tables(1, 1, 2, vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let lambda = 3.0;
        let next = soft_bellman_apply(&mdp, &[0.0], lambda, 0.9);
        assert!((next[0] - (0.5 + lambda * 2f64.ln())).abs() < 1e-12);
        let hard = soft_bellman_apply(&mdp, &[0.0], 0.0, 0.9);
        assert_eq!(hard[0], 0.5);
    }

    #[test]
    fn hard_max_ties_break_low() {
        let mdp = TabularMdp::from_tables(1, 1, 3, vec![1.0; 3], vec![1.0, 2.0, 2.0]).unwrap();
        let sol = soft_value_iteration(&mdp, 0.0, 0.5, 1e-12).unwrap();
        assert_eq!(sol.pi[0], vec![0.0, 1.0, 0.0]);
        assert!(sol.residual < 1e-11);
    }
    fn random_nets(seed: u64, dim: usize, n_agents: usize, actions: usize) -> AgentNets {
        AgentNets {
            v: ParamVector::init(&MlpSpec::new(vec![dim, 5, 1], OutputHead::Identity).unwrap(), seed),
            pi: ParamVector::init(&MlpSpec::new(vec![dim, 4, actions], OutputHead::Softmax).unwrap(), seed + 1),
            rho: ParamVector::init(
                &MlpSpec::new(vec![dim + n_agents * actions, 5, 1], OutputHead::Identity).unwrap(),
                seed + 2,
            ),
        }
    }

    fn random_segment(rng: &mut ChaCha8Rng, k: usize, dim: usize, n_agents: usize, actions: usize) -> Segment {
        let vec_of = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let states = (0..=k)
            .map(|_| {
                let critic = (0..n_agents).map(|_| vec_of(rng)).collect();
                let actor = (0..n_agents).map(|_| vec_of(rng)).collect();
                Arc::new(Snapshot {
                    critic: Views::PerAgent(critic),
                    actor: Views::PerAgent(actor),
                    central: vec_of(rng),
                })
            })
            .collect();
        Segment {
            states,
            actions: (0..k).map(|_| (0..n_agents).map(|_| rng.gen_range(0..actions)).collect()).collect(),
            rewards: (0..k).map(|_| (0..n_agents).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect(),
        }
    }

    fn batch_objective(agent: usize, nets: &AgentNets, batch: &[Segment], c: &ConsistencyConfig) -> (f64, f64) {
        let mut tot = 0.0;
        let mut dual = 0.0;
        for seg in batch {
            let l = local_loss_i(agent, nets, seg, c).unwrap();
            tot += l.objective();
            dual += l.dual;
        }
        (tot / batch.len() as f64, dual / batch.len() as f64)
    }

    #[test]
    fn local_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for inst in 0..20u64 {
            let (n, actions, dim, k) = (3, 3, 4, 1 + (inst as usize % 3));
            let c = ConsistencyConfig {
                gamma: 0.9,
                lambda: 0.05,
                eta: 0.3,
                n_agents: n,
                k: 3,
            };
            let nets = random_nets(100 + 7 * inst, dim, n, actions);
            let batch: Vec<Segment> = (0..4).map(|_| random_segment(&mut rng, k, dim, n, actions)).collect();
            let refs: Vec<&Segment> = batch.iter().collect();
            let agent = inst as usize % n;
            let g = local_grads_i(agent, &nets, &refs, &c).unwrap();

            let fd_v = finite_diff_grad(nets.v.values(), |x| {
                let nn = AgentNets { v: nets.v.with_values(x.to_vec()).unwrap(), ..nets.clone() };
                batch_objective(agent, &nn, &batch, &c).0
            }, 1e-6);
            let fd_pi = finite_diff_grad(nets.pi.values(), |x| {
                let nn = AgentNets { pi: nets.pi.with_values(x.to_vec()).unwrap(), ..nets.clone() };
                batch_objective(agent, &nn, &batch, &c).0
            }, 1e-6);
            let fd_rho = finite_diff_grad(nets.rho.values(), |x| {
                let nn = AgentNets { rho: nets.rho.with_values(x.to_vec()).unwrap(), ..nets.clone() };
                batch_objective(agent, &nn, &batch, &c).1
            }, 1e-6);
            assert!(relative_error(&g.v, &fd_v) < 1e-5, "v instance {inst}");
            assert!(relative_error(&g.pi, &fd_pi) < 1e-5, "pi instance {inst}");
            assert!(relative_error(&g.rho, &fd_rho) < 1e-5, "rho instance {inst}");
        }
    }

    #[test]
    fn central_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, actions, dim) = (2, 3, 4);
        let c = ConsistencyConfig { gamma: 0.8, lambda: 0.1, eta: 0.5, n_agents: n, k: 2 };
        let v = ParamVector::init(&MlpSpec::new(vec![dim, 5, 1], OutputHead::Identity).unwrap(), 1);
        let rho = ParamVector::init(&MlpSpec::new(vec![dim + n * actions, 5, 1], OutputHead::Identity).unwrap(), 2);
        let pis: Vec<ParamVector> = (0..n)
            .map(|i| ParamVector::init(&MlpSpec::new(vec![dim, 4, actions], OutputHead::Softmax).unwrap(), 3 + i as u64))
            .collect();
        let batch: Vec<Segment> = (0..3).map(|_| random_segment(&mut rng, 2, dim, n, actions)).collect();
        let refs: Vec<&Segment> = batch.iter().collect();
        let prefs: Vec<&ParamVector> = pis.iter().collect();
        let g = central_grads(&v, &rho, &prefs, &refs, &c).unwrap();
        let obj = |pis: &[ParamVector]| {
            let pr: Vec<&ParamVector> = pis.iter().collect();
            batch.iter().map(|s| central_loss(&v, &rho, &pr, s, &c).unwrap().objective()).sum::<f64>() / 3.0
        };
        for j in 0..n {
            let fd = finite_diff_grad(pis[j].values(), |x| {
                let mut p = pis.clone();
                p[j] = p[j].with_values(x.to_vec()).unwrap();
                obj(&p)
            }, 1e-6);
            assert!(relative_error(&g.pis[j], &fd) < 1e-5);
        }
    }

    #[test]
    fn zero_eta_gives_zero_dual_gradient_and_mean_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = ConsistencyConfig { gamma: 0.9, lambda: 0.01, eta: 0.0, n_agents: 2, k: 1 };
        let nets = random_nets(3, 4, 2, 3);
        let seg = random_segment(&mut rng, 1, 4, 2, 3);
        let one = local_grads_i(1, &nets, &[&seg], &c).unwrap();
        assert!(one.rho.iter().all(|&x| x == 0.0));
        let rep = local_grads_i(1, &nets, &[&seg, &seg, &seg, &seg], &c).unwrap();
        assert!(relative_error(&rep.v, &one.v) < 1e-14);
        assert!(relative_error(&rep.pi, &one.pi) < 1e-14);
    }

    #[test]
    fn single_step_window_matches_delta_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let nets = random_nets(rng.gen(), 4, 3, 2);
            let seg = random_segment(&mut rng, 1, 4, 3, 2);
            let t = Transition {
                state: seg.states[0].clone(),
                joint_action: seg.actions[0].clone(),
                next_state: seg.states[1].clone(),
                rewards: seg.rewards[0].clone(),
            };
            let c = ConsistencyConfig { gamma: 0.95, lambda: 0.02, eta: 0.1, n_agents: 3, k: 1 };
            for i in 0..3 {
                let a = delta_i(i, &nets.v, &nets.pi, &t, &c).unwrap();
                let b = delta_i_multistep(i, &nets.v, &nets.pi, &seg, &c).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn central_view_with_one_agent_matches_agent_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = ConsistencyConfig { gamma: 0.9, lambda: 0.05, eta: 0.2, n_agents: 1, k: 2 };
        let nets = random_nets(4, 3, 1, 3);
        for _ in 0..5 {
            let mut seg = random_segment(&mut rng, 2, 3, 1, 3);
            for s in seg.states.iter_mut() {
                let mut snap = (**s).clone();
                snap.central = snap.critic.get(0).to_vec();
                *s = Arc::new(snap);
            }
            let a = local_grads_i(0, &nets, &[&seg], &c).unwrap();
            let b = central_grads(&nets.v, &nets.rho, &[&nets.pi], &[&seg], &c).unwrap();
            assert_eq!(a.v, b.v);
            assert_eq!(a.pi, b.pis[0]);
            assert_eq!(a.rho, b.rho);
        }
    }

    #[test]
    fn random_mdp_fixed_points_are_consistent() {
        let tol = 1e-10;
        for seed in 0..20 {
            let mdp = TabularMdp::random(seed, 32, 2, 2).unwrap();
            let sol = soft_value_iteration(&mdp, 0.1, 0.9, tol).unwrap();
            assert!(sol.converged);
            assert!(sol.residual < tol / (1.0 - 0.9), "seed {seed}: {}", sol.residual);
            for w in sol.sup_diffs.windows(2) {
                assert!(w[1] <= 0.9 * w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn residual_shift_is_linear() {
        let mdp = TabularMdp::random(3, 8, 2, 2).unwrap();
        let sol = soft_value_iteration(&mdp, 0.05, 0.9, 1e-12).unwrap();
        let shifted: Vec<f64> = sol.v.iter().map(|v| v + 2.0).collect();
        let r = consistency_residual(&shifted, &TabularPolicy::Joint(sol.pi.clone()), &mdp, 0.05, 0.9).unwrap();
        assert!((r - 2.0 * 0.1).abs() < 1e-9);
    }

    #[test]
    fn factored_uniform_policy_matches_joint() {
        let mdp = TabularMdp::random(9, 4, 2, 3).unwrap();
        let v = vec![1.0, -0.5, 2.0, 0.3];
        let joint = TabularPolicy::Joint(vec![vec![1.0 / 9.0; 9]; 4]);
        let fact = TabularPolicy::Factored(vec![vec![vec![1.0 / 3.0; 3]; 4]; 2]);
        let a = consistency_residual(&v, &joint, &mdp, 0.2, 0.9).unwrap();
        let b = consistency_residual(&v, &fact, &mdp, 0.2, 0.9).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn greedy_policy_residual_vanishes_without_entropy() {
        let mdp = TabularMdp::random(4, 16, 1, 3).unwrap();
        let tol = 1e-11;
        let sol = soft_value_iteration(&mdp, 0.0, 0.9, tol).unwrap();
        assert!(sol.residual < tol);
    }

    /// Two states, one agent with two actions. State 1 is absorbing; from
    /// state 0 action 0 stays (reward a) and action 1 moves to state 1
    /// (reward b). V(1) is closed form; V(0) solves a scalar equation.
    #[test]
    fn two_state_chain_matches_scalar_root() {
        let (a, b, c, d) = (0.3, 0.1, 1.0, 0.4);
        let (lambda, gamma) = (0.5, 0.9);
        let transitions = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let rewards = vec![a, b, c, d];
        let mdp = TabularMdp::from_tables(2, 1, 2, transitions, rewards).unwrap();
        let v1 = lambda * ((c / lambda).exp() + (d / lambda).exp()).ln() / (1.0 - gamma);
        let f = |v0: f64| lambda * (((a + gamma * v0) / lambda).exp() + ((b + gamma * v1) / lambda).exp()).ln() - v0;
        let (mut lo, mut hi) = (-100.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sol = soft_value_iteration(&mdp, lambda, gamma, 1e-13).unwrap();
        assert!((sol.v[1] - v1).abs() < 1e-8);
        assert!((sol.v[0] - 0.5 * (lo + hi)).abs() < 1e-8);
    }
}
