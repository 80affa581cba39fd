use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{one_hot, MultiAgentEnv, StepOutcome};
use crate::error::{invalid, Error, Result};
use crate::neural::sample_categorical;

/// Refuse to allocate transition tables larger than this many entries.
pub const TABLE_ENTRY_LIMIT: u128 = 100_000_000;
/// Largest joint-action count the exact evaluator accepts.
pub const JOINT_EVAL_LIMIT: usize = 4096;

const TRANSITION_SMOOTHING: f64 = 1e-5;
const MAX_REWARD: f64 = 4.0;

/// A finite multi-agent MDP over joint actions with per-agent rewards.
///
/// Joint actions are encoded with agent 0 as the most significant digit.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_agents: usize,
    actions_per_agent: usize,
    n_joint: usize,
    /// `[s][a][s']`
    transitions: Vec<f64>,
    /// `[i][s][a]`
    rewards: Vec<f64>,
}

fn joint_count(n_states: usize, n_agents: usize, actions: usize) -> Result<usize> {
    let joint = (actions as u128).checked_pow(n_agents as u32);
    let entries = joint.and_then(|j| j.checked_mul((n_states * n_states) as u128));
    match (joint, entries) {
        (Some(j), Some(e)) if e <= TABLE_ENTRY_LIMIT => Ok(j as usize),
        _ => Err(Error::Capacity(format!(
            "{actions}^{n_agents} joint actions x {n_states}^2 states exceeds {TABLE_ENTRY_LIMIT} table entries"
        ))),
    }
}

impl TabularMdp {
    /// Random instance: `P(s'|s,a) ∝ U[0,1] + 1e-5`, rewards `U[0,4]` per agent
    /// and state-action pair.
    pub fn random(seed: u64, n_states: usize, n_agents: usize, actions_per_agent: usize) -> Result<Self> {
        if n_states < 2 {
            return Err(invalid(format!("random MDP needs at least 2 states, got {n_states}")));
        }
        if n_agents == 0 || actions_per_agent == 0 {
            return Err(invalid("random MDP needs at least one agent and one action"));
        }
        let n_joint = joint_count(n_states, n_agents, actions_per_agent)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = Vec::with_capacity(n_states * n_joint * n_states);
        for _ in 0..n_states * n_joint {
            let row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + TRANSITION_SMOOTHING).collect();
            let total: f64 = row.iter().sum();
            transitions.extend(row.into_iter().map(|p| p / total));
        }
        let rewards = (0..n_agents * n_states * n_joint).map(|_| rng.gen_range(0.0..=MAX_REWARD)).collect();
        Ok(TabularMdp {
            n_states,
            n_agents,
            actions_per_agent,
            n_joint,
            transitions,
            rewards,
        })
    }

    /// Builds an MDP from explicit tables laid out as `[s][a][s']` and `[i][s][a]`.
    pub fn from_tables(
        n_states: usize,
        n_agents: usize,
        actions_per_agent: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let n_joint = joint_count(n_states, n_agents, actions_per_agent)?;
        if transitions.len() != n_states * n_joint * n_states {
            return Err(invalid("transition table has the wrong size"));
        }
        if rewards.len() != n_agents * n_states * n_joint {
            return Err(invalid("reward table has the wrong size"));
        }
        for (r, row) in transitions.chunks(n_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("transition row {r} is not a distribution")));
            }
        }
        Ok(TabularMdp {
            n_states,
            n_agents,
            actions_per_agent,
            n_joint,
            transitions,
            rewards,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn actions_per_agent(&self) -> usize {
        self.actions_per_agent
    }

    pub fn n_joint_actions(&self) -> usize {
        self.n_joint
    }

    /// Shape of the transition tensor `(states, joint actions, states)`.
    pub fn transition_shape(&self) -> (usize, usize, usize) {
        (self.n_states, self.n_joint, self.n_states)
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        let start = (state * self.n_joint + joint) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn reward(&self, agent: usize, state: usize, joint: usize) -> f64 {
        self.rewards[(agent * self.n_states + state) * self.n_joint + joint]
    }

    pub fn rewards_of(&self, state: usize, joint: usize) -> Vec<f64> {
        (0..self.n_agents).map(|i| self.reward(i, state, joint)).collect()
    }

    /// Network-averaged reward `(1/N) Σ_i R_i(s,a)`.
    pub fn mean_reward(&self, state: usize, joint: usize) -> f64 {
        let total: f64 = (0..self.n_agents).map(|i| self.reward(i, state, joint)).sum();
        total / self.n_agents as f64
    }

    pub fn joint_index(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.n_agents {
            return Err(invalid(format!("joint action has {} entries, MDP has {} agents", actions.len(), self.n_agents)));
        }
        let mut idx = 0;
        for &a in actions {
            if a >= self.actions_per_agent {
                return Err(invalid(format!("action {a} out of range")));
            }
            idx = idx * self.actions_per_agent + a;
        }
        Ok(idx)
    }

    pub fn decode_joint(&self, mut joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for slot in out.iter_mut().rev() {
            *slot = joint % self.actions_per_agent;
            joint /= self.actions_per_agent;
        }
        out
    }

    /// Samples a successor state and returns the per-agent rewards.
    pub fn step<R: Rng + ?Sized>(&self, state: usize, joint_action: &[usize], rng: &mut R) -> Result<(usize, Vec<f64>)> {
        if state >= self.n_states {
            return Err(invalid(format!("state {state} out of range")));
        }
        let joint = self.joint_index(joint_action)?;
        let next = sample_categorical(self.transition_row(state, joint), rng);
        Ok((next, self.rewards_of(state, joint)))
    }

    /// Joint policy probability `Π_i π^i(s, a^i)` for tabular per-agent policies.
    pub fn joint_policy_prob(&self, policies: &[Vec<Vec<f64>>], state: usize, joint: usize) -> f64 {
        self.decode_joint(joint)
            .iter()
            .enumerate()
            .map(|(i, &a)| policies[i][state][a])
            .product()
    }
}

/// Value of the agent-averaged reward under the product policy, solved
/// exactly from `(I - γ P_π) V = R̄_π`.
///
/// `policies[i][s][a]` is agent `i`'s probability of action `a` in state `s`.
pub fn exact_policy_eval(mdp: &TabularMdp, policies: &[Vec<Vec<f64>>], gamma: f64) -> Result<Vec<f64>> {
    if mdp.n_joint > JOINT_EVAL_LIMIT {
        return Err(Error::Capacity(format!(
            "{} joint actions exceed the exact evaluator's limit of {JOINT_EVAL_LIMIT}; use Monte-Carlo evaluation",
            mdp.n_joint
        )));
    }
    if policies.len() != mdp.n_agents {
        return Err(invalid("one tabular policy per agent is required"));
    }
    for pol in policies {
        if pol.len() != mdp.n_states || pol.iter().any(|row| row.len() != mdp.actions_per_agent) {
            return Err(invalid("tabular policy has the wrong shape"));
        }
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let s_n = mdp.n_states;
    let mut system = DMatrix::<f64>::identity(s_n, s_n);
    let mut rhs = DVector::<f64>::zeros(s_n);
    for s in 0..s_n {
        for a in 0..mdp.n_joint {
            let p = mdp.joint_policy_prob(policies, s, a);
            if p == 0.0 {
                continue;
            }
            rhs[s] += p * mdp.mean_reward(s, a);
            for (s2, &t) in mdp.transition_row(s, a).iter().enumerate() {
                system[(s, s2)] -= gamma * p * t;
            }
        }
    }
    let v = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidState("policy evaluation system is singular".into()))?;
    Ok(v.iter().copied().collect())
}

/// Episodic wrapper around a [`TabularMdp`]: uniform initial state, fixed
/// episode length, one-hot observations for every view.
#[derive(Debug, Clone)]
pub struct MdpEnv {
    mdp: Arc<TabularMdp>,
    episode_len: usize,
    state: usize,
    t: usize,
}

impl MdpEnv {
    pub fn new(mdp: Arc<TabularMdp>, episode_len: usize) -> Result<Self> {
        if episode_len == 0 {
            return Err(invalid("episode length must be positive"));
        }
        Ok(MdpEnv {
            mdp,
            episode_len,
            state: 0,
            t: 0,
        })
    }

    pub fn mdp(&self) -> &Arc<TabularMdp> {
        &self.mdp
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn set_state(&mut self, state: usize) {
        self.state = state;
        self.t = 0;
    }

    pub fn state_obs(&self, state: usize) -> Vec<f64> {
        one_hot(state, self.mdp.n_states)
    }
}

impl MultiAgentEnv for MdpEnv {
    fn n_agents(&self) -> usize {
        self.mdp.n_agents
    }

    fn n_actions(&self) -> usize {
        self.mdp.actions_per_agent
    }

    fn critic_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn actor_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn central_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.state = rng.gen_range(0..self.mdp.n_states);
        self.t = 0;
    }

    fn step(&mut self, joint_action: &[usize], rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if self.t >= self.episode_len {
            return Err(Error::InvalidState("episode already finished".into()));
        }
        let (next, rewards) = self.mdp.step(self.state, joint_action, rng)?;
        self.state = next;
        self.t += 1;
        Ok(StepOutcome {
            rewards,
            done: self.t >= self.episode_len,
        })
    }

    fn critic_obs(&self, _agent: usize) -> Vec<f64> {
        self.state_obs(self.state)
    }

    fn actor_obs(&self, _agent: usize) -> Vec<f64> {
        self.state_obs(self.state)
    }

    fn central_obs(&self) -> Vec<f64> {
        self.state_obs(self.state)
    }

    fn tabular_state(&self) -> Option<usize> {
        Some(self.state)
    }

    fn tabular_mdp(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }

    fn set_tabular_state(&mut self, state: usize) {
        self.set_state(state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_mdp_shape_and_ranges() {
        let mdp = TabularMdp::random(3, 32, 10, 2).unwrap();
        assert_eq!(mdp.transition_shape(), (32, 1024, 32));
        for s in 0..32 {
            for a in [0, 511, 1023] {
                let row = mdp.transition_row(s, a);
                assert!(row.iter().all(|&p| p > 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(mdp.rewards.iter().all(|&r| (0.0..=4.0).contains(&r)));
        assert_eq!(mdp, TabularMdp::random(3, 32, 10, 2).unwrap());
    }

    #[test]
    fn capacity_and_argument_errors() {
        assert!(matches!(TabularMdp::random(0, 32, 30, 2), Err(Error::Capacity(_))));
        assert!(TabularMdp::random(0, 1, 2, 2).is_err());
        let big = TabularMdp::random(0, 2, 13, 2).unwrap();
        let pol = vec![vec![vec![0.5, 0.5]; 2]; 13];
        assert!(matches!(exact_policy_eval(&big, &pol, 0.9), Err(Error::Capacity(_))));
    }

    #[test]
    fn joint_encoding_round_trip() {
        let mdp = TabularMdp::random(1, 2, 3, 3).unwrap();
        for j in 0..27 {
            assert_eq!(mdp.joint_index(&mdp.decode_joint(j)).unwrap(), j);
        }
        assert!(mdp.joint_index(&[0, 3, 0]).is_err());
    }

    #[test]
    fn deterministic_row_and_reward_lookup() {
        // state 0 always moves to state 1 under every action
        let t = vec![0.0, 1.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5];
        let r = vec![1.0, 2.0, 3.0, 4.0];
        let mdp = TabularMdp::from_tables(2, 1, 2, t, r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (next, rew) = mdp.step(0, &[1], &mut rng).unwrap();
            assert_eq!(next, 1);
            assert_eq!(rew, vec![2.0]);
        }
    }

    #[test]
    fn one_state_evaluation() {
        let mdp = TabularMdp::from_tables(1, 1, 1, vec![1.0], vec![1.0]).unwrap();
        let v = exact_policy_eval(&mdp, &[vec![vec![1.0]]], 0.9).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_instance_has_equal_values() {
        // two mirror-image states with identical reward structure
        let t = vec![0.3, 0.7, 0.6, 0.4, 0.7, 0.3, 0.4, 0.6];
        let r = vec![1.0, 2.0, 1.0, 2.0];
        let mdp = TabularMdp::from_tables(2, 1, 2, t, r).unwrap();
        let v = exact_policy_eval(&mdp, &[vec![vec![0.5, 0.5]; 2]], 0.9).unwrap();
        assert!((v[0] - v[1]).abs() < 1e-12);
    }

    #[test]
    fn empirical_successor_frequencies() {
        let mdp = TabularMdp::random(5, 6, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 6];
        let n = 100_000;
        for _ in 0..n {
            counts[mdp.step(2, &[1, 0], &mut rng).unwrap().0] += 1;
        }
        let row = mdp.transition_row(2, mdp.joint_index(&[1, 0]).unwrap());
        let tv: f64 = counts.iter().zip(row).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }
}
