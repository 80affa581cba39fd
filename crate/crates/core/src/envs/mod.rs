//! Environments: random tabular multi-agent MDPs and cooperative navigation.

mod mdp;
mod nav;

pub use mdp::{exact_policy_eval, MdpEnv, TabularMdp, JOINT_EVAL_LIMIT, TABLE_ENTRY_LIMIT};
pub use nav::{nav_new, nav_observe, nav_step, Move, NavConfig, NavEnv, NavState, ObsMode};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Outcome of one joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// A cooperative environment in which every agent acts every step and
/// receives its own reward.
///
/// Three observation views exist: `critic_obs` feeds an agent's value and
/// dual networks, `actor_obs` its policy, and `central_obs` a centralized
/// learner that sees everything.
pub trait MultiAgentEnv {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn critic_dim(&self) -> usize;
    fn actor_dim(&self) -> usize;
    fn central_dim(&self) -> usize;

    fn reset(&mut self, rng: &mut ChaCha8Rng);
    fn step(&mut self, joint_action: &[usize], rng: &mut ChaCha8Rng) -> Result<StepOutcome>;

    fn critic_obs(&self, agent: usize) -> Vec<f64>;
    fn actor_obs(&self, agent: usize) -> Vec<f64>;
    fn central_obs(&self) -> Vec<f64>;

    /// Current state index for tabular environments.
    fn tabular_state(&self) -> Option<usize> {
        None
    }

    /// The underlying model, for environments that have an exact one.
    fn tabular_mdp(&self) -> Option<&TabularMdp> {
        None
    }

    /// Jumps to tabular state `state`; a no-op for other environments.
    fn set_tabular_state(&mut self, _state: usize) {}
}

pub(crate) fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}
