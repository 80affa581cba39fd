//! Cooperative navigation on a square: each agent has its own landmark,
//! earns a one-time bonus on reaching it, and is penalized for every
//! overlapping neighbor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MultiAgentEnv, StepOutcome};
use crate::error::{invalid, Error, Result};
use crate::graph::CommGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavConfig {
    /// Side length of the square region.
    pub region: f64,
    pub n_agents: usize,
    pub step_size: f64,
    pub move_prob: f64,
    pub reach_radius: f64,
    pub reach_reward: f64,
    pub collision_radius: f64,
    pub collision_penalty: f64,
    pub max_steps: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            region: 2.0,
            n_agents: 8,
            step_size: 0.1,
            move_prob: 0.95,
            reach_radius: 0.1,
            reach_reward: 5.0,
            collision_radius: 0.1,
            collision_penalty: -1.0,
            max_steps: 500,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(invalid("navigation needs at least one agent"));
        }
        if !(self.region > 0.0) || !(self.step_size > 0.0) {
            return Err(invalid("region and step size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.move_prob) {
            return Err(invalid("move probability must lie in [0, 1]"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Move {
    pub const COUNT: usize = 5;

    pub fn from_index(i: usize) -> Option<Move> {
        [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stay].get(i).copied()
    }

    fn delta(self) -> (f64, f64) {
        match self {
            Move::Up => (0.0, 1.0),
            Move::Down => (0.0, -1.0),
            Move::Left => (-1.0, 0.0),
            Move::Right => (1.0, 0.0),
            Move::Stay => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub config: NavConfig,
    pub agents: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
    pub step_count: usize,
    pub reached: Vec<bool>,
    pub done: bool,
}

pub fn nav_new(config: &NavConfig, seed: u64) -> Result<NavState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = || [rng.gen_range(0.0..=config.region), rng.gen_range(0.0..=config.region)];
    let agents = (0..config.n_agents).map(|_| point()).collect();
    let landmarks = (0..config.n_agents).map(|_| point()).collect();
    Ok(NavState {
        config: config.clone(),
        agents,
        landmarks,
        step_count: 0,
        reached: vec![false; config.n_agents],
        done: false,
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advances one step. Each agent follows its chosen move with probability
/// `move_prob`, otherwise one of the other four moves uniformly.
pub fn nav_step<R: Rng + ?Sized>(state: &NavState, joint_action: &[usize], rng: &mut R) -> Result<(NavState, Vec<f64>, bool)> {
    let cfg = &state.config;
    if state.done || state.step_count >= cfg.max_steps {
        return Err(Error::InvalidState("navigation episode is over".into()));
    }
    if joint_action.len() != cfg.n_agents {
        return Err(invalid(format!("expected {} actions, got {}", cfg.n_agents, joint_action.len())));
    }
    let mut next = state.clone();
    for (i, &a) in joint_action.iter().enumerate() {
        let intended = Move::from_index(a).ok_or_else(|| invalid(format!("move index {a} out of range")))?;
        let actual = if rng.gen::<f64>() < cfg.move_prob {
            intended
        } else {
            let k = rng.gen_range(0..Move::COUNT - 1);
            let k = if k >= intended as usize { k + 1 } else { k };
            Move::from_index(k).expect("in range")
        };
        let (dx, dy) = actual.delta();
        let p = &mut next.agents[i];
        p[0] = (p[0] + dx * cfg.step_size).clamp(0.0, cfg.region);
        p[1] = (p[1] + dy * cfg.step_size).clamp(0.0, cfg.region);
    }
    let n = cfg.n_agents;
    let mut rewards = vec![0.0; n];
    for i in 0..n {
        if !next.reached[i] && dist(next.agents[i], next.landmarks[i]) < cfg.reach_radius {
            next.reached[i] = true;
            rewards[i] += cfg.reach_reward;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if dist(next.agents[i], next.agents[j]) < cfg.collision_radius {
                rewards[i] += cfg.collision_penalty;
                rewards[j] += cfg.collision_penalty;
            }
        }
    }
    next.step_count += 1;
    next.done = next.reached.iter().all(|&r| r) || next.step_count >= cfg.max_steps;
    let done = next.done;
    Ok((next, rewards, done))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    Full,
    Partial,
}

/// Full: every agent position, then the agent's own landmark.
/// Partial: own position, own landmark, then neighbor positions in
/// increasing index order, zero-padded to the graph's maximum degree.
pub fn nav_observe(state: &NavState, agent: usize, graph: Option<&CommGraph>, mode: ObsMode) -> Result<Vec<f64>> {
    if agent >= state.agents.len() {
        return Err(invalid(format!("agent {agent} out of range")));
    }
    match mode {
        ObsMode::Full => {
            let mut v: Vec<f64> = state.agents.iter().flat_map(|p| p.iter().copied()).collect();
            v.extend_from_slice(&state.landmarks[agent]);
            Ok(v)
        }
        ObsMode::Partial => {
            let g = graph.ok_or_else(|| invalid("partial observation requires a communication graph"))?;
            if g.n_agents() != state.agents.len() {
                return Err(invalid("graph size does not match the number of agents"));
            }
            let mut v = Vec::with_capacity(4 + 2 * g.max_degree());
            v.extend_from_slice(&state.agents[agent]);
            v.extend_from_slice(&state.landmarks[agent]);
            for j in g.neighbors(agent) {
                v.extend_from_slice(&state.agents[j]);
            }
            v.resize(4 + 2 * g.max_degree(), 0.0);
            Ok(v)
        }
    }
}

/// Episodic navigation environment; every reset draws a fresh layout.
#[derive(Debug, Clone)]
pub struct NavEnv {
    config: NavConfig,
    graph: Option<CommGraph>,
    mode: ObsMode,
    state: NavState,
}

impl NavEnv {
    pub fn new(config: NavConfig, graph: Option<CommGraph>, mode: ObsMode) -> Result<Self> {
        if mode == ObsMode::Partial && graph.is_none() {
            return Err(invalid("partial observation requires a communication graph"));
        }
        let state = nav_new(&config, 0)?;
        Ok(NavEnv {
            config,
            graph,
            mode,
            state,
        })
    }

    pub fn state(&self) -> &NavState {
        &self.state
    }

    pub fn set_state(&mut self, state: NavState) {
        self.state = state;
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    /// Critic view of an arbitrary state.
    pub fn critic_view(state: &NavState, agent: usize) -> Vec<f64> {
        nav_observe(state, agent, None, ObsMode::Full).expect("agent index in range")
    }
}

impl MultiAgentEnv for NavEnv {
    fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    fn n_actions(&self) -> usize {
        Move::COUNT
    }

    fn critic_dim(&self) -> usize {
        2 * self.config.n_agents + 2
    }

    fn actor_dim(&self) -> usize {
        match (self.mode, &self.graph) {
            (ObsMode::Partial, Some(g)) => 4 + 2 * g.max_degree(),
            _ => 2 * self.config.n_agents + 2,
        }
    }

    fn central_dim(&self) -> usize {
        4 * self.config.n_agents
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.state = nav_new(&self.config, rng.gen()).expect("config validated at construction");
    }

    fn step(&mut self, joint_action: &[usize], rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        let (next, rewards, done) = nav_step(&self.state, joint_action, rng)?;
        self.state = next;
        Ok(StepOutcome { rewards, done })
    }

    fn critic_obs(&self, agent: usize) -> Vec<f64> {
        Self::critic_view(&self.state, agent)
    }

    fn actor_obs(&self, agent: usize) -> Vec<f64> {
        nav_observe(&self.state, agent, self.graph.as_ref(), self.mode).expect("validated at construction")
    }

    fn central_obs(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.state.agents.iter().flat_map(|p| p.iter().copied()).collect();
        v.extend(self.state.landmarks.iter().flat_map(|p| p.iter().copied()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> NavConfig {
        NavConfig {
            n_agents: n,
            ..NavConfig::default()
        }
    }

    #[test]
    fn layout_is_seeded_and_in_region() {
        let a = nav_new(&cfg(8), 4).unwrap();
        assert_eq!(a, nav_new(&cfg(8), 4).unwrap());
        assert_eq!(a.landmarks.len(), 8);
        assert!(a.agents.iter().chain(&a.landmarks).all(|p| p.iter().all(|&c| (0.0..=2.0).contains(&c))));
        assert!(a.reached.iter().all(|r| !r) && a.step_count == 0);
    }

    #[test]
    fn boundary_clamp_and_stay() {
        let mut s = nav_new(&cfg(2), 0).unwrap();
        s.config.move_prob = 1.0;
        s.agents = vec![[0.0, 0.0], [1.0, 1.0]];
        s.landmarks = vec![[2.0, 2.0], [0.5, 1.8]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, _, _) = nav_step(&s, &[Move::Left as usize, Move::Stay as usize], &mut rng).unwrap();
        assert_eq!(next.agents[0], [0.0, 0.0]);
        assert_eq!(next.agents[1], [1.0, 1.0]);
    }

    #[test]
    fn collisions_penalize_both_agents() {
        let mut s = nav_new(&cfg(3), 0).unwrap();
        s.config.move_prob = 1.0;
        s.agents = vec![[1.0, 1.0], [1.05, 1.0], [0.2, 0.2]];
        s.landmarks = vec![[0.0, 2.0], [2.0, 2.0], [2.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stay = Move::Stay as usize;
        let (_, r, done) = nav_step(&s, &[stay, stay, stay], &mut rng).unwrap();
        assert_eq!(r, vec![-1.0, -1.0, 0.0]);
        assert!(!done);
    }

    #[test]
    fn reach_reward_is_granted_once() {
        let mut s = nav_new(&cfg(2), 0).unwrap();
        s.config.move_prob = 1.0;
        s.agents = vec![[1.0, 1.0], [0.2, 0.2]];
        s.landmarks = vec![[1.0, 1.08], [1.9, 1.9]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stay = Move::Stay as usize;
        let (s1, r1, _) = nav_step(&s, &[stay, stay], &mut rng).unwrap();
        assert_eq!(r1, vec![5.0, 0.0]);
        let (_, r2, _) = nav_step(&s1, &[stay, stay], &mut rng).unwrap();
        assert_eq!(r2, vec![0.0, 0.0]);
    }

    #[test]
    fn episode_ends_at_step_cap_and_rejects_further_steps() {
        let mut c = cfg(2);
        c.max_steps = 3;
        let mut s = nav_new(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut done = false;
        for _ in 0..3 {
            let (n, _, d) = nav_step(&s, &[4, 4], &mut rng).unwrap();
            s = n;
            done = d;
        }
        assert!(done);
        assert!(matches!(nav_step(&s, &[4, 4], &mut rng), Err(Error::InvalidState(_))));
    }

    #[test]
    fn observation_layouts() {
        let s = nav_new(&cfg(5), 2).unwrap();
        assert_eq!(nav_observe(&s, 0, None, ObsMode::Full).unwrap().len(), 12);
        // agent 4 has degree 1 (only 4-3), max degree is 4 at agent 0
        let g = CommGraph::new(5, [(1, 0), (2, 0), (3, 0), (4, 0), (4, 3)]).unwrap();
        assert_eq!(g.max_degree(), 4);
        let obs = nav_observe(&s, 1, Some(&g), ObsMode::Partial).unwrap();
        assert_eq!(obs.len(), 4 + 8);
        assert_eq!(&obs[4..6], &s.agents[0]);
        assert!(obs[6..].iter().all(|&v| v == 0.0));
        let obs = nav_observe(&s, 3, Some(&g), ObsMode::Partial).unwrap();
        assert_eq!(&obs[4..8], &[s.agents[0], s.agents[4]].concat()[..]);
        assert!(obs[8..].iter().all(|&v| v == 0.0));
        assert!(nav_observe(&s, 9, None, ObsMode::Full).is_err());
    }

    #[test]
    fn intended_move_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = nav_new(&cfg(1), 0).unwrap();
        s.config.max_steps = usize::MAX;
        let n = 20_000;
        let mut up = 0;
        for _ in 0..n {
            s.agents[0] = [1.0, 1.0];
            s.landmarks[0] = [0.0, 0.0];
            let (next, _, _) = nav_step(&s, &[Move::Up as usize], &mut rng).unwrap();
            if next.agents[0][1] > 1.05 {
                up += 1;
            }
        }
        assert!(((up as f64 / n as f64) - 0.95).abs() < 0.01);
    }
}
