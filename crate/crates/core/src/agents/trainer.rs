use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{collect_episode, consensus_disagreement, eval_with, exact_with, probe_states};
use super::{init_seed, stream_rng, LogRow, ReplayBuffer, Stream, TrainConfig, TrainLog, Variant, FORMAT_VERSION};
use crate::consistency::{grads_for, rho_input, AgentNets, CentralGrads, ConsistencyConfig, GradMask, Perspective, Segment, Snapshot};
use crate::envs::MultiAgentEnv;
use crate::error::{invalid, Result};
use crate::graph::{build_matrices, metropolis_weights, CommGraph, MixingMatrix};
use crate::neural::{sample_action, MlpSpec, OutputHead, ParamVector};
use crate::optim::{decadam_step, local_adam_step, proxpda_step, q_criterion, row_vec, sgd_in_place, stack, ConsensusState, DecAdamState, Direction};

/// How the critics of a run are wired together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// One critic per agent, tied by consensus over a communication graph.
    Consensus,
    /// One critic per agent, no communication at all.
    Edgeless,
    /// A single critic on the central view with the averaged reward.
    Centralized,
}

impl Topology {
    pub fn method_name(self) -> &'static str {
        match self {
            Topology::Consensus => "value-propagation",
            Topology::Edgeless => "no-comm-pcl",
            Topology::Centralized => "centralized-pcl",
        }
    }
}

/// All trained networks. Decentralized runs hold one value and dual network
/// per agent; centralized runs hold exactly one of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learners {
    pub v: Vec<ParamVector>,
    pub rho: Vec<ParamVector>,
    pub pi: Vec<ParamVector>,
}

impl Learners {
    /// Per-agent bundles, when every agent owns its own critic.
    pub fn agent_nets(&self) -> Option<Vec<AgentNets>> {
        if self.v.len() != self.pi.len() {
            return None;
        }
        Some(
            (0..self.pi.len())
                .map(|i| AgentNets {
                    v: self.v[i].clone(),
                    pi: self.pi[i].clone(),
                    rho: self.rho[i].clone(),
                })
                .collect(),
        )
    }
}

/// Serialized network state at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub format_version: u32,
    pub method: String,
    pub iteration: usize,
    pub learners: Learners,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learners: Learners,
    pub log: TrainLog,
    /// Number of consensus operator applications (zero without a graph).
    pub consensus_calls: usize,
    pub snapshots: Vec<NetSnapshot>,
    pub probes: Vec<Snapshot>,
}

/// Update rule for one parameter role across all learners.
enum RoleOpt {
    Prox(ConsensusState),
    Mixed { adam: DecAdamState, w: MixingMatrix },
    Sgd,
    Adam(Vec<DecAdamState>),
}

impl RoleOpt {
    fn local(variant: Variant, learners: usize, n_params: usize, alpha: f64, cfg: &TrainConfig) -> Result<Self> {
        Ok(match variant {
            Variant::Proxpda => RoleOpt::Sgd,
            Variant::Accel => RoleOpt::Adam(
                (0..learners)
                    .map(|_| DecAdamState::new(1, n_params, alpha, cfg.adam_beta1, cfg.adam_beta2))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    fn consensus(graph: &CommGraph, n_params: usize, alpha: f64, cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.variant {
            Variant::Proxpda => RoleOpt::Prox(ConsensusState::new(Arc::new(build_matrices(graph)), n_params, alpha)?),
            Variant::Accel => RoleOpt::Mixed {
                adam: DecAdamState::new(graph.n_agents(), n_params, alpha, cfg.adam_beta1, cfg.adam_beta2)?,
                w: metropolis_weights(graph),
            },
        })
    }

    fn apply(&mut self, nets: &mut [ParamVector], grads: &[Vec<f64>], alpha: f64, dir: Direction, calls: &mut usize) -> Result<()> {
        match self {
            RoleOpt::Sgd => {
                for (net, g) in nets.iter_mut().zip(grads) {
                    sgd_in_place(net.values_mut(), g, alpha, dir);
                }
            }
            RoleOpt::Adam(states) => {
                for ((net, g), st) in nets.iter_mut().zip(grads).zip(states.iter_mut()) {
                    local_adam_step(net.values_mut(), g, st, dir)?;
                }
            }
            RoleOpt::Prox(_) | RoleOpt::Mixed { .. } => {
                let theta = stack(&nets.iter().map(|n| n.values()).collect::<Vec<_>>())?;
                let g = stack(&grads.iter().map(|g| g.as_slice()).collect::<Vec<_>>())?;
                let next = match self {
                    RoleOpt::Prox(state) => proxpda_step(&theta, &g, state, dir)?,
                    RoleOpt::Mixed { adam, w } => decadam_step(&theta, &g, adam, w, dir)?,
                    _ => unreachable!(),
                };
                *calls += 1;
                for (i, net) in nets.iter_mut().enumerate() {
                    net.values_mut().copy_from_slice(&row_vec(&next, i));
                }
            }
        }
        Ok(())
    }
}

struct Setup {
    topology: Topology,
    ccfg: ConsistencyConfig,
    n_actions: usize,
}

impl Setup {
    fn critic_grads(&self, c: usize, l: &Learners, batch: &[&Segment], mask: GradMask) -> Result<CentralGrads> {
        match self.topology {
            Topology::Centralized => {
                let pis: Vec<&ParamVector> = l.pi.iter().collect();
                grads_for(Perspective::Central, &l.v[0], &l.rho[0], &pis, batch, &self.ccfg, mask)
            }
            _ => grads_for(Perspective::Agent(c), &l.v[c], &l.rho[c], &[&l.pi[c]], batch, &self.ccfg, mask),
        }
    }

    fn critic_view<'a>(&self, s: &'a Snapshot, c: usize) -> &'a [f64] {
        match self.topology {
            Topology::Centralized => &s.central,
            _ => s.critic.get(c),
        }
    }
}

fn net(widths: Vec<usize>, head: OutputHead, seed: u64) -> Result<ParamVector> {
    Ok(ParamVector::init(&MlpSpec::new(widths, head)?, seed))
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Networks before the first update. Value and dual networks share one
/// initialization across agents; each policy gets its own.
pub fn initial_learners<E: MultiAgentEnv>(env: &E, topology: Topology, cfg: &TrainConfig) -> Result<Learners> {
    let n = env.n_agents();
    let (critic_dim, n_critics) = match topology {
        Topology::Centralized => (env.central_dim(), 1),
        _ => (env.critic_dim(), n),
    };
    let v_seed = init_seed(cfg.seed, 0);
    let rho_seed = init_seed(cfg.seed, 1);
    Ok(Learners {
        v: (0..n_critics)
            .map(|_| net(widths(critic_dim, &cfg.v_hidden, 1), OutputHead::Identity, v_seed))
            .collect::<Result<_>>()?,
        rho: (0..n_critics)
            .map(|_| net(widths(critic_dim + n * env.n_actions(), &cfg.rho_hidden, 1), OutputHead::Identity, rho_seed))
            .collect::<Result<_>>()?,
        pi: (0..n)
            .map(|i| net(widths(env.actor_dim(), &cfg.pi_hidden, env.n_actions()), OutputHead::Softmax, init_seed(cfg.seed, 2 + i as u64)))
            .collect::<Result<_>>()?,
    })
}

/// Runs the primal-dual learner on `env` with the given critic wiring.
///
/// Every outer iteration collects one episode, runs `t_dual` dual rounds
/// (skipped when `eta = 0`), then one primal round on a fresh minibatch.
pub fn train<E: MultiAgentEnv + Clone>(env: &E, topology: Topology, graph: Option<&CommGraph>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = env.n_agents();
    let n_actions = env.n_actions();
    match (topology, graph) {
        (Topology::Consensus, Some(g)) if g.n_agents() == n => {}
        (Topology::Consensus, Some(g)) => {
            return Err(invalid(format!("graph has {} agents, environment has {n}", g.n_agents())));
        }
        // A lone agent has nobody to agree with; its consensus step is the identity.
        (Topology::Consensus, None) if n == 1 => {}
        (Topology::Consensus, None) => return Err(invalid("consensus training needs a communication graph")),
        _ => {}
    }
    let setup = Setup {
        topology,
        ccfg: cfg.consistency(n),
        n_actions,
    };
    let mut learners = initial_learners(env, topology, cfg)?;
    let n_critics = learners.v.len();
    let (pv, prho, ppi) = (learners.v[0].len(), learners.rho[0].len(), learners.pi[0].len());

    let (mut v_opt, mut rho_opt) = match (topology, graph) {
        (Topology::Consensus, Some(g)) => (RoleOpt::consensus(g, pv, cfg.alpha_v, cfg)?, RoleOpt::consensus(g, prho, cfg.alpha_rho, cfg)?),
        _ => (
            RoleOpt::local(cfg.variant, n_critics, pv, cfg.alpha_v, cfg)?,
            RoleOpt::local(cfg.variant, n_critics, prho, cfg.alpha_rho, cfg)?,
        ),
    };
    let mut pi_opt = RoleOpt::local(cfg.variant, n, ppi, cfg.alpha_pi, cfg)?;

    let mut collect_rng = stream_rng(cfg.seed, Stream::Collect);
    let mut sample_rng = stream_rng(cfg.seed, Stream::Sample);
    let mut eval_rng = stream_rng(cfg.seed, Stream::Eval);
    let probes = probe_states(env, cfg.probe_state_count, &mut stream_rng(cfg.seed, Stream::Probe));

    let batch_size = cfg.effective_batch();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut work_env = env.clone();
    let mut log = TrainLog::new(topology.method_name());
    let mut snapshots = Vec::new();
    let mut calls = 0usize;
    let (mut loss_p, mut loss_d, mut loss_n) = (0.0, 0.0, 0usize);
    let start = Instant::now();

    for it in 1..=cfg.iterations {
        let ep = collect_episode(&mut work_env, &learners.pi, cfg.k, cfg.gamma, &mut collect_rng)?;
        buffer.extend(ep.segments);

        if cfg.eta > 0.0 {
            for _ in 0..cfg.t_dual {
                let idx = buffer.sample_indices(batch_size, &mut sample_rng)?;
                let batch: Vec<&Segment> = idx.iter().map(|&i| buffer.get(i).expect("sampled index")).collect();
                let grads: Vec<Vec<f64>> = (0..n_critics)
                    .map(|c| setup.critic_grads(c, &learners, &batch, GradMask::DUAL).map(|g| g.rho))
                    .collect::<Result<_>>()?;
                rho_opt.apply(&mut learners.rho, &grads, cfg.alpha_rho, Direction::Ascent, &mut calls)?;
            }
        }

        let idx = buffer.sample_indices(batch_size, &mut sample_rng)?;
        let batch: Vec<&Segment> = idx.iter().map(|&i| buffer.get(i).expect("sampled index")).collect();
        let mut v_grads = Vec::with_capacity(n_critics);
        let mut pi_grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        for c in 0..n_critics {
            let g = setup.critic_grads(c, &learners, &batch, GradMask::PRIMAL)?;
            loss_p += g.loss.primal;
            loss_d += g.loss.dual;
            loss_n += 1;
            match topology {
                Topology::Centralized => pi_grads = g.pis,
                _ => pi_grads[c] = g.pis.into_iter().next().expect("one policy"),
            }
            v_grads.push(g.v);
        }
        pi_opt.apply(&mut learners.pi, &pi_grads, cfg.alpha_pi, Direction::Descent, &mut 0)?;
        v_opt.apply(&mut learners.v, &v_grads, cfg.alpha_v, Direction::Descent, &mut calls)?;

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let batch: Vec<&Segment> = idx.iter().map(|&i| buffer.get(i).expect("sampled index")).collect();
            let q_diag = match &v_opt {
                RoleOpt::Prox(state) => {
                    let g: Vec<Vec<f64>> = (0..n_critics)
                        .map(|c| setup.critic_grads(c, &learners, &batch, GradMask { v: true, pi: false, rho: false }).map(|g| g.v))
                        .collect::<Result<_>>()?;
                    let theta = stack(&learners.v.iter().map(|p| p.values()).collect::<Vec<_>>())?;
                    let g = stack(&g.iter().map(|x| x.as_slice()).collect::<Vec<_>>())?;
                    q_criterion(&theta, &state.mu, &g, state.matrices(), 1.0 / cfg.alpha_v)?.q_value
                }
                _ => f64::NAN,
            };
            let (return_mean, return_se) = evaluate(env, &learners.pi, cfg, &mut eval_rng)?;
            let (v_max, v_mean) = if n_critics >= 2 {
                consensus_disagreement(&learners.v, &probes)?
            } else {
                (0.0, 0.0)
            };
            let rho_max = if n_critics >= 2 { rho_disagreement(&setup, &learners.rho, &probes)? } else { 0.0 };
            let denom = loss_n.max(1) as f64;
            log.push(LogRow {
                iter: it,
                return_mean,
                return_se,
                v_disagree_max: v_max,
                v_disagree_mean: v_mean,
                rho_disagree_max: rho_max,
                loss_primal: loss_p / denom,
                loss_dual: loss_d / denom,
                q_diag,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            loss_p = 0.0;
            loss_d = 0.0;
            loss_n = 0;
        }
        if it % (cfg.eval_every * 10) == 0 || it == cfg.iterations {
            snapshots.push(NetSnapshot {
                format_version: FORMAT_VERSION,
                method: topology.method_name().to_string(),
                iteration: it,
                learners: learners.clone(),
            });
        }
    }
    Ok(TrainOutcome {
        learners,
        log,
        consensus_calls: calls,
        snapshots,
        probes,
    })
}

/// Exact return for small tabular models, Monte-Carlo otherwise.
fn evaluate<E: MultiAgentEnv + Clone>(env: &E, pis: &[ParamVector], cfg: &TrainConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<(f64, f64)> {
    if let Some(x) = exact_with(env, cfg.gamma, |e, i| pis[i].eval(&e.actor_obs(i)))? {
        return Ok((x, 0.0));
    }
    eval_with(env, cfg.eval_episodes, cfg.gamma, rng, |e, i, r| sample_action(&pis[i], &e.actor_obs(i), r))
}

/// Largest pairwise gap of the dual networks on probe states with every
/// agent playing action 0.
fn rho_disagreement(setup: &Setup, rhos: &[ParamVector], probes: &[Snapshot]) -> Result<f64> {
    let joint = vec![0; setup.ccfg.n_agents];
    let mut max: f64 = 0.0;
    for p in probes {
        let vals: Vec<f64> = rhos
            .iter()
            .enumerate()
            .map(|(c, r)| r.eval_scalar(&rho_input(setup.critic_view(p, c), &joint, setup.n_actions)))
            .collect::<Result<_>>()?;
        for i in 0..vals.len() {
            for j in 0..i {
                max = max.max((vals[i] - vals[j]).abs());
            }
        }
    }
    Ok(max)
}

/// Value propagation: per-agent critics kept in consensus over `graph`.
pub fn train_value_propagation<E: MultiAgentEnv + Clone>(env: &E, graph: &CommGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(env, Topology::Consensus, Some(graph), cfg)
}

/// Per-agent learners with no communication.
pub fn train_no_comm_pcl<E: MultiAgentEnv + Clone>(env: &E, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(env, Topology::Edgeless, None, cfg)
}

/// A single critic on the averaged reward with one policy per agent.
pub fn train_centralized_pcl<E: MultiAgentEnv + Clone>(env: &E, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(env, Topology::Centralized, None, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::soft_value_iteration;
    use crate::envs::{MdpEnv, TabularMdp};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 30,
            eval_every: 10,
            t_dual: 2,
            batch_size: 8,
            v_hidden: vec![8],
            rho_hidden: vec![8],
            pi_hidden: vec![8],
            probe_state_count: 4,
            ..TrainConfig::default()
        }
    }

    fn env(n_agents: usize, seed: u64) -> MdpEnv {
        MdpEnv::new(Arc::new(TabularMdp::random(seed, 6, n_agents, 2).unwrap()), 10).unwrap()
    }

    #[test]
    fn zero_eta_freezes_dual_nets() {
        let e = env(3, 1);
        let g = CommGraph::complete(3).unwrap();
        let cfg = small_cfg();
        let rho_init = net(widths(e.critic_dim() + 3 * 2, &cfg.rho_hidden, 1), OutputHead::Identity, init_seed(cfg.seed, 1)).unwrap();
        for variant in [Variant::Proxpda, Variant::Accel] {
            let frozen = TrainConfig { variant, eta: 0.0, ..cfg.clone() };
            let out = train_value_propagation(&e, &g, &frozen).unwrap();
            assert!(out.learners.rho.iter().all(|r| r == &rho_init));
            let live = train_value_propagation(&e, &g, &TrainConfig { variant, ..cfg.clone() }).unwrap();
            assert!(live.learners.rho.iter().all(|r| r != &rho_init));
        }
    }

    #[test]
    fn edgeless_never_calls_consensus() {
        let e = env(3, 2);
        for variant in [Variant::Proxpda, Variant::Accel] {
            let cfg = TrainConfig { variant, ..small_cfg() };
            assert_eq!(train_no_comm_pcl(&e, &cfg).unwrap().consensus_calls, 0);
            assert_eq!(train_centralized_pcl(&e, &cfg).unwrap().consensus_calls, 0);
            let vp = train_value_propagation(&e, &CommGraph::path(3).unwrap(), &cfg).unwrap();
            assert_eq!(vp.consensus_calls, 30 * (1 + 2));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let e = env(2, 3);
        let g = CommGraph::complete(2).unwrap();
        let a = train_value_propagation(&e, &g, &small_cfg()).unwrap();
        let b = train_value_propagation(&e, &g, &small_cfg()).unwrap();
        assert!(a.log.same_trajectory(&b.log));
        assert_eq!(a.learners, b.learners);
        assert_eq!(a.log.rows.len(), 3);
        assert!(a.log.rows.iter().all(|r| r.q_diag.is_finite()));
    }

    #[test]
    fn single_agent_paths_coincide() {
        let e = env(1, 4);
        for variant in [Variant::Proxpda, Variant::Accel] {
            let cfg = TrainConfig { variant, k: 2, ..small_cfg() };
            let a = train_no_comm_pcl(&e, &cfg).unwrap();
            let b = train_centralized_pcl(&e, &cfg).unwrap();
            assert_eq!(a.learners, b.learners);
            assert_eq!(a.log.rows.len(), b.log.rows.len());
            for (x, y) in a.log.rows.iter().zip(&b.log.rows) {
                assert_eq!(x.return_mean.to_bits(), y.return_mean.to_bits());
                assert_eq!(x.loss_primal.to_bits(), y.loss_primal.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_wiring() {
        let e = env(3, 5);
        assert!(train(&e, Topology::Consensus, None, &small_cfg()).is_err());
        assert!(train(&env(1, 5), Topology::Consensus, None, &small_cfg()).is_ok());
        assert!(train_value_propagation(&e, &CommGraph::complete(2).unwrap(), &small_cfg()).is_err());
    }

    /// One state, two equally rewarded actions: the learned value approaches
/// the entropy-regularized fixed point.
    #[test]
    fn centralized_value_matches_oracle_on_trivial_mdp() {
        let mdp = TabularMdp::from_tables(1, 1, 2, vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let target = soft_value_iteration(&mdp, 0.01, 0.5, 1e-12).unwrap().v[0];
        let e = MdpEnv::new(Arc::new(mdp), 5).unwrap();
        let cfg = TrainConfig {
            gamma: 0.5,
            iterations: 400,
            eval_every: 100,
            variant: Variant::Accel,
            alpha_v: 0.01,
            alpha_rho: 0.01,
            alpha_pi: 0.01,
            ..small_cfg()
        };
        let out = train_centralized_pcl(&e, &cfg).unwrap();
        let v = out.learners.v[0].eval_scalar(&[1.0]).unwrap();
        assert!((v - target).abs() < 0.05 * target.abs(), "{v} vs {target}");
    }
}
