//! Self-checks runnable from the command line. Each suite returns a list of
//! named checks with a short measurement instead of panicking.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{
    consistency_residual, local_grads_i, local_loss_i, soft_value_iteration, AgentNets, ConsistencyConfig, Segment, Snapshot, TabularPolicy, Views,
};
use crate::envs::TabularMdp;
use crate::error::Result;
use crate::graph::{build_matrices, metropolis_weights, random_graph, validate_mixing, CommGraph};
use crate::neural::{finite_diff_grad, relative_error, MlpSpec, OutputHead, ParamVector};
use crate::optim::{decadam_step, make_ls_testbed, proxpda_step, q_min, run_testbed, theory_constants, ConsensusState, DecAdamState, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Graph,
    Grad,
    Consensus,
    Rate,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Graph, Suite::Grad, Suite::Consensus, Suite::Rate, Suite::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Graph => "graph",
            Suite::Grad => "grad",
            Suite::Consensus => "consensus",
            Suite::Rate => "rate",
            Suite::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        pass,
        detail,
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Graph => graph_suite()?,
        Suite::Grad => grad_suite()?,
        Suite::Consensus => consensus_suite()?,
        Suite::Rate => rate_suite()?,
        Suite::Oracle => oracle_suite()?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn graph_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a7);
    let (mut laplacian_ok, mut kernel_ok, mut mixing_ok) = (0, 0, 0);
    let mut worst_norm: f64 = 0.0;
    let total = 100;
    for _ in 0..total {
        let n = rng.gen_range(2..=32);
        let ratio = rng.gen_range(0.05..=1.0);
        let g = random_graph(n, ratio, rng.gen())?;
        let m = build_matrices(&g);
        if &m.lminus + &m.lplus == &m.degree * 2.0 {
            laplacian_ok += 1;
        }
        let ones = DMatrix::from_element(n, 1, 1.0);
        if (&m.incidence * ones).iter().all(|&x| x == 0.0) {
            kernel_ok += 1;
        }
        let rep = validate_mixing(&metropolis_weights(&g), &g)?;
        worst_norm = worst_norm.max(rep.spectral_norm);
        if rep.pass() {
            mixing_ok += 1;
        }
    }
    Ok(vec![
        check("laplacians sum to twice the degree matrix", laplacian_ok == total, format!("{laplacian_ok}/{total} graphs")),
        check("incidence annihilates the ones vector", kernel_ok == total, format!("{kernel_ok}/{total} graphs")),
        check(
            "metropolis weights mix",
            mixing_ok == total,
            format!("{mixing_ok}/{total} graphs, worst deflated norm {worst_norm:.6}"),
        ),
    ])
}

/// Random per-agent views, actions and rewards for a window of length `k`.
fn random_segment(rng: &mut ChaCha8Rng, k: usize, dim: usize, n: usize, actions: usize) -> Segment {
    let vec_of = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let states = (0..=k)
        .map(|_| {
            let critic = (0..n).map(|_| vec_of(rng)).collect();
            let actor = (0..n).map(|_| vec_of(rng)).collect();
            Arc::new(Snapshot {
                critic: Views::PerAgent(critic),
                actor: Views::PerAgent(actor),
                central: vec_of(rng),
            })
        })
        .collect();
    Segment {
        states,
        actions: (0..k).map(|_| (0..n).map(|_| rng.gen_range(0..actions)).collect()).collect(),
        rewards: (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect(),
    }
}

/// Freshly initialized network with every parameter nudged off its initial
/// value. Zero initial biases put a hidden unit exactly on the rectifier's kink
/// whenever the layer below is dead, where central differences average the
/// two one-sided slopes.
fn jittered(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
    let net = ParamVector::init(&spec, rng.gen());
    let values = net.values().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
    net.with_values(values)
}

/// Worst relative error between analytic and central-difference gradients
/// over 20 random instances with windows of length `k`.
pub fn gradient_check(k: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, actions, dim) = (3, 3, 4);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let cfg = ConsistencyConfig {
            gamma: rng.gen_range(0.5..0.99),
            lambda: rng.gen_range(0.0..0.2),
            eta: rng.gen_range(0.01..1.0),
            n_agents: n,
            k,
        };
        let nets = AgentNets {
            v: jittered(MlpSpec::new(vec![dim, 6, 6, 1], OutputHead::Identity)?, &mut rng)?,
            pi: jittered(MlpSpec::new(vec![dim, 5, actions], OutputHead::Softmax)?, &mut rng)?,
            rho: jittered(MlpSpec::new(vec![dim + n * actions, 6, 1], OutputHead::Identity)?, &mut rng)?,
        };
        let batch: Vec<Segment> = (0..3).map(|_| random_segment(&mut rng, k, dim, n, actions)).collect();
        let refs: Vec<&Segment> = batch.iter().collect();
        let agent = inst % n;
        let g = local_grads_i(agent, &nets, &refs, &cfg)?;
        let objective = |nets: &AgentNets, dual_only: bool| {
            let mut acc = 0.0;
            for seg in &batch {
                let l = local_loss_i(agent, nets, seg, &cfg).expect("valid instance");
                acc += if dual_only { l.dual } else { l.objective() };
            }
            acc / batch.len() as f64
        };
        let h = 1e-6;
        let fd_v = finite_diff_grad(nets.v.values(), |x| objective(&AgentNets { v: nets.v.with_values(x.to_vec()).expect("same length"), ..nets.clone() }, false), h);
        let fd_pi = finite_diff_grad(nets.pi.values(), |x| objective(&AgentNets { pi: nets.pi.with_values(x.to_vec()).expect("same length"), ..nets.clone() }, false), h);
        let fd_rho = finite_diff_grad(nets.rho.values(), |x| objective(&AgentNets { rho: nets.rho.with_values(x.to_vec()).expect("same length"), ..nets.clone() }, true), h);
        worst = worst
            .max(relative_error(&g.v, &fd_v))
            .max(relative_error(&g.pi, &fd_pi))
            .max(relative_error(&g.rho, &fd_rho));
    }
    Ok(worst)
}

fn grad_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for k in [1, 4] {
        let worst = gradient_check(k, 1000 + k as u64)?;
        out.push(check(&format!("local gradients match finite differences, k={k}"), worst < 1e-5, format!("worst relative error {worst:.2e}")));
    }
    Ok(out)
}

/// Largest change the two consensus steps make at a consensual point with
/// zero gradient and zero dual/moment state.
pub fn fixed_point_drift(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..=12);
        let p = rng.gen_range(1..=10);
        let g = random_graph(n, rng.gen_range(0.2..=1.0), rng.gen())?;
        let row: Vec<f64> = (0..p).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let theta = DMatrix::from_fn(n, p, |_, j| row[j]);
        let zero = DMatrix::zeros(n, p);
        let mut state = ConsensusState::new(Arc::new(build_matrices(&g)), p, rng.gen_range(0.01..1.0))?;
        for dir in [Direction::Descent, Direction::Ascent] {
            let next = proxpda_step(&theta, &zero, &mut state, dir)?;
            worst = worst.max((&next - &theta).amax()).max(state.mu.amax());
        }
        let mut adam = DecAdamState::new(n, p, 1e-3, 0.9, 0.999)?;
        let next = decadam_step(&theta, &zero, &mut adam, &metropolis_weights(&g), Direction::Descent)?;
        worst = worst.max((&next - &theta).amax()).max(adam.m.amax()).max(adam.w.amax());
    }
    Ok(worst)
}

fn consensus_suite() -> Result<Vec<Check>> {
    let drift = fixed_point_drift(77)?;
    let pair = CommGraph::complete(2)?;
    let theta = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let zero = DMatrix::zeros(2, 1);
    let mut state = ConsensusState::new(Arc::new(build_matrices(&pair)), 1, 0.5)?;
    let prox = proxpda_step(&theta, &zero, &mut state, Direction::Descent)?;
    let mut adam = DecAdamState::new(2, 1, 1e-3, 0.9, 0.999)?;
    let mixed = decadam_step(&theta, &zero, &mut adam, &metropolis_weights(&pair), Direction::Descent)?;
    let exact = |m: &DMatrix<f64>| m[(0, 0)] == 0.5 && m[(1, 0)] == 0.5;
    Ok(vec![
        check("consensual points are fixed", drift <= 1e-12, format!("max drift {drift:.2e}")),
        check("two agents average in one step", exact(&prox) && exact(&mixed), format!("prox {:?}, mixing {:?}", prox.as_slice(), mixed.as_slice())),
    ])
}

/// `(Q_min(2000) / Q_min(200), max multiplier component outside range(A))`
/// on the five-agent ring.
pub fn rate_measurement(seed: u64) -> Result<(f64, f64)> {
    let tb = make_ls_testbed(5, 4, seed)?;
    let matrices = Arc::new(build_matrices(&CommGraph::ring(5)?));
    let (c, beta) = theory_constants(&matrices, tb.lipschitz);
    let run = run_testbed(&tb, matrices, beta, c, 2000)?;
    Ok((q_min(&run.trace, 2000) / q_min(&run.trace, 200), run.max_mu_off_range))
}

fn rate_suite() -> Result<Vec<Check>> {
    let (ratio, off) = rate_measurement(3)?;
    Ok(vec![
        check("stationarity gap shrinks", ratio <= 0.2, format!("Q_min(2000)/Q_min(200) = {ratio:.3e}")),
        check("multipliers stay in the range of the incidence", off <= 1e-10, format!("max off-range component {off:.2e}")),
    ])
}

/// `(worst residual over 20 random MDPs, worst error of the shift identity)`.
pub fn oracle_measurement(tol: f64) -> Result<(f64, f64)> {
    let (gamma, lambda) = (0.9, 0.05);
    let (mut worst_res, mut worst_shift): (f64, f64) = (0.0, 0.0);
    for seed in 0..20 {
        let mdp = TabularMdp::random(seed, 32, 2, 2)?;
        let sol = soft_value_iteration(&mdp, lambda, gamma, tol)?;
        let policy = TabularPolicy::Joint(sol.pi.clone());
        let base = consistency_residual(&sol.v, &policy, &mdp, lambda, gamma)?;
        worst_res = worst_res.max(base);
        let c = 0.5 + seed as f64 * 0.25;
        let shifted: Vec<f64> = sol.v.iter().map(|v| v + c).collect();
        let moved = consistency_residual(&shifted, &policy, &mdp, lambda, gamma)?;
        // The fixed point leaves a residual of at most `base`, so the shift
        // shows up as `c(1 − γ)` up to that slack.
        worst_shift = worst_shift.max(((moved - c * (1.0 - gamma)).abs() - base).max(0.0));
    }
    Ok((worst_res, worst_shift))
}

fn oracle_suite() -> Result<Vec<Check>> {
    let tol = 1e-10;
    let (res, shift) = oracle_measurement(tol)?;
    Ok(vec![
        check("soft value iteration is self-consistent", res < tol / (1.0 - 0.9), format!("worst residual {res:.2e}")),
        check("constant shifts move the residual by c(1-gamma)", shift < 1e-9, format!("worst deviation {shift:.2e}")),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("everything"), None);
    }

    #[test]
    fn gradient_check_holds_across_seeds() {
        for seed in 0..8 {
            for k in [1, 4] {
                let err = gradient_check(k, seed).unwrap();
                assert!(err < 1e-5, "seed {seed} k {k}: {err}");
            }
        }
    }

    #[test]
    fn consensus_suite_passes() {
        let r = run_suite(Suite::Consensus).unwrap();
        assert!(r.pass(), "{:?}", r.checks);
    }
}
