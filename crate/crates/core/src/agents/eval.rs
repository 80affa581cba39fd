use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::consistency::{Segment, Snapshot, Views};
use crate::envs::{exact_policy_eval, MultiAgentEnv, JOINT_EVAL_LIMIT};
use crate::error::{invalid, Result};
use crate::neural::{sample_action, ParamVector};

/// Every view of the environment's current state.
pub fn snapshot<E: MultiAgentEnv + ?Sized>(env: &E) -> Snapshot {
    let n = env.n_agents();
    Snapshot {
        critic: Views::from_per_agent((0..n).map(|i| env.critic_obs(i)).collect()),
        actor: Views::from_per_agent((0..n).map(|i| env.actor_obs(i)).collect()),
        central: env.central_obs(),
    }
}

/// One rolled-out episode cut into stride-1 windows.
#[derive(Debug, Clone)]
pub struct Episode {
    pub segments: Vec<Segment>,
    pub steps: usize,
    /// Discounted return of the agent-averaged reward.
    pub discounted_return: f64,
}

/// Rolls out one episode with actions from `choose` and cuts it into
/// windows of `k` steps, one per start time. Windows that would run past
/// the end are shortened and bootstrap from the final state.
pub fn collect_with<E, F>(env: &mut E, k: usize, gamma: f64, rng: &mut ChaCha8Rng, mut choose: F) -> Result<Episode>
where
    E: MultiAgentEnv,
    F: FnMut(&E, usize, &mut ChaCha8Rng) -> Result<usize>,
{
    if k == 0 {
        return Err(invalid("window length must be positive"));
    }
    let n = env.n_agents();
    env.reset(rng);
    let mut states = vec![Arc::new(snapshot(env))];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut ret = 0.0;
    let mut disc = 1.0;
    loop {
        let mut joint = Vec::with_capacity(n);
        for i in 0..n {
            joint.push(choose(env, i, rng)?);
        }
        let out = env.step(&joint, rng)?;
        ret += disc * out.rewards.iter().sum::<f64>() / n as f64;
        disc *= gamma;
        actions.push(joint);
        rewards.push(out.rewards);
        states.push(Arc::new(snapshot(env)));
        if out.done {
            break;
        }
    }
    let steps = actions.len();
    let segments = (0..steps)
        .map(|t| {
            let end = (t + k).min(steps);
            Segment {
                states: states[t..=end].to_vec(),
                actions: actions[t..end].to_vec(),
                rewards: rewards[t..end].to_vec(),
            }
        })
        .collect();
    Ok(Episode {
        segments,
        steps,
        discounted_return: ret,
    })
}

/// Rolls out one episode sampling each agent's action from its policy.
pub fn collect_episode<E: MultiAgentEnv>(env: &mut E, policies: &[ParamVector], k: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Result<Episode> {
    if policies.len() != env.n_agents() {
        return Err(invalid("one policy per agent is required"));
    }
    if policies.iter().any(|p| p.spec().output_dim() != env.n_actions() || p.spec().input_dim() != env.actor_dim()) {
        return Err(invalid("policy shapes do not match the environment"));
    }
    collect_with(env, k, gamma, rng, |e, i, r| sample_action(&policies[i], &e.actor_obs(i), r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Standard error of the Monte-Carlo mean.
    pub se: f64,
    /// Exact value averaged over the uniform initial-state distribution,
    /// when the environment has a small enough tabular model.
    pub exact: Option<f64>,
}

/// Monte-Carlo return estimate with a caller-supplied action rule.
pub fn eval_with<E, F>(env: &E, n_episodes: usize, gamma: f64, rng: &mut ChaCha8Rng, mut choose: F) -> Result<(f64, f64)>
where
    E: MultiAgentEnv + Clone,
    F: FnMut(&E, usize, &mut ChaCha8Rng) -> Result<usize>,
{
    if n_episodes == 0 {
        return Err(invalid("n_episodes must be at least 1"));
    }
    let mut env = env.clone();
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let n = env.n_agents();
        env.reset(rng);
        let mut ret = 0.0;
        let mut disc = 1.0;
        loop {
            let mut joint = Vec::with_capacity(n);
            for i in 0..n {
                joint.push(choose(&env, i, rng)?);
            }
            let out = env.step(&joint, rng)?;
            ret += disc * out.rewards.iter().sum::<f64>() / n as f64;
            disc *= gamma;
            if out.done {
                break;
            }
        }
        returns.push(ret);
    }
    Ok(mean_se(&returns))
}

pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Exact infinite-horizon return for tabular environments, given each
/// agent's action distribution as a function of its observation.
pub fn exact_with<E, F>(env: &E, gamma: f64, mut probs: F) -> Result<Option<f64>>
where
    E: MultiAgentEnv + Clone,
    F: FnMut(&E, usize) -> Result<Vec<f64>>,
{
    let Some(mdp) = env.tabular_mdp() else {
        return Ok(None);
    };
    if mdp.n_joint_actions() > JOINT_EVAL_LIMIT {
        return Ok(None);
    }
    let mdp = mdp.clone();
    let mut probe = env.clone();
    let mut tables = vec![Vec::with_capacity(mdp.n_states()); mdp.n_agents()];
    for s in 0..mdp.n_states() {
        probe.set_tabular_state(s);
        for (i, table) in tables.iter_mut().enumerate() {
            table.push(probs(&probe, i)?);
        }
    }
    let v = exact_policy_eval(&mdp, &tables, gamma)?;
    Ok(Some(v.iter().sum::<f64>() / v.len() as f64))
}

/// Mean discounted return of the agent-averaged reward under sampled
/// softmax actions, plus the exact value for small tabular models.
pub fn eval_policy<E: MultiAgentEnv + Clone>(env: &E, policies: &[ParamVector], n_episodes: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Result<EvalResult> {
    if policies.len() != env.n_agents() {
        return Err(invalid("one policy per agent is required"));
    }
    let (mean, se) = eval_with(env, n_episodes, gamma, rng, |e, i, r| sample_action(&policies[i], &e.actor_obs(i), r))?;
    let exact = exact_with(env, gamma, |e, i| policies[i].eval(&e.actor_obs(i)))?;
    Ok(EvalResult { mean, se, exact })
}

/// Max and mean of `|V_i(s) − V_j(s)|` over probe states and agent pairs.
pub fn consensus_disagreement(values: &[ParamVector], probes: &[Snapshot]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(invalid("disagreement needs at least two agents"));
    }
    let table = value_table(values, probes)?;
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in &table {
        for i in 0..row.len() {
            for j in 0..i {
                let d = (row[i] - row[j]).abs();
                max = max.max(d);
                sum += d;
                count += 1;
            }
        }
    }
    Ok((max, if count == 0 { 0.0 } else { sum / count as f64 }))
}

/// `table[p][i] = V_i(probe p)`, each agent reading its own critic view.
pub fn value_table(values: &[ParamVector], probes: &[Snapshot]) -> Result<Vec<Vec<f64>>> {
    probes
        .iter()
        .map(|p| values.iter().enumerate().map(|(i, v)| v.eval_scalar(p.critic.get(i))).collect())
        .collect()
}

/// Spread of the agent-averaged value over the probe states.
pub fn probe_value_range(values: &[ParamVector], probes: &[Snapshot]) -> Result<f64> {
    let table = value_table(values, probes)?;
    let means: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if means.is_empty() { 0.0 } else { hi - lo })
}

/// Probe states: every tabular state up to `count`, otherwise fresh resets.
pub fn probe_states<E: MultiAgentEnv + Clone>(env: &E, count: usize, rng: &mut ChaCha8Rng) -> Vec<Snapshot> {
    let mut e = env.clone();
    if let Some(n) = env.tabular_mdp().map(|m| m.n_states()) {
        return (0..count.min(n))
            .map(|s| {
                e.set_tabular_state(s);
                snapshot(&e)
            })
            .collect();
    }
    (0..count)
        .map(|_| {
            e.reset(rng);
            snapshot(&e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{MdpEnv, TabularMdp};
    use crate::neural::{MlpSpec, OutputHead};
    use rand::SeedableRng;

    fn policy(states: usize, seed: u64) -> ParamVector {
        ParamVector::init(&MlpSpec::new(vec![states, 4, 2], OutputHead::Softmax).unwrap(), seed)
    }

    #[test]
    fn window_counts() {
        let mdp = Arc::new(TabularMdp::random(0, 4, 2, 2).unwrap());
        let mut env = MdpEnv::new(mdp, 10).unwrap();
        let pols = vec![policy(4, 1), policy(4, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = collect_episode(&mut env, &pols, 1, 0.9, &mut rng).unwrap();
        assert_eq!(ep.segments.len(), 10);
        assert!(ep.segments.iter().all(|s| s.k() == 1));
        let ep = collect_episode(&mut env, &pols, 4, 0.9, &mut rng).unwrap();
        assert_eq!(ep.segments.len(), 10);
        assert_eq!(ep.segments.iter().filter(|s| s.k() == 4).count(), 7);
        assert_eq!(ep.segments.iter().map(|s| s.k()).rev().take(3).collect::<Vec<_>>(), vec![1, 2, 3]);
        // windows overlap: segment t+1 starts where segment t's second state is
        assert!(Arc::ptr_eq(&ep.segments[0].states[1], &ep.segments[1].states[0]));
    }

    #[test]
    fn rollouts_repeat_per_seed() {
        let mdp = Arc::new(TabularMdp::from_tables(1, 1, 1, vec![1.0], vec![1.0]).unwrap());
        let mut env = MdpEnv::new(mdp, 5).unwrap();
        let pol = vec![ParamVector::zeros(&MlpSpec::new(vec![1, 2], OutputHead::Softmax).unwrap())];
        let a = collect_with(&mut env, 2, 0.9, &mut ChaCha8Rng::seed_from_u64(3), |_, _, _| Ok(0)).unwrap();
        let b = collect_with(&mut env, 2, 0.9, &mut ChaCha8Rng::seed_from_u64(3), |_, _, _| Ok(0)).unwrap();
        assert_eq!(a.segments, b.segments);
        assert!(collect_episode(&mut env, &pol, 1, 0.9, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_state_return() {
        let mdp = Arc::new(TabularMdp::from_tables(1, 1, 2, vec![1.0, 1.0], vec![1.0, 1.0]).unwrap());
        let env = MdpEnv::new(mdp, 400).unwrap();
        let pol = vec![policy(1, 0)];
        let r = eval_policy(&env, &pol, 3, 0.9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((r.mean - 10.0).abs() < 1e-12);
        assert_eq!(r.se, 0.0);
        assert!((r.exact.unwrap() - 10.0).abs() < 1e-10);
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        for seed in 0..3 {
            let mdp = Arc::new(TabularMdp::random(seed, 6, 2, 2).unwrap());
            let env = MdpEnv::new(mdp, 250).unwrap();
            let pols = vec![policy(6, seed + 10), policy(6, seed + 20)];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = eval_policy(&env, &pols, 400, 0.9, &mut rng).unwrap();
            let exact = r.exact.unwrap();
            assert!((r.mean - exact).abs() < 2.0 * r.se + 1e-9, "{} vs {} ± {}", r.mean, exact, r.se);

            let r4 = eval_policy(&env, &pols, 1600, 0.9, &mut rng).unwrap();
            let ratio = r.se / r4.se;
            assert!((1.6..2.5).contains(&ratio), "se ratio {ratio}");
        }
    }

    #[test]
    fn disagreement_examples() {
        let spec = MlpSpec::new(vec![3, 1], OutputHead::Identity).unwrap();
        let a = ParamVector::init(&spec, 1);
        let mut b = a.clone();
        *b.values_mut().last_mut().unwrap() += 0.75;
        let probes: Vec<Snapshot> = (0..3)
            .map(|s| {
                let mut x = vec![0.0; 3];
                x[s] = 1.0;
                Snapshot::uniform(x)
            })
            .collect();
        assert_eq!(consensus_disagreement(&[a.clone(), a.clone()], &probes).unwrap(), (0.0, 0.0));
        let (mx, mean) = consensus_disagreement(&[a.clone(), b], &probes).unwrap();
        assert!((mx - 0.75).abs() < 1e-12 && (mean - 0.75).abs() < 1e-12);
        assert!(consensus_disagreement(&[a], &probes).is_err());
    }
}
