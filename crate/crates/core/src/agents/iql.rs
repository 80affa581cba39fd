use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::eval::{collect_with, eval_with, exact_with};
use super::{init_seed, stream_rng, LogRow, ReplayBuffer, Stream, TrainConfig, TrainLog, Variant};
use crate::consistency::{argmax_lowest, Segment};
use crate::envs::MultiAgentEnv;
use crate::error::Result;
use crate::neural::{MlpSpec, OutputHead, ParamVector};
use crate::optim::{local_adam_step, sgd_in_place, DecAdamState, Direction};

/// Final epsilon of the exploration schedule.
const EPS_END: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct QOutcome {
    /// One action-value network per agent on the central observation.
    pub q: Vec<ParamVector>,
    pub log: TrainLog,
}

/// Linear anneal from 1 to `EPS_END` over the first half of training.
fn epsilon(iter: usize, total: usize) -> f64 {
    let frac = iter as f64 / (total as f64 / 2.0).max(1.0);
    if frac >= 1.0 {
        EPS_END
    } else {
        1.0 - (1.0 - EPS_END) * frac
    }
}

fn greedy(q: &ParamVector, obs: &[f64]) -> Result<usize> {
    Ok(argmax_lowest(&q.eval(obs)?))
}

/// Independent Q-learning: each agent regresses its own reward plus the
/// discounted greedy value of a frozen target copy, treating the others as
/// part of the environment. Evaluation is greedy.
pub fn train_independent_q<E: MultiAgentEnv + Clone>(env: &E, cfg: &TrainConfig) -> Result<QOutcome> {
    cfg.validate()?;
    let n = env.n_agents();
    let n_actions = env.n_actions();
    let mut widths = vec![env.central_dim()];
    widths.extend_from_slice(&cfg.v_hidden);
    widths.push(n_actions);
    let spec = MlpSpec::new(widths, OutputHead::Identity)?;
    let mut q: Vec<ParamVector> = (0..n).map(|i| ParamVector::init(&spec, init_seed(cfg.seed, 2 + i as u64))).collect();
    let mut target = q.clone();
    let mut adam: Vec<DecAdamState> = (0..n)
        .map(|_| DecAdamState::new(1, spec.n_params(), cfg.alpha_v, cfg.adam_beta1, cfg.adam_beta2))
        .collect::<Result<_>>()?;

    let mut collect_rng = stream_rng(cfg.seed, Stream::Collect);
    let mut sample_rng = stream_rng(cfg.seed, Stream::Sample);
    let mut eval_rng = stream_rng(cfg.seed, Stream::Eval);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut work_env = env.clone();
    let mut log = TrainLog::new("independent-q");
    let batch_size = cfg.effective_batch();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut updates = 0usize;
    let start = Instant::now();

    for it in 1..=cfg.iterations {
        let eps = epsilon(it - 1, cfg.iterations);
        let ep = collect_with(&mut work_env, 1, cfg.gamma, &mut collect_rng, |e, i, r: &mut ChaCha8Rng| {
            if r.gen::<f64>() < eps {
                Ok(r.gen_range(0..n_actions))
            } else {
                greedy(&q[i], &e.central_obs())
            }
        })?;
        buffer.extend(ep.segments);

        let batch = buffer.sample(batch_size, &mut sample_rng)?;
        for i in 0..n {
            let (g, loss) = td_grad(&q[i], &target[i], i, &batch, cfg.gamma)?;
            loss_sum += loss;
            loss_n += 1;
            match cfg.variant {
                Variant::Proxpda => sgd_in_place(q[i].values_mut(), &g, cfg.alpha_v, Direction::Descent),
                Variant::Accel => local_adam_step(q[i].values_mut(), &g, &mut adam[i], Direction::Descent)?,
            }
        }
        updates += 1;
        if updates % cfg.target_refresh == 0 {
            target = q.clone();
        }

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let (mean, se) = match exact_with(env, cfg.gamma, |e, i| {
                let a = greedy(&q[i], &e.central_obs())?;
                Ok((0..n_actions).map(|b| if b == a { 1.0 } else { 0.0 }).collect())
            })? {
                Some(x) => (x, 0.0),
                None => eval_with(env, cfg.eval_episodes, cfg.gamma, &mut eval_rng, |e, i, _| greedy(&q[i], &e.central_obs()))?,
            };
            log.push(LogRow {
                iter: it,
                return_mean: mean,
                return_se: se,
                v_disagree_max: f64::NAN,
                v_disagree_mean: f64::NAN,
                rho_disagree_max: f64::NAN,
                loss_primal: loss_sum / loss_n.max(1) as f64,
                loss_dual: 0.0,
                q_diag: f64::NAN,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(QOutcome { q, log })
}

/// Minibatch-mean gradient of `(Q(s,a_i) − r_i − γ max_b Q̄(s',b))²`.
fn td_grad(q: &ParamVector, target: &ParamVector, agent: usize, batch: &[&Segment], gamma: f64) -> Result<(Vec<f64>, f64)> {
    let mut g = vec![0.0; q.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for seg in batch {
        let next = target.eval(&seg.states[1].central)?;
        let y = seg.rewards[0][agent] + gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (out, tape) = q.forward(&seg.states[0].central)?;
        let a = seg.actions[0][agent];
        let res = out[a] - y;
        loss += res * res * scale;
        let mut og = vec![0.0; out.len()];
        og[a] = 2.0 * res;
        q.backward_into(&tape, &og, scale, &mut g)?;
    }
    Ok((g, loss))
}
