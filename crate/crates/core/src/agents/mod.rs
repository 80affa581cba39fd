//! Learners: value propagation, its centralized and communication-free
//! ablations, and an independent Q-learning baseline. All share the same
//! episode collection, replay and evaluation machinery.

mod buffer;
mod eval;
mod iql;
mod trainer;

pub use buffer::ReplayBuffer;
pub use eval::{
    collect_episode, collect_with, consensus_disagreement, eval_policy, eval_with, exact_with, probe_states, probe_value_range,
    snapshot, value_table, EvalResult, Episode,
};
pub use iql::{train_independent_q, QOutcome};
pub use trainer::{initial_learners, train, train_centralized_pcl, train_no_comm_pcl, train_value_propagation, Learners, NetSnapshot, Topology, TrainOutcome};

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::error::{config_err, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Proximal primal-dual consensus, plain SGD on policies.
    Proxpda,
    /// Mixing-matrix consensus with adaptive moments everywhere.
    Accel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    /// Rollout length of the multi-step residual.
    pub k: usize,
    /// Outer iterations; each collects one episode.
    pub iterations: usize,
    /// Dual rounds per outer iteration.
    pub t_dual: usize,
    pub batch_size: usize,
    /// Use `⌈√iterations⌉` as the minibatch size instead of `batch_size`.
    pub theory_batch: bool,
    pub alpha_v: f64,
    pub alpha_pi: f64,
    pub alpha_rho: f64,
    pub variant: Variant,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub probe_state_count: usize,
    pub buffer_capacity: usize,
    pub v_hidden: Vec<usize>,
    pub rho_hidden: Vec<usize>,
    pub pi_hidden: Vec<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Independent Q-learning: updates between target-network refreshes.
    pub target_refresh: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.9,
            lambda: 0.01,
            eta: 0.01,
            k: 1,
            iterations: 2000,
            t_dual: 10,
            batch_size: 32,
            theory_batch: false,
            alpha_v: 5e-4,
            alpha_pi: 5e-4,
            alpha_rho: 5e-4,
            variant: Variant::Proxpda,
            seed: 0,
            eval_every: 100,
            eval_episodes: 20,
            probe_state_count: 20,
            buffer_capacity: 10_000,
            v_hidden: vec![20, 20],
            rho_hidden: vec![20, 20],
            pi_hidden: vec![32],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            target_refresh: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(config_err("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(config_err("lambda", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(config_err("eta", format!("must lie in [0, 1], got {}", self.eta)));
        }
        for (key, v) in [("k", self.k), ("iterations", self.iterations), ("batch_size", self.batch_size), ("eval_every", self.eval_every)] {
            if v == 0 {
                return Err(config_err(key, "must be at least 1"));
            }
        }
        for (key, v) in [("eval_episodes", self.eval_episodes), ("buffer_capacity", self.buffer_capacity), ("target_refresh", self.target_refresh)] {
            if v == 0 {
                return Err(config_err(key, "must be at least 1"));
            }
        }
        for (key, v) in [("alpha_v", self.alpha_v), ("alpha_pi", self.alpha_pi), ("alpha_rho", self.alpha_rho)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        for (key, h) in [("v_hidden", &self.v_hidden), ("rho_hidden", &self.rho_hidden), ("pi_hidden", &self.pi_hidden)] {
            if h.contains(&0) {
                return Err(config_err(key, "hidden widths must be positive"));
            }
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        if self.theory_batch {
            (self.iterations as f64).sqrt().ceil() as usize
        } else {
            self.batch_size
        }
    }

    pub fn consistency(&self, n_agents: usize) -> ConsistencyConfig {
        ConsistencyConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            eta: self.eta,
            n_agents,
            k: self.k,
        }
    }
}

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Init = 0,
    Collect = 1,
    Sample = 2,
    Eval = 3,
    Probe = 4,
}

pub(crate) fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64 + 1);
    rng
}

/// Deterministic sub-seed for network initialization.
pub(crate) fn init_seed(seed: u64, slot: u64) -> u64 {
    let mut rng = stream_rng(seed, Stream::Init);
    rng.set_word_pos(u128::from(slot) * 16);
    rng.next_u64()
}

/// JSON has no NaN; metrics that do not apply are written as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One evaluation row. Metrics that do not apply to a method are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    #[serde(with = "nan_as_null")]
    pub return_mean: f64,
    #[serde(with = "nan_as_null")]
    pub return_se: f64,
    #[serde(with = "nan_as_null")]
    pub v_disagree_max: f64,
    #[serde(with = "nan_as_null")]
    pub v_disagree_mean: f64,
    #[serde(with = "nan_as_null")]
    pub rho_disagree_max: f64,
    #[serde(with = "nan_as_null")]
    pub loss_primal: f64,
    #[serde(with = "nan_as_null")]
    pub loss_dual: f64,
    #[serde(with = "nan_as_null")]
    pub q_diag: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "iter,return_mean,return_se,v_disagree_max,v_disagree_mean,loss_primal,loss_dual,q_diag,wall_ms";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub method: String,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn new(method: &str) -> Self {
        TrainLog {
            method: method.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.iter, r.return_mean, r.return_se, r.v_disagree_max, r.v_disagree_mean, r.loss_primal, r.loss_dual, r.q_diag, r.wall_ms
            );
        }
        out
    }

    /// The log with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainLog {
        let mut l = self.clone();
        for r in &mut l.rows {
            r.wall_ms = 0;
        }
        l
    }

    /// Bit-level equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let (a, b) = (self.without_timing(), other.without_timing());
        a.method == b.method
            && a.rows.len() == b.rows.len()
            && a.rows.iter().zip(&b.rows).all(|(x, y)| {
                x.iter == y.iter
                    && [x.return_mean, x.return_se, x.v_disagree_max, x.v_disagree_mean, x.rho_disagree_max, x.loss_primal, x.loss_dual, x.q_diag]
                        .iter()
                        .zip([y.return_mean, y.return_se, y.v_disagree_max, y.v_disagree_mean, y.rho_disagree_max, y.loss_primal, y.loss_dual, y.q_diag])
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.return_mean)
    }
}
