//! Experiment plumbing: resolved configurations, run directories with
//! manifests, the command line, verification suites and report series.

mod cli;
mod config;
mod report;
mod verify;

pub use cli::cli;
pub use config::{
    load_config, merge, resolve, schema, EnvConfig, EnvKind, GraphConfig, GraphKind, Method, RunConfig, TestbedConfig, CONFIG_FORMAT_VERSION, PRESETS,
};
pub use report::{report, ReportSummary};
pub use verify::{fixed_point_drift, gradient_check, oracle_measurement, rate_measurement, run_suite, Check, Suite, SuiteReport};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{train, train_independent_q, NetSnapshot, Learners, Topology, TrainLog, FORMAT_VERSION};
use crate::envs::{MdpEnv, MultiAgentEnv, NavEnv, ObsMode, TabularMdp};
use crate::error::{config_err, invalid, Result};
use crate::graph::{build_matrices, CommGraph};
use crate::optim::{make_ls_testbed, run_testbed, theory_constants, trace_csv, TraceRow};

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub config: Value,
    /// Edges added to connect a sampled random graph; absent when no graph is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_repair_edges: Option<usize>,
    /// Output files, relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-resolves the embedded configuration.
    pub fn resolved(&self) -> Result<RunConfig> {
        RunConfig::from_json(self.config.clone())
    }
}

/// In-memory result of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: TrainLog,
    pub snapshots: Vec<NetSnapshot>,
    /// Optimizer trace, testbed runs only.
    pub trace: Vec<TraceRow>,
}

/// Environment described by a config. Under partial observability the
/// communication graph also decides what each actor sees.
pub enum BuiltEnv {
    Mdp(MdpEnv),
    Nav(NavEnv),
}

pub fn build_env(cfg: &RunConfig) -> Result<BuiltEnv> {
    let e = &cfg.env;
    Ok(match e.kind {
        EnvKind::RandomMdp => {
            let mdp = TabularMdp::random(e.mdp_seed, e.n_states, e.n_agents, e.actions_per_agent)?;
            BuiltEnv::Mdp(MdpEnv::new(Arc::new(mdp), e.episode_len)?)
        }
        EnvKind::CoopNav => {
            let mode = if e.partial_obs { ObsMode::Partial } else { ObsMode::Full };
            let graph = if e.partial_obs { Some(cfg.graph.build(e.n_agents)?) } else { None };
            BuiltEnv::Nav(NavEnv::new(e.nav.clone(), graph, mode)?)
        }
    })
}

fn graph_for(cfg: &RunConfig) -> Result<Option<CommGraph>> {
    if cfg.method == Method::ValuePropagation && cfg.env.n_agents > 1 {
        cfg.graph.build(cfg.env.n_agents).map(Some)
    } else {
        Ok(None)
    }
}

fn graph_repairs(cfg: &RunConfig) -> Result<Option<usize>> {
    let n = match cfg.method {
        Method::Testbed => cfg.testbed.n_agents,
        _ if graph_for(cfg)?.is_some() || cfg.env.partial_obs => cfg.env.n_agents,
        _ => return Ok(None),
    };
    cfg.graph.build_with_repairs(n).map(|(_, r)| Some(r))
}

fn run_on<E: MultiAgentEnv + Clone>(env: &E, cfg: &RunConfig, graph: Option<&CommGraph>) -> Result<RunResult> {
    let topology = match cfg.method {
        Method::ValuePropagation => Topology::Consensus,
        Method::NoCommPcl => Topology::Edgeless,
        Method::CentralizedPcl => Topology::Centralized,
        Method::IndependentQ => {
            let out = train_independent_q(env, &cfg.train)?;
            let snap = NetSnapshot {
                format_version: FORMAT_VERSION,
                method: Method::IndependentQ.name().into(),
                iteration: cfg.train.iterations,
                learners: Learners {
                    v: Vec::new(),
                    rho: Vec::new(),
                    pi: out.q,
                },
            };
            return Ok(RunResult {
                log: out.log,
                snapshots: vec![snap],
                trace: Vec::new(),
            });
        }
        Method::Testbed => return Err(invalid("the testbed has no environment")),
    };
    let out = train(env, topology, graph, &cfg.train)?;
    Ok(RunResult {
        log: out.log,
        snapshots: out.snapshots,
        trace: Vec::new(),
    })
}

fn run_testbed_cfg(cfg: &RunConfig) -> Result<RunResult> {
    let t = &cfg.testbed;
    let tb = make_ls_testbed(t.n_agents, t.dim, t.seed)?;
    let matrices = Arc::new(build_matrices(&cfg.graph.build(t.n_agents)?));
    let (c, beta) = theory_constants(&matrices, tb.lipschitz);
    let run = run_testbed(&tb, matrices, beta, c, t.iterations)?;
    Ok(RunResult {
        log: TrainLog::new(Method::Testbed.name()),
        snapshots: Vec::new(),
        trace: run.trace,
    })
}

/// Runs a resolved configuration in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.method == Method::Testbed {
        return run_testbed_cfg(cfg);
    }
    let graph = graph_for(cfg)?;
    match build_env(cfg)? {
        BuiltEnv::Mdp(env) => run_on(&env, cfg, graph.as_ref()),
        BuiltEnv::Nav(env) => run_on(&env, cfg, graph.as_ref()),
    }
}

fn write(dir: &Path, name: &str, body: &str, outputs: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), body)?;
    outputs.push(name.to_string());
    Ok(())
}

/// Runs a configuration and writes manifest, logs and snapshots to `dir`.
pub fn execute_to_dir(cfg: &RunConfig, dir: &Path) -> Result<RunResult> {
    let result = execute(cfg)?;
    fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();
    if cfg.method == Method::Testbed {
        write(dir, "trace.csv", &trace_csv(&result.trace), &mut outputs)?;
    } else {
        write(dir, "log.csv", &result.log.to_csv(), &mut outputs)?;
        let log_json = serde_json::json!({ "format_version": FORMAT_VERSION, "log": result.log });
        write(dir, "log.json", &serde_json::to_string_pretty(&log_json)?, &mut outputs)?;
        for snap in &result.snapshots {
            let name = format!("snapshot_{:07}.json", snap.iteration);
            write(dir, &name, &serde_json::to_string(snap)?, &mut outputs)?;
        }
    }
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        format_version: CONFIG_FORMAT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        method: cfg.method.name().into(),
        config: cfg.to_json(),
        graph_repair_edges: graph_repairs(cfg)?,
        outputs,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(result)
}

/// Output directory of one seed inside a multi-seed run.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Runs one configuration per seed, fanning out over `jobs` threads.
/// Results come back in seed order regardless of scheduling.
pub fn execute_seeds(cfg: &RunConfig, seeds: &[u64], out: &Path, jobs: usize) -> Result<Vec<RunResult>> {
    if seeds.is_empty() {
        return Err(config_err("seeds", "at least one seed is required"));
    }
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.train.seed = s;
            c.testbed.seed = s;
            c
        })
        .collect();
    let jobs = jobs.clamp(1, seeds.len());
    let mut results: Vec<Option<Result<RunResult>>> = (0..seeds.len()).map(|_| None).collect();
    for chunk in (0..seeds.len()).collect::<Vec<_>>().chunks(jobs) {
        let done: Vec<(usize, Result<RunResult>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let c = &configs[i];
                    let dir = seed_dir(out, seeds[i]);
                    (i, scope.spawn(move || execute_to_dir(c, &dir)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(invalid("a training thread panicked")))))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Re-runs the configuration recorded in a manifest.
pub fn rerun_manifest(path: &Path) -> Result<RunResult> {
    execute(&RunManifest::load(path)?.resolved()?)
}
