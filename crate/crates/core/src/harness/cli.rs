use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use super::config::{load_config, schema, Method, RunConfig, PRESETS};
use super::report::report;
use super::verify::{run_suite, Suite};
use super::{build_env, execute_seeds, execute_to_dir, BuiltEnv};
use crate::agents::{eval_policy, eval_with, stream_rng, NetSnapshot, Stream, Variant};
use crate::consistency::argmax_lowest;
use crate::envs::MultiAgentEnv;
use crate::error::{config_err, invalid, Result};
use crate::neural::ParamVector;

#[derive(Parser, Debug)]
#[command(name = "valprop", version, about = "Decentralized multi-agent RL by value propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a preset name or a JSON config file.
    Train {
        /// Preset name or path to a config / manifest file.
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seeds; each gets its own `seed_<s>` directory.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["proxpda", "accel"])]
        variant: Option<String>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        agents: Option<usize>,
        /// Partial observability for navigation actors.
        #[arg(long)]
        partial: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_parser = ["value-propagation", "centralized-pcl", "no-comm-pcl", "independent-q", "testbed"])]
        method: Option<String>,
        /// Worker threads for multi-seed runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a policy snapshot on the environment of a config.
    Eval {
        snapshot: PathBuf,
        env_config: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run self-check suites.
    Verify {
        #[arg(long, default_value = "all", value_parser = ["graph", "grad", "consensus", "rate", "oracle", "all"])]
        suite: String,
    },
    /// Write plot-ready series for a run directory.
    Report { run_dir: PathBuf },
    /// Print (or write) the documented configuration defaults.
    Schema {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point; returns the process exit code (0 ok, 1 failure, 2 usage).
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(parsed.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                crate::Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}

/// Preset name, or a config/manifest file.
fn base_config(target: &str) -> Result<RunConfig> {
    if PRESETS.contains(&target) {
        return RunConfig::preset(target);
    }
    let path = Path::new(target);
    if path.is_file() {
        return load_config(path);
    }
    Err(config_err("preset", format!("`{target}` is neither a preset ({}) nor a file", PRESETS.join(", "))))
}

#[allow(clippy::too_many_arguments)]
fn with_flags(
    base: RunConfig,
    seed: Option<u64>,
    variant: Option<String>,
    eta: Option<f64>,
    agents: Option<usize>,
    partial: bool,
    iterations: Option<usize>,
    method: Option<String>,
) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.testbed.seed = s;
    }
    if let Some(v) = variant {
        cfg.train.variant = if v == "accel" { Variant::Accel } else { Variant::Proxpda };
    }
    if let Some(e) = eta {
        cfg.train.eta = e;
    }
    if let Some(i) = iterations {
        cfg.train.iterations = i;
        cfg.testbed.iterations = i;
    }
    if let Some(m) = method {
        cfg.method = serde_json::from_value(Value::String(m)).map_err(|e| config_err("method", e.to_string()))?;
    }
    if let Some(n) = agents {
        cfg.set_agents(n);
    }
    if partial {
        cfg.env.partial_obs = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_out(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}-{}", cfg.preset, cfg.method.name(), &cfg.hash()[..8]))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            target,
            seed,
            seeds,
            out,
            variant,
            eta,
            agents,
            partial,
            iterations,
            method,
            jobs,
        } => {
            let cfg = with_flags(base_config(&target)?, seed, variant, eta, agents, partial, iterations, method)?;
            let dir = out.unwrap_or_else(|| default_out(&cfg));
            match seeds {
                Some(list) => {
                    let results = execute_seeds(&cfg, &list, &dir, jobs)?;
                    for (s, r) in list.iter().zip(&results) {
                        println!("seed {s}: final return {}", r.log.final_return().map_or("n/a".into(), |x| format!("{x:.6}")));
                    }
                }
                None => {
                    let r = execute_to_dir(&cfg, &dir)?;
                    match r.log.final_return() {
                        Some(x) => println!("final return {x:.6}"),
                        None => println!("{} trace rows", r.trace.len()),
                    }
                }
            }
            println!("wrote {}", dir.display());
            Ok(0)
        }
        Command::Eval {
            snapshot,
            env_config,
            episodes,
            seed,
        } => {
            let snap: NetSnapshot = serde_json::from_str(&std::fs::read_to_string(&snapshot)?)?;
            let cfg = base_config(&env_config)?;
            if cfg.method == Method::Testbed {
                return Err(config_err("method", "the testbed has no environment to evaluate on"));
            }
            let (mean, se) = match build_env(&cfg)? {
                BuiltEnv::Mdp(env) => eval_snapshot(&env, &snap, episodes, cfg.train.gamma, seed)?,
                BuiltEnv::Nav(env) => eval_snapshot(&env, &snap, episodes, cfg.train.gamma, seed)?,
            };
            println!("mean discounted return {mean:.6} +- {se:.6}");
            Ok(0)
        }
        Command::Verify { suite } => {
            let suites: Vec<Suite> = if suite == "all" { Suite::ALL.to_vec() } else { Suite::parse(&suite).into_iter().collect() };
            let mut ok = true;
            for s in suites {
                let rep = run_suite(s)?;
                for c in &rep.checks {
                    println!("[{}] {}: {} ({})", s.name(), c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
                }
                println!("[{}] {} in {:.2}s", s.name(), if rep.pass() { "passed" } else { "FAILED" }, rep.seconds);
                ok &= rep.pass();
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Report { run_dir } => {
            for s in report(&run_dir)? {
                match (s.final_return_mean, s.final_return_se) {
                    (Some(m), Some(se)) => println!("{} ({}, {} seeds): final return {m:.6} +- {se:.6}", s.dir.display(), s.method, s.seeds.len()),
                    _ => println!("{} ({}): series written", s.dir.display(), s.method),
                }
            }
            Ok(0)
        }
        Command::Schema { out } => {
            let text = serde_json::to_string_pretty(&schema())?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
            Ok(0)
        }
    }
}

fn eval_snapshot<E: MultiAgentEnv + Clone>(env: &E, snap: &NetSnapshot, episodes: usize, gamma: f64, seed: u64) -> Result<(f64, f64)> {
    let pis: &[ParamVector] = &snap.learners.pi;
    if pis.len() != env.n_agents() {
        return Err(invalid(format!("snapshot has {} policies, environment has {} agents", pis.len(), env.n_agents())));
    }
    let mut rng = stream_rng(seed, Stream::Eval);
    if snap.method == Method::IndependentQ.name() {
        return eval_with(env, episodes, gamma, &mut rng, |e, i, _| Ok(argmax_lowest(&pis[i].eval(&e.central_obs())?)));
    }
    let r = eval_policy(env, pis, episodes, gamma, &mut rng)?;
    Ok(r.exact.map_or((r.mean, r.se), |x| (x, 0.0)))
}
