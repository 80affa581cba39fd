//! Run configuration: presets, JSON overrides, and the resolved form that
//! gets hashed into every manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::agents::{TrainConfig, Variant};
use crate::envs::NavConfig;
use crate::error::{config_err, Result};
use crate::graph::{random_graph_with_report, CommGraph};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ValuePropagation,
    CentralizedPcl,
    NoCommPcl,
    IndependentQ,
    /// Prox-PDA on the least-squares testbed.
    Testbed,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ValuePropagation => "value-propagation",
            Method::CentralizedPcl => "centralized-pcl",
            Method::NoCommPcl => "no-comm-pcl",
            Method::IndependentQ => "independent-q",
            Method::Testbed => "testbed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    RandomMdp,
    CoopNav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub n_agents: usize,
    /// Random MDP: state count.
    pub n_states: usize,
    /// Random MDP: actions per agent.
    pub actions_per_agent: usize,
    /// Random MDP: seed of the transition and reward tables.
    pub mdp_seed: u64,
    /// Random MDP: steps per collected episode.
    pub episode_len: usize,
    /// Navigation settings; its agent count follows `n_agents`.
    pub nav: NavConfig,
    /// Navigation: actors see only themselves and graph neighbors.
    pub partial_obs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Random,
    Complete,
    Ring,
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub kind: GraphKind,
    /// Per-pair edge probability; `null` means `min(1, 4/N)`.
    pub connectivity_ratio: Option<f64>,
    pub seed: u64,
}

impl GraphConfig {
    pub fn build(&self, n_agents: usize) -> Result<CommGraph> {
        self.build_with_repairs(n_agents).map(|(g, _)| g)
    }

    /// The graph plus the number of edges added to make a random sample connected.
    pub fn build_with_repairs(&self, n_agents: usize) -> Result<(CommGraph, usize)> {
        match self.kind {
            GraphKind::Random => {
                let ratio = self.connectivity_ratio.unwrap_or((4.0 / n_agents as f64).min(1.0));
                random_graph_with_report(n_agents, ratio, self.seed).map(|s| (s.graph, s.repair_edges))
            }
            GraphKind::Complete => CommGraph::complete(n_agents).map(|g| (g, 0)),
            GraphKind::Ring => CommGraph::ring(n_agents).map(|g| (g, 0)),
            GraphKind::Path => CommGraph::path(n_agents).map(|g| (g, 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestbedConfig {
    pub n_agents: usize,
    pub dim: usize,
    pub seed: u64,
    pub iterations: usize,
}

/// Fully resolved run description. Serialized flat: the training keys sit
/// at the top level next to `env`, `graph` and `testbed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub method: Method,
    pub env: EnvConfig,
    pub graph: GraphConfig,
    pub testbed: TestbedConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 5] = ["random-mdp-ablation", "coop-nav", "coop-nav-small", "coop-nav-16", "optim-testbed"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        let mdp_train = TrainConfig {
            gamma: 0.9,
            lambda: 0.01,
            eta: 0.01,
            k: 1,
            iterations: 20_000,
            alpha_v: 5e-4,
            alpha_pi: 5e-4,
            alpha_rho: 5e-4,
            variant: Variant::Accel,
            v_hidden: vec![20, 20],
            rho_hidden: vec![20, 20],
            pi_hidden: vec![32],
            ..TrainConfig::default()
        };
        let env = EnvConfig {
            kind: EnvKind::RandomMdp,
            n_agents: 10,
            n_states: 32,
            actions_per_agent: 2,
            mdp_seed: 0,
            episode_len: 20,
            nav: NavConfig::default(),
            partial_obs: false,
        };
        let graph = GraphConfig {
            kind: GraphKind::Random,
            connectivity_ratio: None,
            seed: 0,
        };
        let testbed = TestbedConfig {
            n_agents: 5,
            dim: 4,
            seed: 0,
            iterations: 2000,
        };
        let nav_train = TrainConfig {
            gamma: 0.95,
            k: 4,
            iterations: 3000,
            eval_every: 100,
            v_hidden: vec![40, 40],
            rho_hidden: vec![40, 40],
            ..mdp_train.clone()
        };
        let nav_env = |n: usize, max_steps: usize| EnvConfig {
            kind: EnvKind::CoopNav,
            n_agents: n,
            nav: NavConfig {
                n_agents: n,
                max_steps,
                ..NavConfig::default()
            },
            ..env.clone()
        };
        let base = RunConfig {
            preset: name.to_string(),
            method: Method::ValuePropagation,
            env: env.clone(),
            graph,
            testbed,
            train: mdp_train,
        };
        match name {
            "random-mdp-ablation" => Ok(base),
            "coop-nav" => Ok(RunConfig {
                env: nav_env(8, 500),
                train: nav_train,
                ..base
            }),
            "coop-nav-16" => Ok(RunConfig {
                env: nav_env(16, 500),
                train: nav_train,
                ..base
            }),
            "coop-nav-small" => Ok(RunConfig {
                env: nav_env(4, 200),
                train: TrainConfig {
                    iterations: 600,
                    eval_every: 50,
                    ..nav_train
                },
                ..base
            }),
            "optim-testbed" => Ok(RunConfig {
                method: Method::Testbed,
                graph: GraphConfig {
                    kind: GraphKind::Ring,
                    ..base.graph.clone()
                },
                ..base
            }),
            other => Err(config_err("preset", format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")))),
        }
    }

    pub fn to_json(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.train).expect("training config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        obj.insert("format_version".into(), CONFIG_FORMAT_VERSION.into());
        obj.insert("preset".into(), self.preset.clone().into());
        obj.insert("method".into(), serde_json::to_value(self.method).expect("enum"));
        obj.insert("env".into(), serde_json::to_value(&self.env).expect("env"));
        obj.insert("graph".into(), serde_json::to_value(&self.graph).expect("graph"));
        obj.insert("testbed".into(), serde_json::to_value(&self.testbed).expect("testbed"));
        Value::Object(obj)
    }

    pub fn from_json(value: Value) -> Result<RunConfig> {
        let Value::Object(mut obj) = value else {
            return Err(config_err("<root>", "configuration must be a JSON object"));
        };
        let mut take = |key: &str| obj.remove(key).ok_or_else(|| config_err(key, "missing"));
        let version = take("format_version")?;
        if version.as_u64() != Some(u64::from(CONFIG_FORMAT_VERSION)) {
            return Err(config_err("format_version", format!("unsupported version {version}")));
        }
        let preset: String = typed("preset", take("preset")?)?;
        let method: Method = typed("method", take("method")?)?;
        let env: EnvConfig = typed("env", take("env")?)?;
        let graph: GraphConfig = typed("graph", take("graph")?)?;
        let testbed: TestbedConfig = typed("testbed", take("testbed")?)?;
        let train: TrainConfig = typed("<training>", Value::Object(obj))?;
        let cfg = RunConfig {
            preset,
            method,
            env,
            graph,
            testbed,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.env;
        if e.n_agents == 0 {
            return Err(config_err("env.n_agents", "must be at least 1"));
        }
        match e.kind {
            EnvKind::RandomMdp => {
                if e.n_states == 0 || e.actions_per_agent < 2 || e.episode_len == 0 {
                    return Err(config_err("env", "random MDP needs states, at least 2 actions and a positive episode length"));
                }
            }
            EnvKind::CoopNav => {
                if e.nav.n_agents != e.n_agents {
                    return Err(config_err("env.nav.n_agents", "must equal env.n_agents"));
                }
                e.nav.validate().map_err(|err| config_err("env.nav", err.to_string()))?;
            }
        }
        if let Some(r) = self.graph.connectivity_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(config_err("graph.connectivity_ratio", format!("must lie in (0, 1], got {r}")));
            }
        }
        if self.testbed.n_agents < 2 || self.testbed.dim == 0 || self.testbed.iterations == 0 {
            return Err(config_err("testbed", "needs at least two agents, a positive dimension and iterations"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_json()).expect("value serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `--agents N`, keeping the navigation config in step.
    pub fn set_agents(&mut self, n: usize) {
        self.env.n_agents = n;
        self.env.nav.n_agents = n;
    }
}

fn typed<T: for<'de> Deserialize<'de>>(key: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| config_err(key, e.to_string()))
}

/// Overlays `patch` onto `base`, rejecting keys the base does not have.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(config_err(key, "unknown key")),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Resolves a JSON document: a manifest (its embedded config is used), or
/// an override object on top of the preset named by its `preset` key
/// (`random-mdp-ablation` when absent).
pub fn resolve(doc: Value) -> Result<RunConfig> {
    let Value::Object(mut obj) = doc else {
        return Err(config_err("<root>", "configuration must be a JSON object"));
    };
    if obj.contains_key("config_hash") {
        let cfg = obj.remove("config").ok_or_else(|| config_err("config", "manifest without a config"))?;
        return RunConfig::from_json(cfg);
    }
    let preset = match obj.get("preset") {
        None => "random-mdp-ablation".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(config_err("preset", "must be a string")),
    };
    let mut base = RunConfig::preset(&preset)?.to_json();
    let mut patch = Map::new();
    for (k, v) in obj {
        patch.insert(k, v);
    }
    // `--agents`-style overrides of env.n_agents carry over to the nav block.
    if let Some(n) = patch.get("env").and_then(|e| e.get("n_agents")).cloned() {
        if let Some(Value::Object(env)) = base.get_mut("env") {
            if let Some(Value::Object(nav)) = env.get_mut("nav") {
                nav.insert("n_agents".into(), n);
            }
        }
    }
    merge(&mut base, &Value::Object(patch), "")?;
    RunConfig::from_json(base)
}

/// Reads and resolves a configuration or manifest file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| config_err("<root>", format!("malformed JSON: {e}")))?;
    resolve(doc)
}

/// Documented defaults of every key, as a JSON document.
pub fn schema() -> Value {
    let base = RunConfig::preset("random-mdp-ablation").expect("built-in preset");
    let mut docs = Map::new();
    let describe = [
        ("gamma", "discount factor, in (0, 1)"),
        ("lambda", "entropy weight, >= 0"),
        ("eta", "dual weight, in [0, 1]"),
        ("k", "rollout length of the multi-step residual, >= 1"),
        ("iterations", "outer iterations, one episode each"),
        ("t_dual", "dual rounds per outer iteration"),
        ("batch_size", "minibatch size"),
        ("theory_batch", "use ceil(sqrt(iterations)) as the minibatch size"),
        ("alpha_v", "value step size"),
        ("alpha_pi", "policy step size"),
        ("alpha_rho", "dual step size"),
        ("variant", "proxpda | accel"),
        ("seed", "master seed"),
        ("eval_every", "iterations between evaluation rows"),
        ("eval_episodes", "Monte-Carlo episodes per evaluation (non-tabular envs)"),
        ("probe_state_count", "states used for disagreement diagnostics"),
        ("buffer_capacity", "replay capacity in windows"),
        ("v_hidden", "hidden widths of value networks"),
        ("rho_hidden", "hidden widths of dual networks"),
        ("pi_hidden", "hidden widths of policy networks"),
        ("adam_beta1", "first-moment rate of the accel variant"),
        ("adam_beta2", "second-moment rate of the accel variant"),
        ("target_refresh", "independent Q: updates between target copies"),
        ("method", "value-propagation | centralized-pcl | no-comm-pcl | independent-q | testbed"),
        ("env", "environment block: kind random-mdp | coop-nav"),
        ("graph", "communication graph: kind random | complete | ring | path"),
        ("testbed", "least-squares testbed for the optimizer"),
    ];
    for (k, d) in describe {
        docs.insert(k.into(), d.into());
    }
    serde_json::json!({
        "format_version": CONFIG_FORMAT_VERSION,
        "presets": PRESETS,
        "defaults": base.to_json(),
        "keys": docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn empty_override_keeps_preset() {
        for p in PRESETS {
            let doc = serde_json::json!({ "preset": p });
            assert_eq!(resolve(doc).unwrap(), RunConfig::preset(p).unwrap());
        }
        assert_eq!(resolve(serde_json::json!({})).unwrap(), RunConfig::preset("random-mdp-ablation").unwrap());
    }

    #[test]
    fn gamma_bound_names_the_key() {
        let err = resolve(serde_json::json!({ "gamma": 1.5 })).unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "gamma");
                assert!(message.contains("(0, 1)"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = resolve(serde_json::json!({ "gama": 0.5 })).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "gama"));
        let err = resolve(serde_json::json!({ "env": { "n_sates": 4 } })).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "env.n_sates"));
        assert!(resolve(serde_json::json!({ "preset": "nope" })).is_err());
    }

    #[test]
    fn nested_override_and_round_trip() {
        let cfg = resolve(serde_json::json!({ "preset": "coop-nav", "env": { "n_agents": 16 }, "eta": 0.1 })).unwrap();
        assert_eq!(cfg.env.nav.n_agents, 16);
        assert_eq!(cfg.train.eta, 0.1);
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.train.gamma, 0.95);
        let again = RunConfig::from_json(cfg.to_json()).unwrap();
        assert_eq!(again.hash(), cfg.hash());
        let manifest = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg.to_json() });
        assert_eq!(resolve(manifest).unwrap().hash(), cfg.hash());
    }

    #[test]
    fn preset_values() {
        let c = RunConfig::preset("random-mdp-ablation").unwrap();
        assert_eq!((c.env.n_agents, c.env.n_states, c.env.actions_per_agent), (10, 32, 2));
        assert_eq!((c.train.gamma, c.train.lambda, c.train.alpha_v), (0.9, 0.01, 5e-4));
        assert_eq!(c.train.v_hidden, vec![20, 20]);
        assert_eq!(c.train.pi_hidden, vec![32]);
        let g = c.graph.build(8).unwrap();
        assert_eq!(g.n_agents(), 8);
    }
}
