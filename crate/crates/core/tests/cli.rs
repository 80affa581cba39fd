use std::fs;
use std::path::Path;

use serde_json::json;
use valprop::agents::TrainLog;
use valprop::harness::{cli, execute, load_config, report, rerun_manifest, RunConfig, RunManifest};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["valprop"];
    argv.extend_from_slice(args);
    cli(argv)
}

/// A tiny random-MDP configuration that trains in well under a second.
fn tiny_config(dir: &Path, extra: serde_json::Value) -> String {
    let mut doc = json!({
        "preset": "random-mdp-ablation",
        "iterations": 20,
        "eval_every": 10,
        "t_dual": 2,
        "batch_size": 4,
        "v_hidden": [6],
        "rho_hidden": [6],
        "pi_hidden": [6],
        "probe_state_count": 4,
        "env": { "n_agents": 3, "n_states": 5, "episode_len": 6 },
        "graph": { "kind": "ring" }
    });
    for (k, v) in extra.as_object().unwrap() {
        doc[k] = v.clone();
    }
    let path = dir.join("tiny.json");
    fs::write(&path, doc.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_log(dir: &Path) -> TrainLog {
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("log.json")).unwrap()).unwrap();
    serde_json::from_value(doc["log"].clone()).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train", "no-such-preset"]), 2);
    assert_eq!(run(&["train", "random-mdp-ablation", "--variant", "fast"]), 2);
    assert_eq!(run(&["verify", "--suite", "everything"]), 2);
    assert_eq!(run(&["train", "random-mdp-ablation", "--eta", "3"]), 2);
}

#[test]
fn verify_suites_exit_zero() {
    assert_eq!(run(&["verify", "--suite", "consensus"]), 0);
    assert_eq!(run(&["verify", "--suite", "oracle"]), 0);
}

#[test]
fn bad_config_files_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"gamma": 1.5}"#).unwrap();
    let err = load_config(&p).unwrap_err().to_string();
    assert!(err.contains("gamma") && err.contains("(0, 1)"), "{err}");
    fs::write(&p, r#"{"gamma": 0.9, "learning_rate": 1}"#).unwrap();
    assert!(load_config(&p).unwrap_err().to_string().contains("learning_rate"));
    fs::write(&p, "{not json").unwrap();
    assert!(load_config(&p).is_err());
    assert_eq!(run(&["train", p.to_str().unwrap()]), 2);
}

#[test]
fn cli_flags_reproduce_the_documented_setups() {
    // Flags resolve through the same path as `train`; check the values they land on.
    let mdp = RunConfig::preset("random-mdp-ablation").unwrap();
    assert_eq!((mdp.env.n_states, mdp.env.actions_per_agent, mdp.env.n_agents), (32, 2, 10));
    assert_eq!((mdp.train.gamma, mdp.train.lambda, mdp.train.alpha_v), (0.9, 0.01, 5e-4));
    assert_eq!((mdp.train.v_hidden.clone(), mdp.train.pi_hidden.clone()), (vec![20, 20], vec![32]));
    let nav = RunConfig::preset("coop-nav").unwrap();
    assert_eq!((nav.train.gamma, nav.train.lambda, nav.train.k), (0.95, 0.01, 4));
    assert_eq!(nav.graph.connectivity_ratio, None);
    assert_eq!(nav.graph.build(8).unwrap().n_agents(), 8);
}

#[test]
fn train_report_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = dir.path().join("run");
    assert_eq!(run(&["train", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]), 0);
    for f in ["manifest.json", "log.csv", "log.json", "snapshot_0000020.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "iter,return_mean,return_se,v_disagree_max,v_disagree_mean,loss_primal,loss_dual,q_diag,wall_ms");
    assert_eq!(csv.lines().count(), 3);

    // Manifest round trip: reload, re-resolve, same hash; re-run, same log.
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.format_version, 1);
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.graph_repair_edges, Some(0));
    let resolved = manifest.resolved().unwrap();
    assert_eq!(resolved.hash(), manifest.config_hash);
    assert_eq!(load_config(&out.join("manifest.json")).unwrap().hash(), manifest.config_hash);
    let again = rerun_manifest(&out.join("manifest.json")).unwrap();
    assert!(again.log.same_trajectory(&read_log(&out)));

    // Training from the manifest itself writes an identical log.
    let out2 = dir.path().join("run2");
    assert_eq!(run(&["train", out.join("manifest.json").to_str().unwrap(), "--out", out2.to_str().unwrap()]), 0);
    assert!(read_log(&out2).same_trajectory(&read_log(&out)));

    assert_eq!(run(&["report", out.to_str().unwrap()]), 0);
    let series = fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(series.lines().next().unwrap(), "iter,return_mean,return_se,v_disagree_max,v_disagree_mean");
    assert_eq!(series.lines().count(), 3);

    let snap = out.join("snapshot_0000020.json");
    assert_eq!(run(&["eval", snap.to_str().unwrap(), &cfg, "--episodes", "5"]), 0);
    assert_eq!(run(&["eval", snap.to_str().unwrap(), "coop-nav"]), 1);
    assert_eq!(run(&["report", dir.path().join("nothing").to_str().unwrap()]), 1);
}

#[test]
fn multi_seed_runs_aggregate_and_ignore_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "method": "no-comm-pcl" }));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["train", &cfg, "--seeds", "0,1,2", "--jobs", "2", "--out", a.to_str().unwrap()]), 0);
    assert_eq!(run(&["train", &cfg, "--seeds", "0,1,2", "--out", b.to_str().unwrap()]), 0);
    for s in 0..3 {
        let sa = a.join(format!("seed_{s}"));
        assert!(read_log(&sa).same_trajectory(&read_log(&b.join(format!("seed_{s}")))));
    }
    assert_eq!(RunManifest::load(&a.join("seed_0/manifest.json")).unwrap().graph_repair_edges, None);
    let summaries = report(&a).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].seeds, vec![0, 1, 2]);
    let series = fs::read_to_string(a.join("series.csv")).unwrap();
    let header = series.lines().next().unwrap();
    for col in ["return_mean_seed0", "return_mean_seed2", "return_mean_mean", "return_mean_se", "v_disagree_max_se"] {
        assert!(header.split(',').any(|c| c == col), "{col} not in {header}");
    }
    let finals = &summaries[0].final_returns;
    let mean = finals.iter().sum::<f64>() / 3.0;
    assert!((summaries[0].final_return_mean.unwrap() - mean).abs() < 1e-12);

    // A parent directory reports every run group below it.
    assert_eq!(report(dir.path()).unwrap().len(), 2);
}

#[test]
fn testbed_report_passes_the_trace_through() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tb");
    assert_eq!(run(&["train", "optim-testbed", "--iterations", "300", "--out", out.to_str().unwrap()]), 0);
    assert_eq!(run(&["report", out.to_str().unwrap()]), 0);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let series = fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(series.lines().next().unwrap(), "iter,q_diag,potential,disagreement");
    assert_eq!(trace.lines().skip(1).collect::<Vec<_>>(), series.lines().skip(1).collect::<Vec<_>>());
    assert_eq!(trace.lines().count(), 301);

    // The written q column matches the in-memory optimizer trace bit for bit.
    let cfg = load_config(&out.join("manifest.json")).unwrap();
    let mem = execute(&cfg).unwrap();
    for (line, row) in series.lines().skip(1).zip(&mem.trace) {
        let q: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(q.to_bits(), row.q.to_bits());
    }
}

#[test]
fn independent_q_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "method": "independent-q", "target_refresh": 5 }));
    let out = dir.path().join("iq");
    assert_eq!(run(&["train", &cfg, "--out", out.to_str().unwrap()]), 0);
    let snap = out.join("snapshot_0000020.json");
    assert_eq!(run(&["eval", snap.to_str().unwrap(), &cfg, "--episodes", "3"]), 0);

    let schema = dir.path().join("schema.json");
    assert_eq!(run(&["schema", "--out", schema.to_str().unwrap()]), 0);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&schema).unwrap()).unwrap();
    let defaults = doc["defaults"].as_object().unwrap();
    for key in defaults.keys() {
        if key != "format_version" && key != "preset" {
            assert!(doc["keys"].get(key).is_some(), "undocumented key {key}");
        }
    }
}

#[test]
fn navigation_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nav.json");
    fs::write(
        &path,
        json!({
            "preset": "coop-nav-small",
            "iterations": 3,
            "eval_every": 3,
            "eval_episodes": 2,
            "t_dual": 1,
            "batch_size": 4,
            "probe_state_count": 3,
            "v_hidden": [4], "rho_hidden": [4], "pi_hidden": [4],
            "env": { "n_agents": 3, "nav": { "max_steps": 10 } }
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("nav");
    assert_eq!(run(&["train", path.to_str().unwrap(), "--partial", "--out", out.to_str().unwrap()]), 0);
    let cfg = RunManifest::load(&out.join("manifest.json")).unwrap().resolved().unwrap();
    assert!(cfg.env.partial_obs);
    assert_eq!(cfg.env.nav.n_agents, 3);
    assert_eq!(read_log(&out).rows.len(), 1);
}
