//! Plot-ready series from run directories.
//!
//! A run directory holds `manifest.json` plus `log.json` (or `trace.csv`
//! for the testbed). A multi-seed directory holds `seed_<s>/` run
//! directories. Any other directory is treated as a collection of either.
//!
//! Columns of `series.csv`:
//! - single run: `iter,return_mean,return_se,v_disagree_max,v_disagree_mean`
//! - testbed run: `iter,q_diag,potential,disagreement`, copied verbatim
//! - multi-seed: `iter`, then for each metric one column per seed followed
//!   by `<metric>_mean` and `<metric>_se` across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::RunManifest;
use crate::agents::TrainLog;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub method: String,
    pub seeds: Vec<u64>,
    /// Final evaluated return per seed (empty for testbed runs).
    pub final_returns: Vec<f64>,
    pub final_return_mean: Option<f64>,
    pub final_return_se: Option<f64>,
    pub files: Vec<PathBuf>,
}

const METRICS: [&str; 4] = ["return_mean", "return_se", "v_disagree_max", "v_disagree_mean"];

fn missing(path: &Path) -> Error {
    invalid(format!("missing file {}", path.display()))
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join("manifest.json");
    if !p.is_file() {
        return Err(missing(&p));
    }
    RunManifest::load(&p)
}

fn read_log(dir: &Path) -> Result<TrainLog> {
    let p = dir.join("log.json");
    if !p.is_file() {
        return Err(missing(&p));
    }
    let doc: Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
    let log = doc.get("log").cloned().ok_or_else(|| invalid(format!("{} has no `log` field", p.display())))?;
    Ok(serde_json::from_value(log)?)
}

fn read_trace(dir: &Path) -> Result<Vec<Vec<String>>> {
    let p = dir.join("trace.csv");
    if !p.is_file() {
        return Err(missing(&p));
    }
    Ok(fs::read_to_string(&p)?
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn metric(row: &crate::agents::LogRow, name: &str) -> f64 {
    match name {
        "return_mean" => row.return_mean,
        "return_se" => row.return_se,
        "v_disagree_max" => row.v_disagree_max,
        _ => row.v_disagree_mean,
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn write_summary(summary: &ReportSummary) -> Result<()> {
    fs::write(summary.dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

fn single(dir: &Path) -> Result<ReportSummary> {
    let manifest = read_manifest(dir)?;
    let series = dir.join("series.csv");
    let mut out = String::new();
    let mut final_returns = Vec::new();
    if manifest.method == "testbed" {
        out.push_str("iter,q_diag,potential,disagreement\n");
        for row in read_trace(dir)? {
            out.push_str(&row.join(","));
            out.push('\n');
        }
    } else {
        let log = read_log(dir)?;
        out.push_str("iter,");
        out.push_str(&METRICS.join(","));
        out.push('\n');
        for r in &log.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.iter, r.return_mean, r.return_se, r.v_disagree_max, r.v_disagree_mean);
        }
        final_returns.extend(log.final_return());
    }
    fs::write(&series, out)?;
    let summary = ReportSummary {
        dir: dir.to_path_buf(),
        method: manifest.method,
        seeds: vec![manifest.seed],
        final_return_mean: final_returns.first().copied(),
        final_return_se: final_returns.first().map(|_| 0.0),
        final_returns,
        files: vec![series, dir.join("summary.json")],
    };
    write_summary(&summary)?;
    Ok(summary)
}

fn seed_dirs(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
            if path.join("manifest.json").is_file() {
                found.push((seed, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

fn multi(dir: &Path, seeds: &[(u64, PathBuf)]) -> Result<ReportSummary> {
    let manifests: Vec<RunManifest> = seeds.iter().map(|(_, p)| read_manifest(p)).collect::<Result<_>>()?;
    let method = manifests[0].method.clone();
    if manifests.iter().any(|m| m.method != method) {
        return Err(invalid(format!("{} mixes methods across seeds", dir.display())));
    }
    let ids: Vec<u64> = seeds.iter().map(|(s, _)| *s).collect();
    let mut out = String::from("iter");
    let mut final_returns = Vec::new();

    if method == "testbed" {
        let traces: Vec<Vec<Vec<String>>> = seeds.iter().map(|(_, p)| read_trace(p)).collect::<Result<_>>()?;
        for s in &ids {
            let _ = write!(out, ",q_diag_seed{s}");
        }
        out.push_str(",q_diag_mean,q_diag_se\n");
        let len = traces.iter().map(Vec::len).min().unwrap_or(0);
        for t in 0..len {
            out.push_str(&traces[0][t][0]);
            let mut vals = Vec::new();
            for tr in &traces {
                out.push(',');
                out.push_str(&tr[t][1]);
                vals.push(tr[t][1].parse::<f64>().map_err(|e| invalid(format!("bad trace value: {e}")))?);
            }
            let (m, se) = mean_se(&vals);
            let _ = writeln!(out, ",{m:e},{se:e}");
        }
    } else {
        let logs: Vec<TrainLog> = seeds.iter().map(|(_, p)| read_log(p)).collect::<Result<_>>()?;
        for name in METRICS {
            for s in &ids {
                let _ = write!(out, ",{name}_seed{s}");
            }
            let _ = write!(out, ",{name}_mean,{name}_se");
        }
        out.push('\n');
        let len = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
        for t in 0..len {
            let _ = write!(out, "{}", logs[0].rows[t].iter);
            for name in METRICS {
                let vals: Vec<f64> = logs.iter().map(|l| metric(&l.rows[t], name)).collect();
                for v in &vals {
                    let _ = write!(out, ",{v}");
                }
                let (m, se) = mean_se(&vals);
                let _ = write!(out, ",{m},{se}");
            }
            out.push('\n');
        }
        final_returns = logs.iter().filter_map(TrainLog::final_return).collect();
    }
    let series = dir.join("series.csv");
    fs::write(&series, out)?;
    let stats = (!final_returns.is_empty()).then(|| mean_se(&final_returns));
    let summary = ReportSummary {
        dir: dir.to_path_buf(),
        method,
        seeds: ids,
        final_returns,
        final_return_mean: stats.map(|s| s.0),
        final_return_se: stats.map(|s| s.1),
        files: vec![series, dir.join("summary.json")],
    };
    write_summary(&summary)?;
    Ok(summary)
}

/// Writes `series.csv` and `summary.json` for a run, multi-seed or
/// collection directory, returning one summary per reported run group.
pub fn report(dir: &Path) -> Result<Vec<ReportSummary>> {
    if !dir.is_dir() {
        return Err(invalid(format!("{} is not a directory", dir.display())));
    }
    if dir.join("manifest.json").is_file() {
        return Ok(vec![single(dir)?]);
    }
    let seeds = seed_dirs(dir)?;
    if !seeds.is_empty() {
        return Ok(vec![multi(dir, &seeds)?]);
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    children.sort();
    let mut all = Vec::new();
    for child in children {
        if child.join("manifest.json").is_file() || !seed_dirs(&child)?.is_empty() {
            all.extend(report(&child)?);
        }
    }
    if all.is_empty() {
        return Err(missing(&dir.join("manifest.json")));
    }
    Ok(all)
}
