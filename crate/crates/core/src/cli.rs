//! Subcommand implementations behind the `zorba` binary.
//!
//! Each command reads a config, does its work and writes files into an
//! output directory from a single thread, in a fixed order.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::allocator::{AllocationSummary, EpsilonSample, SelectionPolicy};
use crate::config::{ExperimentConfig, SeedConfig};
use crate::error::{Error, Result};
use crate::experiment::{allocate, rounds_to_target, run_experiment, MetricsRow};
use crate::federation::Scheme;
use crate::metrics::BlockActivationMatrix;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a config (or the defaults) and applies `--seed-override`.
pub fn load_config(path: Option<&Path>, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.seeds = SeedConfig::from_override(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Hash of the canonical JSON form of a config.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

/// Contents of `allocation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub policy: SelectionPolicy,
    pub epsilon: EpsilonSample,
    pub rows: Vec<String>,
    #[serde(flatten)]
    pub summary: AllocationSummary,
}

#[derive(Debug, Serialize)]
struct ParetoRow {
    sample: usize,
    tau: f64,
    feasible: bool,
    gamma: Option<usize>,
    vram_total: Option<f64>,
    lambda: Option<f64>,
    on_front: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocateReport {
    pub samples: usize,
    pub skipped: usize,
    pub front_size: usize,
    pub chosen: AllocationFile,
}

/// Sweep, select, and write `pareto.csv` plus `allocation.json`.
///
/// `pareto.csv` lists feasible samples by ascending VRAM (ties by Λ), then
/// the infeasible ones; `on_front` flags the non-dominated rows.
pub fn cmd_allocate(cfg: &ExperimentConfig, out: &Path) -> Result<AllocateReport> {
    create_dir(out)?;
    let (sweep, chosen) = allocate(cfg)?;
    let mut rows: Vec<ParetoRow> = sweep
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ParetoRow {
            sample: i,
            tau: s.tau.iter().sum::<f64>() / s.tau.len() as f64,
            feasible: s.point.is_some(),
            gamma: s.point.as_ref().map(|p| p.gamma),
            vram_total: s.point.as_ref().map(|p| p.vram_total),
            lambda: s.point.as_ref().map(|p| p.lambda),
            on_front: s.on_front,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.feasible
            .cmp(&a.feasible)
            .then(a.vram_total.unwrap_or(0.0).total_cmp(&b.vram_total.unwrap_or(0.0)))
            .then(a.lambda.unwrap_or(0.0).total_cmp(&b.lambda.unwrap_or(0.0)))
            .then(a.sample.cmp(&b.sample))
    });
    let path = out.join("pareto.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let model = cfg.build_model()?;
    let psi_md = cfg.vram.psi_md.unwrap_or(model.dim() as f64);
    let file = AllocationFile {
        policy: cfg.allocator.policy,
        epsilon: chosen.epsilon.clone(),
        rows: chosen.matrix.to_row_strings(),
        summary: AllocationSummary::from_point(&chosen, &cfg.arch(), psi_md)?,
    };
    write_json(&out.join("allocation.json"), &file)?;
    Ok(AllocateReport {
        samples: sweep.samples.len(),
        skipped: sweep.skipped(),
        front_size: sweep.front.len(),
        chosen: file,
    })
}

/// Everything needed to rerun a training command bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub scheme: Scheme,
    pub config_sha256: String,
    pub seeds: SeedConfig,
    pub activation: Vec<String>,
    pub metrics_sha256: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rounds: usize,
    pub manifest: Manifest,
    pub last: MetricsRow,
}

fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Internal(format!("csv buffer: {e}")))
}

/// Runs an experiment; writes `metrics.csv`, `manifest.json` and, if
/// enabled, `trace.jsonl`. Baselines ignore `allocation`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    allocation: Option<&Path>,
    out: &Path,
) -> Result<TrainReport> {
    let provided = match (cfg.scheme, allocation) {
        (Scheme::Zorba, Some(path)) => {
            let file: AllocationFile = read_json(path)?;
            Some(BlockActivationMatrix::parse_rows(&file.rows)?)
        }
        _ => None,
    };
    train_with(cfg, provided, out)
}

fn train_with(
    cfg: &ExperimentConfig,
    activation: Option<BlockActivationMatrix>,
    out: &Path,
) -> Result<TrainReport> {
    create_dir(out)?;
    let output = run_experiment(cfg, activation)?;
    let csv_bytes = metrics_csv(&output.rows)?;
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, &csv_bytes).map_err(|e| Error::io(&metrics_path, e))?;
    if cfg.trace {
        let path = out.join("trace.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &output.trace {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scheme: cfg.scheme,
        config_sha256: config_hash(cfg)?,
        seeds: cfg.seeds,
        activation: output.activation.to_row_strings(),
        metrics_sha256: sha256_hex(&csv_bytes),
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(TrainReport {
        rounds: output.rows.len(),
        last: output.rows.last().cloned().expect("at least one round"),
        manifest,
    })
}

/// Reruns a manifest into `out` and checks the metrics hash.
pub fn cmd_replay(manifest_path: &Path, out: &Path) -> Result<TrainReport> {
    let manifest: Manifest = read_json(manifest_path)?;
    if config_hash(&manifest.config)? != manifest.config_sha256 {
        return Err(Error::invalid("manifest config does not match its recorded hash"));
    }
    let a = BlockActivationMatrix::parse_rows(&manifest.activation)?;
    let report = train_with(&manifest.config, Some(a), out)?;
    if report.manifest.metrics_sha256 != manifest.metrics_sha256 {
        return Err(Error::Internal(format!(
            "replayed metrics hash {} differs from recorded {}",
            report.manifest.metrics_sha256, manifest.metrics_sha256
        )));
    }
    Ok(report)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOptions {
    pub target: Option<f64>,
    pub lower_is_better: bool,
    pub pareto: Vec<PathBuf>,
}

#[derive(Debug, Deserialize, Serialize)]
struct FrontRow {
    vram_total: Option<f64>,
    lambda: Option<f64>,
    on_front: bool,
}

/// Aggregates metrics files into `summary.json`, `rounds_to_target.csv`,
/// `comm.csv` and, given Pareto files, `front.csv`.
pub fn cmd_report(metrics: &[PathBuf], opts: &ReportOptions, out: &Path) -> Result<Value> {
    if metrics.is_empty() {
        return Err(Error::invalid("report needs at least one metrics file"));
    }
    create_dir(out)?;
    let mut runs = Vec::new();
    let mut rtt = csv::Writer::from_path(out.join("rounds_to_target.csv"))?;
    rtt.write_record(["file", "scheme", "target", "rounds_to_target"])?;
    let mut comm = csv::Writer::from_path(out.join("comm.csv"))?;
    comm.write_record(["file", "scheme", "rounds", "comm_up_scalars", "comm_down_scalars", "vram_total", "lambda"])?;

    for path in metrics {
        let rows = read_metrics(path)?;
        let last = rows.last().expect("non-empty");
        let reached = opts
            .target
            .and_then(|t| rounds_to_target(&rows, t, opts.lower_is_better));
        let reached_json = match (opts.target, reached) {
            (None, _) => Value::Null,
            (Some(_), Some(r)) => json!(r),
            (Some(_), None) => json!("not reached"),
        };
        let name = path.display().to_string();
        rtt.write_record([
            name.clone(),
            last.scheme.to_string(),
            opts.target.map(|t| t.to_string()).unwrap_or_default(),
            match reached {
                Some(r) => r.to_string(),
                None if opts.target.is_some() => "not reached".into(),
                None => String::new(),
            },
        ])?;
        comm.write_record([
            name.clone(),
            last.scheme.to_string(),
            last.round.to_string(),
            last.comm_up_scalars.to_string(),
            last.comm_down_scalars.to_string(),
            last.vram_total.to_string(),
            last.lambda.to_string(),
        ])?;
        let final_eval = rows.iter().rev().find_map(|r| r.eval_metric);
        runs.push(json!({
            "file": name,
            "scheme": last.scheme,
            "rounds": last.round,
            "final_train_loss": last.train_loss,
            "final_eval_metric": final_eval,
            "rounds_to_target": reached_json,
            "comm_up_scalars": last.comm_up_scalars,
            "comm_down_scalars": last.comm_down_scalars,
            "vram_total": last.vram_total,
            "lambda": last.lambda,
        }));
    }
    rtt.flush().map_err(|e| Error::io(out, e))?;
    comm.flush().map_err(|e| Error::io(out, e))?;

    let mut reductions = Vec::new();
    for z in runs.iter().filter(|r| r["scheme"] == "zorba") {
        for b in runs.iter().filter(|r| r["scheme"] != "zorba") {
            let zt = z["vram_total"].as_f64().unwrap_or(f64::NAN);
            let bt = b["vram_total"].as_f64().unwrap_or(f64::NAN);
            reductions.push(json!({
                "zorba": z["file"],
                "baseline": b["file"],
                "baseline_scheme": b["scheme"],
                "vram_reduction_pct": 100.0 * (1.0 - zt / bt),
            }));
        }
    }

    let mut front_points = Vec::new();
    if !opts.pareto.is_empty() {
        let mut w = csv::Writer::from_path(out.join("front.csv"))?;
        w.write_record(["file", "vram_total", "lambda"])?;
        for path in &opts.pareto {
            let mut r = csv::Reader::from_path(path)?;
            for row in r.deserialize::<FrontRow>() {
                let row = row?;
                if let (true, Some(v), Some(l)) = (row.on_front, row.vram_total, row.lambda) {
                    w.write_record([path.display().to_string(), v.to_string(), l.to_string()])?;
                    front_points.push(json!({ "file": path.display().to_string(), "vram_total": v, "lambda": l }));
                }
            }
        }
        w.flush().map_err(|e| Error::io(out, e))?;
    }

    let mut by_scheme: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for r in &runs {
        by_scheme
            .entry(r["scheme"].as_str().unwrap_or_default().to_string())
            .or_default()
            .push(r["rounds_to_target"].clone());
    }
    let summary = json!({
        "target": opts.target,
        "lower_is_better": opts.lower_is_better,
        "runs": runs,
        "rounds_to_target_by_scheme": by_scheme,
        "vram_reduction": reductions,
        "front": front_points,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn cfg(scheme: Scheme) -> ExperimentConfig {
        ExperimentConfig {
            scheme,
            model: ModelConfig::Quadratic {
                blocks: 3,
                block_dim: 2,
                target_spread: 1.0,
                noise_sigma: 0.0,
            },
            clients: 4,
            rounds: 6,
            q: 2,
            pool_size: 16,
            eta: 0.2,
            sweep_samples: 20,
            eval_interval: 2,
            vram: crate::config::VramConfig {
                block_capacities: Some(vec![1, 2, 3, 1]),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn allocate_then_train_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Scheme::Zorba);
        let alloc = cmd_allocate(&c, dir.path()).unwrap();
        assert!(alloc.front_size >= 1);
        let alloc_path = dir.path().join("allocation.json");
        let report = cmd_train(&c, Some(&alloc_path), &dir.path().join("run")).unwrap();
        assert_eq!(report.rounds, 6);
        assert_eq!(report.manifest.activation, alloc.chosen.rows);
        let replay = cmd_replay(&dir.path().join("run/manifest.json"), &dir.path().join("again")).unwrap();
        assert_eq!(replay.manifest.metrics_sha256, report.manifest.metrics_sha256);
        let a = fs::read(dir.path().join("run/metrics.csv")).unwrap();
        let b = fs::read(dir.path().join("again/metrics.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_compares_schemes() {
        let dir = tempfile::tempdir().unwrap();
        cmd_train(&cfg(Scheme::Zorba), None, &dir.path().join("z")).unwrap();
        cmd_train(&cfg(Scheme::Decomfl), None, &dir.path().join("d")).unwrap();
        let opts = ReportOptions {
            target: Some(1e-30),
            lower_is_better: true,
            pareto: vec![],
        };
        let files = vec![dir.path().join("z/metrics.csv"), dir.path().join("d/metrics.csv")];
        let summary = cmd_report(&files, &opts, &dir.path().join("rep")).unwrap();
        assert_eq!(summary["runs"][0]["rounds_to_target"], "not reached");
        let pct = summary["vram_reduction"][0]["vram_reduction_pct"].as_f64().unwrap();
        assert!(pct > 0.0);
        assert!(cmd_report(&[], &opts, dir.path()).is_err());
    }
}
