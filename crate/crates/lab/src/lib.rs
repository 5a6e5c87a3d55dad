//! Experiment harness for the stochastic knapsack solvers: configuration
//! loading, the five experiment pipelines, run manifests and reports.

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

pub use config::{ExperimentConfig, Kind, Mode, Overrides, Resolved};
pub use error::{LabError, LabResult};
pub use experiments::{execute, Artifacts, Metric};

pub const TOOL: &str = "stochknap";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: PathBuf,
    pub kind: Kind,
    pub artifacts: Artifacts,
    pub seconds: f64,
}

impl RunOutcome {
    /// True when every metric with a verdict passed.
    pub fn all_passed(&self) -> bool {
        self.artifacts.metrics.iter().all(|m| m.pass != Some(false))
    }
}

/// Loads, overrides, validates and runs an experiment, then writes its
/// artifacts. Nothing is written unless the whole computation succeeds.
pub fn run(config: ExperimentConfig, overrides: &Overrides) -> LabResult<RunOutcome> {
    let mut config = config;
    config.apply(overrides)?;
    let resolved = config.resolve()?;
    let output = resolved
        .output
        .clone()
        .ok_or_else(|| LabError::Validation("no output directory (set `output` or pass --out)".into()))?;
    let start = Instant::now();
    let artifacts = execute(&resolved)?;
    let seconds = start.elapsed().as_secs_f64();
    write_run(&output, &resolved, &artifacts, seconds)?;
    Ok(RunOutcome { output, kind: resolved.kind, artifacts, seconds })
}

/// Deterministic manifest: identical inputs give identical bytes.
pub fn manifest_json(resolved: &Resolved, artifacts: &Artifacts) -> LabResult<String> {
    let config = serde_json::to_value(&resolved.config).map_err(|e| LabError::Io(e.to_string()))?;
    let seeds: serde_json::Map<String, serde_json::Value> =
        artifacts.seeds.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let mut outputs: Vec<serde_json::Value> = artifacts
        .files
        .iter()
        .map(|(name, bytes)| json!({ "file": name, "bytes": bytes.len() }))
        .collect();
    outputs.push(json!({ "file": "metrics.csv", "bytes": artifacts.metrics_csv().len() }));
    let doc = json!({
        "tool": TOOL,
        "version": VERSION,
        "kind": resolved.kind.name(),
        "seed": resolved.config.seed,
        "seeds": seeds,
        "config": config,
        "outputs": outputs,
        "notes": artifacts.notes,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| LabError::Io(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn write_run(dir: &Path, resolved: &Resolved, artifacts: &Artifacts, seconds: f64) -> LabResult<()> {
    let manifest = manifest_json(resolved, artifacts)?;
    let io = |p: &Path, e: std::io::Error| LabError::Io(format!("cannot write {}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, bytes) in &artifacts.files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| io(&p, e))?;
    }
    let p = dir.join("metrics.csv");
    std::fs::write(&p, artifacts.metrics_csv()).map_err(|e| io(&p, e))?;
    let runtime = json!({ "wall_seconds": seconds, "threads": rayon::current_num_threads() });
    let p = dir.join("runtime.json");
    std::fs::write(&p, format!("{runtime}\n")).map_err(|e| io(&p, e))?;
    let p = dir.join("manifest.json");
    std::fs::write(&p, manifest).map_err(|e| io(&p, e))?;
    Ok(())
}
