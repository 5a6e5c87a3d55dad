//! Aggregates finished runs into `summary.csv` and `summary.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{LabError, LabResult};

/// One metric row of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub kind: String,
    pub criterion: String,
    pub metric: String,
    pub value: String,
    pub threshold: String,
    pub pass: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<String>,
}

impl Report {
    pub fn csv(&self) -> String {
        let mut s = String::from("run,kind,criterion,metric,value,threshold,pass\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.run, r.kind, r.criterion, r.metric, r.value, r.threshold, r.pass);
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let checks: Vec<&ReportRow> = self.rows.iter().filter(|r| r.pass != "-").collect();
        let failed = checks.iter().filter(|r| r.pass == "fail").count();
        let _ = writeln!(s, "runs: {}", self.runs.len());
        let _ = writeln!(s, "checks: {} passed, {} failed", checks.len() - failed, failed);
        let mut criteria: Vec<&str> = checks.iter().map(|r| r.criterion.as_str()).filter(|c| *c != "-").collect();
        criteria.sort_by_key(|c| (c.len(), c.to_string()));
        criteria.dedup();
        for c in criteria {
            let rows: Vec<&&ReportRow> = checks.iter().filter(|r| r.criterion == c).collect();
            let ok = rows.iter().all(|r| r.pass == "pass");
            let _ = writeln!(s, "{c}: {} ({} checks)", if ok { "PASS" } else { "FAIL" }, rows.len());
        }
        for r in checks.iter().filter(|r| r.pass == "fail") {
            let _ = writeln!(s, "failed: {} {} = {} (need {})", r.run, r.metric, r.value, r.threshold);
        }
        s
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.pass == "fail").count()
    }
}

fn run_dirs(dir: &Path) -> LabResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(LabError::Io(format!("{} is not a directory", dir.display())));
    }
    if dir.join("manifest.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let (runs, others): (Vec<PathBuf>, Vec<PathBuf>) = dirs.into_iter().partition(|p| p.join("manifest.json").is_file());
    if let Some(bad) = others.first() {
        return Err(LabError::Validation(format!("{} has no manifest.json", bad.display())));
    }
    if runs.is_empty() {
        return Err(LabError::Validation(format!("no runs (manifest.json) under {}", dir.display())));
    }
    Ok(runs)
}

fn load_run(dir: &Path, label: &str) -> LabResult<Vec<ReportRow>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| LabError::Validation(format!("{}: corrupt manifest: {e}", path.display())))?;
    let kind = manifest
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| LabError::Validation(format!("{}: manifest has no kind", path.display())))?
        .to_string();
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("criterion,metric,value,threshold,pass") {
        return Err(LabError::Validation(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(LabError::Validation(format!("{}: malformed row {line:?}", path.display())));
            }
            Ok(ReportRow {
                run: label.to_string(),
                kind: kind.clone(),
                criterion: f[0].into(),
                metric: f[1].into(),
                value: f[2].into(),
                threshold: f[3].into(),
                pass: f[4].into(),
            })
        })
        .collect()
}

/// Reads every run under `dir` (the directory itself, or its immediate
/// subdirectories) without writing anything.
pub fn collect(dir: &Path) -> LabResult<Report> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for run in run_dirs(dir)? {
        let label = if run == dir {
            ".".to_string()
        } else {
            run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        };
        rows.extend(load_run(&run, &label)?);
        runs.push(label);
    }
    Ok(Report { rows, runs })
}

/// Collects the runs and writes `summary.csv` and `summary.txt` into `dir`.
pub fn report(dir: &Path) -> LabResult<Report> {
    let r = collect(dir)?;
    std::fs::write(dir.join("summary.csv"), r.csv())?;
    std::fs::write(dir.join("summary.txt"), r.text())?;
    Ok(r)
}
