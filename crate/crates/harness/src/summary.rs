//! Aggregation of finished runs for the `report` verb.

use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::report::{RunReport, REPORT_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "run,kind,mechanism,config_hash,metric,task,value";
pub const NC_FILE: &str = "table-nc.csv";
pub const NC_HEADER: &str = "mechanism,seed,balanced,imbalanced,drop";

/// Every `report.json` below `root`, sorted by path. Grid cell reports are
/// included.
pub fn find_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| HarnessError::io(dir.display().to_string(), e))?;
        for entry in entries {
            let path = entry
                .map_err(|e| HarnessError::io(dir.display().to_string(), e))?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == REPORT_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn run_name(root: &Path, report: &Path) -> String {
    let dir = report.parent().unwrap_or(report);
    dir.strip_prefix(root).unwrap_or(dir).display().to_string()
}

/// One row per metric record.
pub fn summary_csv(root: &Path, reports: &[(PathBuf, RunReport)]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for (path, r) in reports {
        for m in &r.metrics {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                run_name(root, path),
                r.kind,
                r.mechanism,
                r.config_hash,
                m.metric,
                m.task,
                m.value
            ));
        }
    }
    s
}

/// Balanced and long-tailed accuracy per imbalance run.
pub fn nc_csv(reports: &[(PathBuf, RunReport)]) -> String {
    let mut s = format!("{NC_HEADER}\n");
    for (_, r) in reports.iter().filter(|(_, r)| r.kind == "imbalance") {
        let (Some(b), Some(i)) = (r.metric("accuracy", "balanced"), r.metric("accuracy", "imbalanced")) else {
            continue;
        };
        let seed = r.config.get("seed").map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.mechanism, seed, b, i, b - i));
    }
    s
}

/// Reads every report under `root` and writes both CSVs into `out`.
pub fn summarize(root: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut reports = Vec::new();
    for path in find_reports(root)? {
        let r = RunReport::read(&path)?;
        reports.push((path, r));
    }
    let summary = out.join(SUMMARY_FILE);
    let nc = out.join(NC_FILE);
    crate::report::write_text(&summary, &summary_csv(root, &reports))?;
    crate::report::write_text(&nc, &nc_csv(&reports))?;
    Ok(vec![summary, nc])
}
