//! Cost sweep: symbolic counts against counts measured on an instrumented
//! graph, written as CSV.

use std::time::Instant;

use kem_core::cost::{cost_sweep, CostReport};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, Result};
use crate::report::RunReport;

pub const COST_FILE: &str = "cost.csv";

pub fn cost_csv(rows: &[CostReport]) -> String {
    let mut s = String::from(CostReport::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn run_cost_sweep(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<CostReport>)> {
    if cfg.kind != ExperimentKind::CostSweep {
        return Err(kem_core::Error::Contract(format!("run_cost_sweep called with kind {}", cfg.kind)).into());
    }
    let start = Instant::now();
    let rows = cost_sweep(&cfg.sweep_n_s, &cfg.sweep_d, &cfg.sweep_slots, cfg.top_k, cfg.seed)?;
    let mut report = RunReport::new(cfg);
    for r in &rows {
        let task = format!("n_s={},d={},L={}", r.config.n_s, r.config.d, r.config.slots);
        report.push_metric("ratio", &task, r.ratio);
        report.push_metric("counts_match", &task, r.matches() as u8 as f64);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((report, rows))
}

/// Measured counts must equal the formulas everywhere, and the bottleneck
/// must be cheaper on every in-regime row.
pub fn gate(rows: &[CostReport]) -> Result<()> {
    let mut bad = Vec::new();
    for r in rows {
        let c = r.config;
        if !r.matches() {
            bad.push(format!("counts differ at n_s={},d={},L={}", c.n_s, c.d, c.slots));
        }
        if r.in_regime && r.symbolic_kem.total() >= r.symbolic_cross.total() {
            bad.push(format!("no saving at n_s={},d={},L={}", c.n_s, c.d, c.slots));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Gate(bad.join("; ")))
    }
}
