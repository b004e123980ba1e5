//! Grid searches over the slot count (`grid-L`) or top-k (`grid-K`).
//!
//! Each cell trains the configured mechanism on both tasks of the chosen
//! experiment and scores it by per-task accuracy and by Δm against
//! single-task baselines. The baselines are the same network trained on one
//! task's loss at the base seed with the base `L` and `top_k`, so they are
//! shared by all cells.

use std::time::Instant;

use kem_core::metrics::{delta_m, TaskScore};

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind, GridMetric};
use crate::error::Result;
use crate::report::RunReport;
use crate::{imbalance, noise_toy};

pub const GRID_FILE: &str = "grid.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub value: usize,
    pub seed: u64,
    pub task_accuracy: [f64; 2],
    pub delta_m: f64,
    /// 1 is best.
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub summary: RunReport,
    pub cells: Vec<RunReport>,
    pub rows: Vec<GridRow>,
    pub baseline_accuracy: [f64; 2],
}

impl GridOutcome {
    pub fn best(&self) -> &GridRow {
        self.rows.iter().find(|r| r.rank == 1).expect("grids are non-empty")
    }
}

/// Column names for the two tasks of a grid experiment.
pub fn task_names(experiment: ExperimentKind) -> [&'static str; 2] {
    match experiment {
        ExperimentKind::Imbalance => imbalance::TASK_NAMES,
        _ => ["task1", "task2"],
    }
}

pub fn csv_header(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::GridK => "K,task1_accuracy,task2_accuracy,delta_m,seed,rank",
        _ => "L,task1_accuracy,task2_accuracy,delta_m,seed,rank",
    }
}

pub fn grid_csv(kind: ExperimentKind, rows: &[GridRow]) -> String {
    let mut s = String::from(csv_header(kind));
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value, r.task_accuracy[0], r.task_accuracy[1], r.delta_m, r.seed, r.rank
        ));
    }
    s
}

/// Trains on the experiment's training split with the given task weights and
/// returns the per-task test accuracies.
pub fn train_eval(cfg: &ExperimentConfig, task_weights: [f64; 2]) -> Result<[f64; 2]> {
    match cfg.kind {
        ExperimentKind::Imbalance => {
            let train = imbalance::train_set(cfg, false)?;
            let test = imbalance::test_set(cfg)?;
            let (model, _) = imbalance::train_clevr(cfg, &train, task_weights)?;
            let acc = model.evaluate(&test)?.task_accuracy;
            match acc {
                [Some(a), Some(b)] => Ok([a, b]),
                _ => Err(
                    ConfigError::Invalid("test split lacks one of the question groups; raise test_count".into()).into(),
                ),
            }
        }
        ExperimentKind::NoiseToy => {
            let (train, test) = noise_toy::datasets(cfg)?;
            let (model, _) = noise_toy::train_model(cfg, &train, task_weights)?;
            Ok(model.evaluate(&test)?.accuracy)
        }
        other => Err(ConfigError::Invalid(format!("grid cells cannot run {other}")).into()),
    }
}

/// Config of cell `index`: the grid config with the experiment kind, the
/// grid value and seed `base + index` substituted.
pub fn cell_config(cfg: &ExperimentConfig, index: usize) -> Result<ExperimentConfig> {
    let mut cell = cfg.clone();
    cell.kind = cfg.grid_experiment;
    cell.seed = cfg.seed + index as u64;
    let value = cfg.grid_values[index];
    match cfg.kind {
        ExperimentKind::GridL => cell.slots = value,
        ExperimentKind::GridK => cell.top_k = value,
        other => return Err(kem_core::Error::Contract(format!("cell_config called with kind {other}")).into()),
    }
    cell.validate()?;
    Ok(cell)
}

fn rank(rows: &mut [GridRow], metric: GridMetric) {
    let key = |r: &GridRow| match metric {
        GridMetric::DeltaM => r.delta_m,
        GridMetric::Task1 => r.task_accuracy[0],
        GridMetric::Task2 => r.task_accuracy[1],
    };
    let mut order: Vec<usize> = (0..rows.len()).collect();
    // Stable sort keeps grid order among equal scores.
    order.sort_by(|&a, &b| key(&rows[b]).total_cmp(&key(&rows[a])));
    for (r, i) in order.into_iter().enumerate() {
        rows[i].rank = r + 1;
    }
}

pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    if !matches!(cfg.kind, ExperimentKind::GridL | ExperimentKind::GridK) {
        return Err(kem_core::Error::Contract(format!("run_grid called with kind {}", cfg.kind)).into());
    }
    cfg.validate()?;
    let start = Instant::now();
    let cells_cfg = (0..cfg.grid_values.len())
        .map(|i| cell_config(cfg, i))
        .collect::<Result<Vec<_>>>()?;

    let mut base = cfg.clone();
    base.kind = cfg.grid_experiment;
    base.validate()?;
    let baseline_accuracy = [train_eval(&base, [1.0, 0.0])?[0], train_eval(&base, [0.0, 1.0])?[1]];
    let stl = baseline_accuracy.map(TaskScore::higher);

    let names = task_names(cfg.grid_experiment);
    let mut cells = Vec::with_capacity(cells_cfg.len());
    let mut rows = Vec::with_capacity(cells_cfg.len());
    for (i, cell) in cells_cfg.iter().enumerate() {
        let t0 = Instant::now();
        let acc = train_eval(cell, [1.0, 1.0])?;
        let dm = delta_m(&acc.map(TaskScore::higher), &stl)?;
        let mut report = RunReport::new(cell);
        for t in 0..2 {
            report.push_metric("accuracy", names[t], acc[t]);
            report.push_metric("stl_accuracy", names[t], baseline_accuracy[t]);
        }
        report.push_metric("delta_m", "all", dm);
        report.wall_clock_secs = t0.elapsed().as_secs_f64();
        cells.push(report);
        rows.push(GridRow {
            value: cfg.grid_values[i],
            seed: cell.seed,
            task_accuracy: acc,
            delta_m: dm,
            rank: 0,
        });
    }
    rank(&mut rows, cfg.grid_metric);

    let mut summary = RunReport::new(cfg);
    for r in &rows {
        let task = format!(
            "{}={}",
            if cfg.kind == ExperimentKind::GridK { "K" } else { "L" },
            r.value
        );
        summary.push_metric("delta_m", &task, r.delta_m);
        summary.push_metric("rank", &task, r.rank as f64);
    }
    let best = rows.iter().find(|r| r.rank == 1).expect("grids are non-empty");
    summary.push_metric("best_value", cfg.grid_metric.name(), best.value as f64);
    summary.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(GridOutcome {
        summary,
        cells,
        rows,
        baseline_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: usize, dm: f64) -> GridRow {
        GridRow {
            value,
            seed: 0,
            task_accuracy: [0.5, 0.5],
            delta_m: dm,
            rank: 0,
        }
    }

    #[test]
    fn ranking_is_descending_and_stable() {
        let mut rows = vec![row(5, 0.1), row(10, 0.3), row(20, 0.1)];
        rank(&mut rows, GridMetric::DeltaM);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [2, 1, 3]);
    }

    #[test]
    fn cell_seeds_follow_base_plus_index() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::GridK);
        cfg.seed = 7;
        let c = cell_config(&cfg, 4).unwrap();
        assert_eq!((c.seed, c.top_k, c.kind), (11, 5, ExperimentKind::Imbalance));
    }
}
