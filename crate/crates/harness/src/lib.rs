//! Experiment harness: configuration, the toy experiments, grid searches,
//! the cost sweep and the gradient suite, plus the on-disk report formats.

pub mod config;
pub mod error;
pub mod gradsuite;
pub mod grid;
pub mod imbalance;
pub mod nn;
pub mod noise_toy;
pub mod report;
pub mod summary;
pub mod sweep;

use std::path::{Path, PathBuf};

use config::{ExperimentConfig, ExperimentKind};
use error::Result;
use report::{write_json, write_text, RunReport};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "KEM_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const CONFIG_FILE: &str = "config.txt";

/// `<kind>-<mechanism>-<hash>` under `root`.
pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("{}-{}-{}", cfg.kind, cfg.mechanism, cfg.hash()))
}

/// Result of [`execute`]: the run's report and directory, plus a gate
/// failure if one occurred after the artifacts were written.
#[derive(Debug)]
pub struct Execution {
    pub report: RunReport,
    pub dir: PathBuf,
    pub gate: Result<()>,
}

/// Runs `cfg` and writes every artifact into `dir`.
pub fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<Execution> {
    cfg.validate()?;
    let config_path = dir.join(CONFIG_FILE);
    write_text(&config_path, &cfg.to_file_text())?;
    let mut extra = vec![config_path];
    let mut gate = Ok(());
    let mut report = match cfg.kind {
        ExperimentKind::NoiseToy => noise_toy::run_noise_toy(cfg)?,
        ExperimentKind::Imbalance => imbalance::run_imbalance(cfg)?,
        ExperimentKind::CostSweep => {
            let (report, rows) = sweep::run_cost_sweep(cfg)?;
            let path = dir.join(sweep::COST_FILE);
            write_text(&path, &sweep::cost_csv(&rows))?;
            extra.push(path);
            gate = sweep::gate(&rows);
            report
        }
        ExperimentKind::Gradcheck => {
            let (report, cases) = gradsuite::run_gradcheck(cfg)?;
            let path = dir.join("gradcheck.json");
            write_json(&path, &cases)?;
            extra.push(path);
            gate = gradsuite::gate(&cases);
            report
        }
        ExperimentKind::GridL | ExperimentKind::GridK => {
            let mut outcome = grid::run_grid(cfg)?;
            let path = dir.join(grid::GRID_FILE);
            write_text(&path, &grid::grid_csv(cfg.kind, &outcome.rows))?;
            extra.push(path);
            for (i, cell) in outcome.cells.iter_mut().enumerate() {
                extra.push(cell.write(&dir.join(format!("cell-{i}")))?);
            }
            outcome.summary
        }
    };
    report.artifacts.extend(extra.iter().map(|p| p.display().to_string()));
    report.write(dir)?;
    Ok(Execution {
        report,
        dir: dir.to_path_buf(),
        gate,
    })
}
