//! Run reports and their on-disk forms.
//!
//! `report.json` holds a [`RunReport`]; `metrics.json` holds the same run's
//! metrics as an array of `{metric, task, value, config_hash}` records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kem_core::metrics::MetricRecord;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::nn::LossPoint;

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Keys of a serialized [`RunReport`], in schema order.
pub const REPORT_KEYS: [&str; 9] = [
    "kind",
    "mechanism",
    "config_hash",
    "config",
    "design_defaults",
    "losses",
    "metrics",
    "wall_clock_secs",
    "artifacts",
];

pub const METRIC_KEYS: [&str; 4] = ["metric", "task", "value", "config_hash"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub points: Vec<LossPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub mechanism: String,
    pub config_hash: String,
    /// Every config key with its effective value.
    pub config: BTreeMap<String, serde_json::Value>,
    /// Fixed choices that are not config keys.
    pub design_defaults: BTreeMap<String, String>,
    pub losses: Vec<LossCurve>,
    pub metrics: Vec<MetricRecord>,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<String>,
}

pub fn design_defaults() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: &str| {
        m.insert(k.to_string(), v.to_string());
    };
    put("initialization", kem_core::init::INIT_DESCRIPTION);
    put(
        "rng",
        "ChaCha8 (rand_chacha) seeded with seed_from_u64; per-sample streams",
    );
    put("topk_tie_break", "lowest index wins among equal logits");
    put(
        "optimizer",
        "AdamW with decoupled weight decay, polynomial decay to zero at the last step",
    );
    put("task_weights", "static, all 1.0");
    put(
        "miou_empty_classes",
        "classes absent from both prediction and truth are excluded",
    );
    put(
        "cost_model",
        "one unit per matmul multiply and per softmax input entry; scaling, residual and ETF mixing uncounted",
    );
    put(
        "noise_toy",
        "task tokens = per-token linear embedding of z ~ N(0, I_8) plus N(0, 0.1^2); labels argmax z[0..=3], argmax z[3..=6]; task 3 i.i.d. N(0, 1)",
    );
    put(
        "noise_toy_model",
        "per-task linear encoders, stacked mechanism layers, mean-pooled linear heads for tasks 1 and 2",
    );
    put(
        "sort_of_clevr",
        "64x64 RGB, 6 objects of side 8 (square or circle), one per color, centers >= 12 px apart; 11-bit questions, 10 answers",
    );
    put("imbalance_axis", "queried color");
    put(
        "imbalance_model",
        "palette occupancy of 8x8 px blocks (8x8 grid); 3x3 conv (16 ch) over occupancy, pixel coordinates and question bits; conv outputs summed over sqrt(m) x sqrt(m) patches (m=16: 2x2 cells); patch linear + coordinate embedding, question gate, shared linear stem, per-task linear encoders, mechanism, per-task MLP heads",
    );
    put("imbalance_test_split", "balanced (uniform queried color)");
    m
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunReport {
            kind: cfg.kind.name().to_string(),
            mechanism: cfg.mechanism.name().to_string(),
            config_hash: cfg.hash(),
            config: cfg.echo(),
            design_defaults: design_defaults(),
            losses: Vec::new(),
            metrics: Vec::new(),
            wall_clock_secs: 0.0,
            artifacts: Vec::new(),
        }
    }

    pub fn push_metric(&mut self, metric: &str, task: &str, value: f64) {
        self.metrics.push(MetricRecord {
            metric: metric.to_string(),
            task: task.to_string(),
            value,
            config_hash: self.config_hash.clone(),
        });
    }

    pub fn metric(&self, metric: &str, task: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.metric == metric && r.task == task)
            .map(|r| r.value)
    }

    /// Writes `report.json` and `metrics.json` into `dir`, recording both as
    /// artifacts.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir.display().to_string(), e))?;
        let report = dir.join(REPORT_FILE);
        let metrics = dir.join(METRICS_FILE);
        for p in [&report, &metrics] {
            let s = p.display().to_string();
            if !self.artifacts.contains(&s) {
                self.artifacts.push(s);
            }
        }
        write_json(&metrics, &self.metrics)?;
        write_json(&report, self)?;
        Ok(report)
    }

    pub fn read(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path.display().to_string(), e))
}
