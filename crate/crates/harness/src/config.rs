//! Flat `key = value` experiment configuration.
//!
//! Resolution order is defaults for the experiment kind, then the config
//! file, then command-line flags and `--override` pairs. Lists are
//! comma-separated. `#` starts a comment. Every key is documented in
//! [`KEYS`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use kem_core::etf::ScaleConvention;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "noise-toy")]
    NoiseToy,
    #[serde(rename = "imbalance")]
    Imbalance,
    #[serde(rename = "cost-sweep")]
    CostSweep,
    #[serde(rename = "grid-L")]
    GridL,
    #[serde(rename = "grid-K")]
    GridK,
    #[serde(rename = "gradcheck")]
    Gradcheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::NoiseToy => "noise-toy",
            ExperimentKind::Imbalance => "imbalance",
            ExperimentKind::CostSweep => "cost-sweep",
            ExperimentKind::GridL => "grid-L",
            ExperimentKind::GridK => "grid-K",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "noise-toy" => ExperimentKind::NoiseToy,
            "imbalance" => ExperimentKind::Imbalance,
            "cost-sweep" => ExperimentKind::CostSweep,
            "grid-L" => ExperimentKind::GridL,
            "grid-K" => ExperimentKind::GridK,
            "gradcheck" => ExperimentKind::Gradcheck,
            _ => return Err("expected noise-toy, imbalance, cost-sweep, grid-L, grid-K or gradcheck".into()),
        })
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    CrossAttention,
    Kem,
    Skem,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::CrossAttention => "cross-attention",
            Mechanism::Kem => "kem",
            Mechanism::Skem => "skem",
        }
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "cross-attention" => Mechanism::CrossAttention,
            "kem" => Mechanism::Kem,
            "skem" => Mechanism::Skem,
            _ => return Err("expected cross-attention, kem or skem".into()),
        })
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Column that ranks grid cells; ties keep grid order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridMetric {
    #[serde(rename = "delta_m")]
    DeltaM,
    #[serde(rename = "task1")]
    Task1,
    #[serde(rename = "task2")]
    Task2,
}

impl GridMetric {
    pub fn name(self) -> &'static str {
        match self {
            GridMetric::DeltaM => "delta_m",
            GridMetric::Task1 => "task1",
            GridMetric::Task2 => "task2",
        }
    }
}

impl FromStr for GridMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "delta_m" => GridMetric::DeltaM,
            "task1" => GridMetric::Task1,
            "task2" => GridMetric::Task2,
            _ => return Err("expected delta_m, task1 or task2".into()),
        })
    }
}

/// Every documented key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "kind",
        "noise-toy | imbalance | cost-sweep | grid-L | grid-K | gradcheck",
    ),
    ("mechanism", "cross-attention | kem | skem"),
    ("seed", "base seed; grid cell i uses seed + i"),
    ("n_tasks", "number of task blocks (noise-toy requires 3)"),
    ("m", "tokens per task block"),
    ("d", "token width"),
    ("L", "memory slots"),
    ("top_k", "tokens kept per slot in the retrieve step"),
    ("residual_weight", "broadcast weight w_r"),
    ("etf_convention", "sqrt | linear"),
    ("etf_seed", "seed of the ETF basis"),
    ("layers", "stacked attention layers"),
    ("steps", "optimizer steps"),
    ("batch_size", "samples per step"),
    ("lr", "peak learning rate"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("eps", "AdamW epsilon"),
    ("lr_power", "polynomial schedule power"),
    ("train_count", "training samples"),
    ("test_count", "evaluation samples"),
    ("imbalance_exponent", "power-law exponent of the long-tailed split"),
    ("degenerate", "constant-answer sanity dataset (true/false)"),
    ("grid_values", "comma-separated values for grid-L / grid-K"),
    (
        "grid_experiment",
        "experiment run in each grid cell: imbalance | noise-toy",
    ),
    (
        "grid_metric",
        "grid ranking column: delta_m | task1 | task2 (all higher-better)",
    ),
    ("sweep_n_s", "cost sweep token counts"),
    ("sweep_d", "cost sweep widths"),
    ("sweep_L", "cost sweep slot counts"),
    ("gradcheck_seeds", "seeds per gradient-check case"),
    ("log_every", "steps between recorded training losses"),
];

/// Effective configuration of one run. Serializes with the documented key
/// names, so the report echo doubles as a reusable config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub mechanism: Mechanism,
    pub seed: u64,
    pub n_tasks: usize,
    pub m: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub slots: usize,
    pub top_k: usize,
    pub residual_weight: f64,
    pub etf_convention: ScaleConvention,
    pub etf_seed: u64,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_power: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub imbalance_exponent: f64,
    pub degenerate: bool,
    pub grid_values: Vec<usize>,
    pub grid_experiment: ExperimentKind,
    pub grid_metric: GridMetric,
    pub sweep_n_s: Vec<usize>,
    pub sweep_d: Vec<usize>,
    #[serde(rename = "sweep_L")]
    pub sweep_slots: Vec<usize>,
    pub gradcheck_seeds: usize,
    pub log_every: usize,
}

impl ExperimentConfig {
    /// Shipped defaults for `kind`. Slot count 20 and top-k 3 are the
    /// reference settings; the noise toy uses fewer slots so that
    /// `n_s > d > L` holds at its small width.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            kind,
            mechanism: Mechanism::Kem,
            seed: 0,
            n_tasks: 2,
            m: 16,
            d: 24,
            slots: 20,
            top_k: 3,
            residual_weight: 1.0,
            etf_convention: ScaleConvention::Sqrt,
            etf_seed: 0,
            layers: 1,
            steps: 4000,
            batch_size: 64,
            lr: 5e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_power: 0.9,
            train_count: 1_000_000,
            test_count: 3000,
            imbalance_exponent: 2.0,
            degenerate: false,
            grid_values: vec![5, 10, 20],
            grid_experiment: ExperimentKind::Imbalance,
            grid_metric: GridMetric::DeltaM,
            sweep_n_s: vec![8, 64, 256, 1024],
            sweep_d: vec![4, 16, 64],
            sweep_slots: vec![2, 8, 16],
            gradcheck_seeds: 3,
            log_every: 100,
        };
        match kind {
            ExperimentKind::NoiseToy => ExperimentConfig {
                mechanism: Mechanism::CrossAttention,
                n_tasks: 3,
                m: 8,
                d: 16,
                slots: 4,
                layers: 2,
                steps: 600,
                batch_size: 32,
                lr: 3e-3,
                train_count: 4096,
                test_count: 512,
                ..base
            },
            ExperimentKind::GridK => ExperimentConfig {
                grid_values: vec![1, 2, 3, 4, 5, 6],
                ..base
            },
            _ => base,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let bad = |reason: String| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            reason,
        };
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        fn list(v: &str) -> Result<Vec<usize>, String> {
            v.split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
                .collect()
        }
        match key {
            "kind" => self.kind = v.parse().map_err(bad)?,
            "mechanism" => self.mechanism = v.parse().map_err(bad)?,
            "seed" => self.seed = num(v).map_err(bad)?,
            "n_tasks" => self.n_tasks = num(v).map_err(bad)?,
            "m" => self.m = num(v).map_err(bad)?,
            "d" => self.d = num(v).map_err(bad)?,
            "L" => self.slots = num(v).map_err(bad)?,
            "top_k" => self.top_k = num(v).map_err(bad)?,
            "residual_weight" => self.residual_weight = num(v).map_err(bad)?,
            "etf_convention" => self.etf_convention = v.parse().map_err(|e: kem_core::Error| bad(e.to_string()))?,
            "etf_seed" => self.etf_seed = num(v).map_err(bad)?,
            "layers" => self.layers = num(v).map_err(bad)?,
            "steps" => self.steps = num(v).map_err(bad)?,
            "batch_size" => self.batch_size = num(v).map_err(bad)?,
            "lr" => self.lr = num(v).map_err(bad)?,
            "weight_decay" => self.weight_decay = num(v).map_err(bad)?,
            "beta1" => self.beta1 = num(v).map_err(bad)?,
            "beta2" => self.beta2 = num(v).map_err(bad)?,
            "eps" => self.eps = num(v).map_err(bad)?,
            "lr_power" => self.lr_power = num(v).map_err(bad)?,
            "train_count" => self.train_count = num(v).map_err(bad)?,
            "test_count" => self.test_count = num(v).map_err(bad)?,
            "imbalance_exponent" => self.imbalance_exponent = num(v).map_err(bad)?,
            "degenerate" => self.degenerate = num(v).map_err(bad)?,
            "grid_values" => self.grid_values = list(v).map_err(bad)?,
            "grid_experiment" => self.grid_experiment = v.parse().map_err(bad)?,
            "grid_metric" => self.grid_metric = v.parse().map_err(bad)?,
            "sweep_n_s" => self.sweep_n_s = list(v).map_err(bad)?,
            "sweep_d" => self.sweep_d = list(v).map_err(bad)?,
            "sweep_L" => self.sweep_slots = list(v).map_err(bad)?,
            "gradcheck_seeds" => self.gradcheck_seeds = num(v).map_err(bad)?,
            "log_every" => self.log_every = num(v).map_err(bad)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Builds the effective config: kind defaults, then `file_pairs`, then
    /// `overrides`. The kind itself is taken from the highest-precedence
    /// source that names it.
    pub fn resolve(file_pairs: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let kind = overrides
            .iter()
            .rev()
            .chain(file_pairs.iter().rev())
            .find(|(k, _)| k == "kind")
            .map(|(_, v)| {
                v.trim()
                    .parse::<ExperimentKind>()
                    .map_err(|reason| ConfigError::BadValue {
                        key: "kind".into(),
                        value: v.clone(),
                        reason,
                    })
            })
            .transpose()?
            .unwrap_or(ExperimentKind::NoiseToy);
        let mut cfg = Self::defaults(kind);
        for (k, v) in file_pairs.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        let n_s = self.n_tasks * self.m;
        match self.kind {
            ExperimentKind::NoiseToy if self.n_tasks != 3 => {
                return fail(format!("noise-toy needs n_tasks = 3, got {}", self.n_tasks))
            }
            ExperimentKind::Imbalance if self.mechanism == Mechanism::CrossAttention => {
                return fail("imbalance compares kem and skem; cross-attention is not supported".into())
            }
            ExperimentKind::GridL | ExperimentKind::GridK => {
                if self.grid_values.is_empty() {
                    return fail("grid_values is empty".into());
                }
                if !matches!(
                    self.grid_experiment,
                    ExperimentKind::Imbalance | ExperimentKind::NoiseToy
                ) {
                    return fail("grid_experiment must be imbalance or noise-toy".into());
                }
                if self.grid_values.contains(&0) {
                    return fail("grid values must be positive".into());
                }
                if self.mechanism == Mechanism::CrossAttention {
                    return fail("grids over L and top_k need mechanism kem or skem".into());
                }
            }
            ExperimentKind::CostSweep => {
                if self.sweep_n_s.is_empty() || self.sweep_d.is_empty() || self.sweep_slots.is_empty() {
                    return fail("cost sweep lists must be non-empty".into());
                }
                if [&self.sweep_n_s, &self.sweep_d, &self.sweep_slots]
                    .iter()
                    .any(|l| l.contains(&0))
                {
                    return fail("cost sweep values must be positive".into());
                }
            }
            _ => {}
        }
        if self.n_tasks == 0 || self.m == 0 || self.d == 0 || self.slots == 0 || self.layers == 0 {
            return fail("n_tasks, m, d, L and layers must be positive".into());
        }
        if self.top_k == 0 || self.top_k > n_s {
            return fail(format!("top_k must be in 1..={n_s} (n_tasks·m), got {}", self.top_k));
        }
        if self.mechanism == Mechanism::Skem && (self.n_tasks < 2 || self.d < self.n_tasks) {
            return fail(format!(
                "skem needs an ETF over n_tasks >= 2 directions in d >= n_tasks dimensions (n_tasks {}, d {})",
                self.n_tasks, self.d
            ));
        }
        if self.batch_size == 0 || self.train_count == 0 || self.test_count == 0 {
            return fail("batch_size, train_count and test_count must be positive".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return fail("lr and weight_decay must be non-negative, eps positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }

    /// Key-value echo of every field, defaults included.
    pub fn echo(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(map) => map.into_iter().collect(),
            _ => unreachable!("config is a struct"),
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON echo.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.echo()).expect("echo serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    /// Flat file form of the effective config.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.echo() {
            let text = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {text}\n"));
        }
        out
    }
}

/// Parses `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pairs(&text)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
        line: 0,
        text: s.to_string(),
    })?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn precedence_is_flags_over_file_over_defaults() {
        let file = pairs(&[("kind", "imbalance"), ("seed", "4"), ("L", "10")]);
        let flags = pairs(&[("seed", "9")]);
        let c = ExperimentConfig::resolve(&file, &flags).unwrap();
        assert_eq!(c.kind, ExperimentKind::Imbalance);
        assert_eq!((c.seed, c.slots), (9, 10));
        assert_eq!(c.top_k, 3);
    }

    #[test]
    fn kind_defaults_apply_before_file_values() {
        let c = ExperimentConfig::resolve(&pairs(&[("d", "32")]), &pairs(&[("kind", "noise-toy")])).unwrap();
        assert_eq!((c.n_tasks, c.d, c.mechanism), (3, 32, Mechanism::CrossAttention));
    }

    #[test]
    fn every_documented_key_is_settable_and_echoed() {
        let c = ExperimentConfig::defaults(ExperimentKind::Imbalance);
        let echo = c.echo();
        for (key, _) in KEYS {
            assert!(echo.contains_key(*key), "{key} missing from echo");
        }
        assert_eq!(echo.len(), KEYS.len());
        let back = ExperimentConfig::resolve(&parse_pairs(&c.to_file_text()).unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_are_reported() {
        assert!(matches!(
            ExperimentConfig::resolve(&pairs(&[("bogus", "1")]), &[]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::resolve(&pairs(&[("seed", "x")]), &[]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::resolve(&pairs(&[("n_tasks", "2")]), &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::resolve(&pairs(&[("kind", "grid-L"), ("grid_values", "")]), &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_pairs("seed 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let p = parse_pairs("# header\n\nseed = 3 # trailing\nL=5\n").unwrap();
        assert_eq!(p, pairs(&[("seed", "3"), ("L", "5")]));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::defaults(ExperimentKind::NoiseToy);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn shipped_defaults_are_in_regime() {
        for kind in [ExperimentKind::NoiseToy, ExperimentKind::Imbalance] {
            let c = ExperimentConfig::defaults(kind);
            let n_s = c.n_tasks * c.m;
            assert!(
                n_s > c.d && c.d > c.slots,
                "{kind}: n_s {n_s}, d {}, L {}",
                c.d,
                c.slots
            );
        }
        let c = ExperimentConfig::defaults(ExperimentKind::Imbalance);
        assert_eq!((c.slots, c.top_k), (20, 3));
    }
}
