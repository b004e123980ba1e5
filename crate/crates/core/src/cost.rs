//! Multiply and softmax-entry accounting for attention variants.
//!
//! One unit per scalar multiply inside a matmul (`p·q·r` for a `p×q · q×r`
//! product) plus one unit per softmax input entry. Element-wise work such as
//! the `1/√d` scaling, the residual add and task-axis ETF mixing is not
//! counted. Under this model the closed forms are
//!
//! - cross-attention: `2·n_s²·d + 3·n_s·d²` multiplies, `n_s²` softmax entries
//! - bottleneck: `4·L·n_s·d + 3·n_s·d² + 3·L·d²` multiplies, `2·L·n_s` softmax entries

use std::ops::{Add, AddAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{BlockLayout, CrossAttentionParams, KemParams};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::slot_init;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub matmul_multiplies: u64,
    pub softmax_entries: u64,
}

impl CostModel {
    pub fn total(&self) -> u64 {
        self.matmul_multiplies + self.softmax_entries
    }
}

impl Add for CostModel {
    type Output = CostModel;

    fn add(self, rhs: CostModel) -> CostModel {
        CostModel {
            matmul_multiplies: self.matmul_multiplies + rhs.matmul_multiplies,
            softmax_entries: self.softmax_entries + rhs.softmax_entries,
        }
    }
}

impl AddAssign for CostModel {
    fn add_assign(&mut self, rhs: CostModel) {
        *self = *self + rhs;
    }
}

pub fn symbolic_cost_cross_attention(n_s: u64, d: u64) -> CostModel {
    CostModel {
        matmul_multiplies: 2 * n_s * n_s * d + 3 * n_s * d * d,
        softmax_entries: n_s * n_s,
    }
}

pub fn symbolic_cost_kem(n_s: u64, d: u64, slots: u64) -> CostModel {
    CostModel {
        matmul_multiplies: 4 * slots * n_s * d + 3 * n_s * d * d + 3 * slots * d * d,
        softmax_entries: 2 * slots * n_s,
    }
}

/// Counts recorded by an instrumented graph.
pub fn measure_counts<T: crate::Scalar>(graph: &Graph<T>) -> Result<CostModel> {
    graph.counts()
}

/// Runs cross-attention on random inputs in an instrumented graph.
pub fn measure_cross_attention(n_s: usize, d: usize, seed: u64) -> Result<CostModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CrossAttentionParams::<f64>::init(d, &mut rng);
    let mut g = Graph::instrumented();
    let vars = params.bind(&mut g, false);
    let f = g.constant(Tensor::randn(n_s, d, 1.0, &mut rng));
    vars.forward(&mut g, f)?;
    measure_counts(&g)
}

/// Runs the full bottleneck forward pass on random inputs in an instrumented
/// graph, treating all tokens as one task block.
pub fn measure_kem(n_s: usize, d: usize, slots: usize, top_k: usize, seed: u64) -> Result<CostModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = KemParams::<f64>::init(d, top_k, &mut rng);
    let mut g = Graph::instrumented();
    let vars = params.bind(&mut g, false);
    let f = g.constant(Tensor::randn(n_s, d, 1.0, &mut rng));
    let r = g.constant(slot_init(slots, d, &mut rng));
    let layout = BlockLayout {
        n_tasks: 1,
        tokens_per_task: n_s,
    };
    vars.forward(&mut g, f, layout, r, None)?;
    measure_counts(&g)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    pub n_s: usize,
    pub d: usize,
    pub slots: usize,
    pub top_k: usize,
}

impl CostConfig {
    /// The regime `n_s > d > L` in which the bottleneck is cheaper.
    pub fn in_regime(&self) -> bool {
        self.n_s > self.d && self.d > self.slots
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub symbolic_cross: CostModel,
    pub symbolic_kem: CostModel,
    pub measured_cross: CostModel,
    pub measured_kem: CostModel,
    pub ratio: f64,
    pub in_regime: bool,
}

impl CostReport {
    pub fn matches(&self) -> bool {
        self.symbolic_cross == self.measured_cross && self.symbolic_kem == self.measured_kem
    }

    pub const CSV_HEADER: &'static str = "n_s,d,L,cross_mults,cross_softmax,kem_mults,kem_softmax,ratio,regime";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.config.n_s,
            self.config.d,
            self.config.slots,
            self.measured_cross.matmul_multiplies,
            self.measured_cross.softmax_entries,
            self.measured_kem.matmul_multiplies,
            self.measured_kem.softmax_entries,
            self.ratio,
            if self.in_regime { "in-regime" } else { "out-of-regime" }
        )
    }
}

pub fn cost_report(config: CostConfig, seed: u64) -> Result<CostReport> {
    if config.n_s == 0 || config.d == 0 || config.slots == 0 {
        return Err(Error::contract("cost configs need positive n_s, d and L"));
    }
    let top_k = config.top_k.clamp(1, config.n_s);
    let symbolic_cross = symbolic_cost_cross_attention(config.n_s as u64, config.d as u64);
    let symbolic_kem = symbolic_cost_kem(config.n_s as u64, config.d as u64, config.slots as u64);
    let measured_cross = measure_cross_attention(config.n_s, config.d, seed)?;
    let measured_kem = measure_kem(config.n_s, config.d, config.slots, top_k, seed)?;
    Ok(CostReport {
        config,
        symbolic_cross,
        symbolic_kem,
        measured_cross,
        measured_kem,
        ratio: symbolic_kem.total() as f64 / symbolic_cross.total() as f64,
        in_regime: config.in_regime(),
    })
}

/// Reports for every `(n_s, d, L)` combination. Out-of-regime cells are kept
/// and flagged.
pub fn cost_sweep(n_s: &[usize], d: &[usize], slots: &[usize], top_k: usize, seed: u64) -> Result<Vec<CostReport>> {
    let mut out = Vec::new();
    for &n in n_s {
        for &dd in d {
            for &l in slots {
                out.push(cost_report(
                    CostConfig {
                        n_s: n,
                        d: dd,
                        slots: l,
                        top_k,
                    },
                    seed,
                )?);
            }
        }
    }
    Ok(out)
}
