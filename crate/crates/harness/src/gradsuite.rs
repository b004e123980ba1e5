//! Named finite-difference checks over the mechanisms and losses.

use std::time::Instant;

use kem_core::attention::{BlockLayout, CrossAttentionParams, CrossAttentionVars, KemParams, KemVars};
use kem_core::etf::{build_etf, ScaleConvention};
use kem_core::gradcheck::{finite_diff_check_many, GradCheckReport};
use kem_core::init::slot_init;
use kem_core::train::mtl_loss_var;
use kem_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, Result};
use crate::report::RunReport;

pub const STEP: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const CASES: [&str; 6] = [
    "cross_attention",
    "kem_forward",
    "kem_forward_etf",
    "mtl_loss",
    "cross_entropy",
    "mse",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub case: String,
    pub seed: u64,
    pub passed: bool,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub roundoff_limited: usize,
}

fn cross_attention(seed: u64) -> kem_core::Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let p = CrossAttentionParams::init(4, &mut r);
    let f = Tensor::randn(6, 4, 1.0, &mut r);
    finite_diff_check_many(
        |g, v| {
            let vars = CrossAttentionVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
            };
            let out = vars.forward(g, v[0])?;
            Ok(g.sum(out.output))
        },
        &[f, p.w_q, p.w_k, p.w_v],
        STEP,
        RTOL,
    )
}

fn kem_forward(seed: u64, etf: bool) -> kem_core::Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, d, l, top_k) = (2, 4, 4, 2, 3);
    let p = KemParams::init(d, 3, &mut r);
    let f = Tensor::randn(n * m, d, 1.0, &mut r);
    let slots = slot_init::<f64, _>(l, d, &mut r);
    let frame = build_etf::<f64>(n, d, seed, ScaleConvention::Sqrt)?;
    let target = Tensor::randn(n * m, d, 1.0, &mut r);
    let mut inputs = vec![f, slots];
    inputs.extend(p.projections().into_iter().cloned());
    let layout = BlockLayout {
        n_tasks: n,
        tokens_per_task: m,
    };
    finite_diff_check_many(
        |g, v| {
            let vars = KemVars {
                w_qr: v[2],
                w_kr: v[3],
                w_vr: v[4],
                w_qw: v[5],
                w_kw: v[6],
                w_vw: v[7],
                residual_weight: 1.0,
                top_k,
            };
            let out = vars.forward(g, v[0], layout, v[1], etf.then_some(&frame))?;
            let s = g.sum(out.output);
            let mse = g.mse(out.output, &target)?;
            g.add(s, mse)
        },
        &inputs,
        STEP,
        RTOL,
    )
}

fn losses(seed: u64, which: &str) -> kem_core::Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::randn(4, 5, 1.0, &mut r);
    let pred = Tensor::randn(4, 2, 1.0, &mut r);
    let target = Tensor::randn(4, 2, 1.0, &mut r);
    let labels = [0, 4, 2, 2];
    finite_diff_check_many(
        |g, v| match which {
            "cross_entropy" => g.cross_entropy(v[0], &labels),
            "mse" => g.mse(v[1], &target),
            _ => {
                let ce = g.cross_entropy(v[0], &labels)?;
                let mse = g.mse(v[1], &target)?;
                mtl_loss_var(g, &[ce, mse], &[1.0, 30.0])
            }
        },
        &[logits, pred],
        STEP,
        RTOL,
    )
}

pub fn run_case(case: &str, seed: u64) -> Result<GradCase> {
    let r = match case {
        "cross_attention" => cross_attention(seed)?,
        "kem_forward" => kem_forward(seed, false)?,
        "kem_forward_etf" => kem_forward(seed, true)?,
        "mtl_loss" | "cross_entropy" | "mse" => losses(seed, case)?,
        other => return Err(kem_core::Error::Contract(format!("unknown gradient case {other}")).into()),
    };
    Ok(GradCase {
        case: case.to_string(),
        seed,
        passed: r.passed,
        max_rel_error: r.max_rel_error,
        coordinates: r.coordinates,
        roundoff_limited: r.roundoff_limited,
    })
}

/// Every case for seeds `0..seeds`.
pub fn gradcheck_suite(seeds: usize) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for case in CASES {
        for seed in 0..seeds as u64 {
            out.push(run_case(case, seed)?);
        }
    }
    Ok(out)
}

/// Runs the suite; the report is returned even when a case fails so callers
/// can write it before signalling the gate.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<(RunReport, Vec<GradCase>)> {
    if cfg.kind != ExperimentKind::Gradcheck {
        return Err(kem_core::Error::Contract(format!("run_gradcheck called with kind {}", cfg.kind)).into());
    }
    let start = Instant::now();
    let cases = gradcheck_suite(cfg.gradcheck_seeds)?;
    let mut report = RunReport::new(cfg);
    for case in CASES {
        let worst = cases
            .iter()
            .filter(|c| c.case == case)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max);
        let all = cases.iter().filter(|c| c.case == case).all(|c| c.passed);
        report.push_metric("max_rel_error", case, worst);
        report.push_metric("passed", case, all as u8 as f64);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((report, cases))
}

pub fn gate(cases: &[GradCase]) -> Result<()> {
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} (seed {}, rel {:.2e})", c.case, c.seed, c.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Gate(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
