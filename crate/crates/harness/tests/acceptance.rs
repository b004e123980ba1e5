//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `KNOWN_RED` fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use kem_core::attention::{softmax_rows, topk_softmax, KemParams, MemorySlots, TaskFeatureBlock};
use kem_core::cost::cost_sweep;
use kem_core::etf::{build_etf, ScaleConvention};
use kem_core::graph::Graph;
use kem_core::metrics::{accuracy, delta_m, miou, rmse, TaskScore};
use kem_core::tensor::Tensor;
use kem_harness::config::{ExperimentConfig, ExperimentKind, Mechanism};
use kem_harness::execute;
use kem_harness::gradsuite::{gradcheck_suite, CASES};
use kem_harness::imbalance::run_imbalance;
use kem_harness::noise_toy::run_noise_toy;
use kem_harness::report::RunReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that fail with the shipped toy model. They are still run and
/// reported; the analysis is in the README.
const KNOWN_RED: &[&str] = &["imbalance-pattern"];

const SEEDS: u64 = 3;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cost_equality() -> Outcome {
    let rows = cost_sweep(&[8, 64, 256, 1024], &[4, 16, 64], &[2, 8, 16], 3, 0).unwrap();
    let mismatched = rows.iter().filter(|r| !r.matches()).count();
    let in_regime: Vec<_> = rows.iter().filter(|r| r.in_regime).collect();
    let not_cheaper = in_regime
        .iter()
        .filter(|r| r.measured_kem.total() >= r.measured_cross.total())
        .count();
    outcome(
        mismatched == 0 && not_cheaper == 0 && !in_regime.is_empty(),
        format!(
            "{} configs, {mismatched} count mismatches; {} in-regime, {not_cheaper} where KEM is not cheaper",
            rows.len(),
            in_regime.len()
        ),
    )
}

fn cost_point() -> Outcome {
    let r = &cost_sweep(&[8], &[4], &[2], 3, 0).unwrap()[0];
    let (cross, kem) = (r.measured_cross.total(), r.measured_kem.total());
    outcome(
        cross == 960 && kem == 768 && r.ratio == 0.8 && r.matches(),
        format!("cross {cross}, KEM {kem}, ratio {}", r.ratio),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = gradcheck_suite(SEEDS as usize).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}#{}", c.case, c.seed))
        .collect();
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && cases.len() == CASES.len() * SEEDS as usize && secs < 60.0,
        format!(
            "{} cases at rtol 1e-4 in {secs:.2}s, worst rel {worst:.1e}, failed {failed:?}",
            cases.len()
        ),
    )
}

/// Indices of the `k` largest entries, ties to the lower index.
fn reference_support(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort();
    idx
}

fn topk_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_sum, mut bad_support, mut bad_dense) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let len = rng.random_range(1..=24);
        // Coarse values so ties are common.
        let row: Vec<f64> = (0..len).map(|_| rng.random_range(-8i32..=8) as f64 / 4.0).collect();
        let k = rng.random_range(1..=len + 2);
        let x = Tensor::new(vec![1, len], row.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let y = g.topk_softmax(v, k).unwrap();
        let out = g.value(y).row(0).to_vec();
        worst_sum = worst_sum.max((out.iter().sum::<f64>() - 1.0).abs());
        let mut support = g.topk_support(y).unwrap()[0].clone();
        support.sort();
        let nonzero: Vec<usize> = (0..len).filter(|&j| out[j] != 0.0).collect();
        let want = reference_support(&row, k);
        if support != want || nonzero != want {
            bad_support += 1;
        }
        if k >= len && topk_softmax(&x, k).unwrap() != softmax_rows(&x).unwrap() {
            bad_dense += 1;
        }
    }
    outcome(
        worst_sum <= 1e-12 && bad_support == 0 && bad_dense == 0,
        format!(
            "1000 rows: max |sum-1| {worst_sum:.1e}, {bad_support} support mismatches, {bad_dense} dense mismatches"
        ),
    )
}

fn etf_geometry() -> Outcome {
    let mut worst = 0.0f64;
    let (mut compared, mut differing) = (0usize, 0usize);
    for k in 2..=6 {
        for dim in k..=16 {
            for seed in 0..5 {
                let f = build_etf::<f64>(k, dim, seed, ScaleConvention::Sqrt).unwrap();
                let w = f.w_star();
                let wtw = w.transpose().unwrap().matmul(w).unwrap();
                for i in 0..k {
                    worst = worst.max((wtw.get(i, i) - 1.0).abs());
                    for j in (0..k).filter(|&j| j != i) {
                        let cos = wtw.get(i, j) / (wtw.get(i, i) * wtw.get(j, j)).sqrt();
                        worst = worst.max((cos + 1.0 / (k as f64 - 1.0)).abs());
                    }
                    worst = worst.max(f.gram().row(i).iter().sum::<f64>().abs());
                    worst = worst.max(wtw.row(i).iter().sum::<f64>().abs());
                }
                let (c, d) = selection_agreement(k, dim, seed);
                compared += c;
                differing += d;
            }
        }
    }
    outcome(
        worst <= 1e-10 && differing == 0 && compared > 0,
        format!("max geometry error {worst:.1e}; {compared} retrieve rows with margin > 1e-9, {differing} differ between conventions"),
    )
}

/// Retrieve rows whose k-th selection margin exceeds 1e-9, and how many of
/// them select differently under the two scale conventions.
fn selection_agreement(n: usize, dim: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (m, l, top_k) = (3, 4, 3);
    let f = TaskFeatureBlock::new(n, m, Tensor::randn(n * m, dim, 1.0, &mut rng)).unwrap();
    let r = MemorySlots::init(l, dim, &mut rng);
    let p = KemParams::<f64>::init(dim, top_k, &mut rng);
    let run = |conv: ScaleConvention| {
        let frame = build_etf::<f64>(n, dim, seed, conv).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false);
        let fv = g.constant(f.features().clone());
        let rv = g.constant(r.slots.clone());
        // Mixed logits, rebuilt from the same ops to measure the margin.
        let q = g.matmul(rv, vars.w_qr).unwrap();
        let kk = g.matmul(fv, vars.w_kr).unwrap();
        let kt = g.transpose(kk).unwrap();
        let logits = g.matmul(q, kt).unwrap();
        let logits = g.scale(logits, 1.0 / (dim as f64).sqrt());
        let mixed = g.mix_blocks(logits, frame.gram(), m).unwrap();
        let logits = g.value(mixed).clone();
        let out = vars.retrieve(&mut g, fv, f.layout(), rv, Some(&frame)).unwrap();
        (logits, g.topk_support(out.weights).unwrap().to_vec())
    };
    let (logits, sqrt) = run(ScaleConvention::Sqrt);
    let (_, linear) = run(ScaleConvention::Linear);
    let (mut compared, mut differing) = (0, 0);
    for row in 0..l {
        let mut v = logits.row(row).to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        if v[top_k - 1] - v[top_k] > 1e-9 {
            compared += 1;
            let (mut a, mut b) = (sqrt[row].clone(), linear[row].clone());
            a.sort();
            b.sort();
            differing += (a != b) as usize;
        }
    }
    (compared, differing)
}

fn noise_pattern() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..SEEDS {
        let run = |mech| {
            let mut c = ExperimentConfig::defaults(ExperimentKind::NoiseToy);
            c.mechanism = mech;
            c.seed = seed;
            run_noise_toy(&c).unwrap()
        };
        let mass = run(Mechanism::CrossAttention)
            .metric("noise_mass", "task1+task2")
            .unwrap();
        let rate = run(Mechanism::Kem)
            .metric("noise_selection_rate", "task1+task2")
            .unwrap();
        ok &= mass >= 0.10 && rate < mass;
        parts.push(format!("seed {seed}: cross mass {mass:.3}, KEM rate {rate:.3}"));
    }
    outcome(ok, parts.join("; "))
}

fn imbalance_pattern() -> Outcome {
    let start = Instant::now();
    let mut drops = [[0.0; 2]; SEEDS as usize];
    for seed in 0..SEEDS {
        for (j, mech) in [Mechanism::Kem, Mechanism::Skem].into_iter().enumerate() {
            let mut c = ExperimentConfig::defaults(ExperimentKind::Imbalance);
            c.mechanism = mech;
            c.seed = seed;
            let r = run_imbalance(&c).unwrap();
            drops[seed as usize][j] = 100.0 * r.metric("accuracy_drop", "balanced-imbalanced").unwrap();
        }
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let kem_ok = drops.iter().all(|d| d[0] >= 4.0);
    let skem_ok = drops.iter().all(|d| d[1] <= 2.0);
    let ordered = drops.iter().all(|d| d[1] < d[0]);
    let fmt = |j: usize| {
        drops
            .iter()
            .map(|d| format!("{:+.2}", d[j]))
            .collect::<Vec<_>>()
            .join("/")
    };
    outcome(
        kem_ok && skem_ok && ordered && mins <= 30.0,
        format!(
            "drops in pp, KEM {} (>= 4: {kem_ok}), sKEM {} (<= 2: {skem_ok}), sKEM < KEM per seed: {ordered}; {mins:.1} min",
            fmt(0),
            fmt(1)
        ),
    )
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let checks = [
        (
            "miou identical",
            close(miou(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 1.0),
        ),
        ("miou disjoint", close(miou(&[1, 1], &[0, 0], 2).unwrap(), 0.0)),
        (
            "miou 2x2",
            close(miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap(), 7.0 / 12.0),
        ),
        (
            "rmse identical",
            close(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0),
        ),
        ("rmse shift", close(rmse(&[1.25, -0.75], &[1.0, -1.0]).unwrap(), 0.25)),
        (
            "rmse [1,2]",
            close(rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5f64.sqrt()),
        ),
        (
            "delta_m equal",
            close(
                delta_m(&[TaskScore::higher(3.0)], &[TaskScore::higher(3.0)]).unwrap(),
                0.0,
            ),
        ),
        (
            "delta_m two tasks",
            close(
                delta_m(
                    &[TaskScore::higher(50.0), TaskScore::lower(0.48)],
                    &[TaskScore::higher(49.0), TaskScore::lower(0.50)],
                )
                .unwrap(),
                (1.0 / 49.0 + 0.04) / 2.0,
            ),
        ),
        (
            "delta_m lower-better 10%",
            delta_m(&[TaskScore::lower(9.0)], &[TaskScore::lower(10.0)]).unwrap() == 0.10
                && close(
                    delta_m(&[TaskScore::lower(0.9)], &[TaskScore::lower(1.0)]).unwrap(),
                    0.10,
                ),
        ),
        ("accuracy all", accuracy(&[1, 2], &[1, 2]).unwrap() == 1.0),
        ("accuracy none", accuracy(&[0, 0], &[1, 1]).unwrap() == 0.0),
        ("accuracy 3/4", accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap() == 0.75),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!("{} oracles, failed {failed:?}", checks.len()),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut configs = Vec::new();
    let mut noise = ExperimentConfig::defaults(ExperimentKind::NoiseToy);
    noise.mechanism = Mechanism::Skem;
    configs.push(noise.clone());
    noise.mechanism = Mechanism::CrossAttention;
    configs.push(noise);
    let mut imb = ExperimentConfig::defaults(ExperimentKind::Imbalance);
    imb.mechanism = Mechanism::Skem;
    imb.steps = 40;
    imb.train_count = 512;
    imb.test_count = 256;
    configs.push(imb.clone());
    let mut grid = ExperimentConfig::defaults(ExperimentKind::GridK);
    grid.grid_values = vec![2, 3];
    grid.steps = 10;
    grid.train_count = 128;
    grid.test_count = 128;
    configs.push(grid);
    configs.push(ExperimentConfig::defaults(ExperimentKind::CostSweep));
    configs.push(ExperimentConfig::defaults(ExperimentKind::Gradcheck));

    let bits = |r: &RunReport| {
        let m: Vec<_> = r
            .metrics
            .iter()
            .map(|m| (m.metric.clone(), m.task.clone(), m.value.to_bits()))
            .collect();
        let l: Vec<_> = r
            .losses
            .iter()
            .flat_map(|c| c.points.iter().map(|p| p.loss.to_bits()))
            .collect();
        (m, l)
    };
    let mut differing = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let a = execute(cfg, &tmp.path().join(format!("{i}a"))).unwrap().report;
        let b = execute(cfg, &tmp.path().join(format!("{i}b"))).unwrap().report;
        let same_files = std::fs::read(tmp.path().join(format!("{i}a/metrics.json"))).unwrap()
            == std::fs::read(tmp.path().join(format!("{i}b/metrics.json"))).unwrap();
        if bits(&a) != bits(&b) || !same_files || a.metrics.is_empty() {
            differing.push(format!("{}-{}", cfg.kind, cfg.mechanism));
        }
    }
    outcome(
        differing.is_empty(),
        format!("{} configs run twice, bit-different: {differing:?}", configs.len()),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("cost-equality", cost_equality),
        ("cost-point", cost_point),
        ("gradient-suite", gradient_suite),
        ("topk-invariants", topk_invariants),
        ("etf-geometry", etf_geometry),
        ("noise-pattern", noise_pattern),
        ("imbalance-pattern", imbalance_pattern),
        ("metric-oracles", metric_oracles),
        ("determinism", determinism),
    ];
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut unexpected = Vec::new();
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| outcome(false, "panicked"));
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_RED.contains(&name) {
            " (known red)"
        } else {
            ""
        };
        println!(
            "{status} {name}{note}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass && !KNOWN_RED.contains(&name) {
            unexpected.push(name);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
