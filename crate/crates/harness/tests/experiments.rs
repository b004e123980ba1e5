use kem_harness::config::{ExperimentConfig, ExperimentKind, Mechanism};
use kem_harness::grid::{csv_header, grid_csv, run_grid};
use kem_harness::summary::{nc_csv, NC_HEADER};
use kem_harness::{execute, run_dir};

fn tiny_grid(kind: ExperimentKind, experiment: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(kind);
    c.grid_experiment = experiment;
    c.steps = 4;
    c.batch_size = 4;
    c.train_count = 16;
    c.test_count = 64;
    if experiment == ExperimentKind::NoiseToy {
        c.n_tasks = 3;
        c.m = 4;
        c.d = 8;
    }
    c
}

#[test]
fn grid_l_over_three_values_is_ranked_and_reproducible() {
    let cfg = tiny_grid(ExperimentKind::GridL, ExperimentKind::Imbalance);
    let a = run_grid(&cfg).unwrap();
    let b = run_grid(&cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows.len(), 3);
    let mut ranks: Vec<usize> = a.rows.iter().map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, [1, 2, 3]);
    assert_eq!(a.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1, 2]);
    let csv = grid_csv(cfg.kind, &a.rows);
    assert_eq!(csv.lines().next(), Some(csv_header(ExperimentKind::GridL)));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn grid_of_one_value_returns_it() {
    let mut cfg = tiny_grid(ExperimentKind::GridK, ExperimentKind::NoiseToy);
    cfg.grid_values = vec![2];
    cfg.seed = 5;
    let g = run_grid(&cfg).unwrap();
    assert_eq!(g.best().value, 2);
    assert_eq!(g.best().seed, 5);
    assert_eq!(g.summary.metric("best_value", "delta_m"), Some(2.0));
    assert_eq!(g.cells[0].config["top_k"], 2);
}

#[test]
fn empty_grid_is_rejected() {
    let mut cfg = tiny_grid(ExperimentKind::GridL, ExperimentKind::Imbalance);
    cfg.grid_values.clear();
    assert!(run_grid(&cfg).is_err());
}

#[test]
fn executed_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Imbalance);
    cfg.mechanism = Mechanism::Skem;
    cfg.steps = 3;
    cfg.batch_size = 4;
    cfg.train_count = 12;
    cfg.test_count = 6;
    let a = execute(&cfg, &tmp.path().join("a")).unwrap().report;
    let b = execute(&cfg, &tmp.path().join("b")).unwrap().report;
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.losses, b.losses);
    let bits = |r: &kem_harness::report::RunReport| r.metrics.iter().map(|m| m.value.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(run_dir(tmp.path(), &cfg).ends_with(format!("imbalance-skem-{}", cfg.hash())));

    let table = nc_csv(&[(tmp.path().join("a/report.json"), a.clone())]);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some(NC_HEADER));
    assert!(lines.next().unwrap().starts_with("skem,0,"));
}
