use std::path::Path;

use pddsparse::config::{Phase, RunConfig};
use pddsparse::pipeline::run_pipeline;
use pddsparse::assembly::InterpolationTable;
use pddsparse::problem::{laplace_const, ProblemRegistry};
use pddsparse::rbf::{StencilCache, DEFAULT_TARGET_CONDITION};
use pddsparse::verify::constant_deviation;
use pddsparse::Error;

fn laplace7() -> RunConfig {
    RunConfig::from_toml(
        r#"
[problem]
name = "laplace_const"

[grid]
origin = [0.0, 0.0]
square_side = 1.0
nx = 3
ny = 3
knots_per_interface = 8

[run]
epsilon = 0.01
n0 = 400
h0 = 0.01
trajectories_per_job = 100
seed = 11

[numerics]
warm_up_order = 12
final_order = 12
field_samples = 21
"#,
    )
    .unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn warm_up_only_writes_phase_one_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = laplace7();
    cfg.run.phase = Phase::WarmUp;
    cfg.run.output = Some(dir.path().to_path_buf());
    let out = run_pipeline(&cfg, &ProblemRegistry::with_builtins()).unwrap();
    assert!(out.calibration.is_none() && out.production.is_none());
    assert_eq!(files(dir.path()), ["G0.mtx", "b0.csv", "field0.csv", "metrics.json", "u0.csv"]);
    let metrics: serde_json::Value = serde_json::from_slice(&read(dir.path(), "metrics.json")).unwrap();
    assert_eq!(metrics["phases"].as_array().unwrap().len(), 1);
    assert_eq!(metrics["n"].as_u64().unwrap() as usize, out.plan.n());
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = laplace7();
    cfg.run.output = Some(dir.path().to_path_buf());
    run_pipeline(&cfg, &ProblemRegistry::with_builtins()).unwrap();
    assert_eq!(
        files(dir.path()),
        [
            "G.mtx", "G0.mtx", "b.csv", "b0.csv", "calibration.json", "field.csv", "field0.csv", "metrics.json",
            "u.csv", "u0.csv"
        ]
    );
    let header = String::from_utf8(read(dir.path(), "G.mtx")).unwrap();
    assert!(header.starts_with("%%MatrixMarket matrix coordinate real general"));
}

#[test]
fn outputs_do_not_depend_on_workers_or_faults() {
    let registry = ProblemRegistry::with_builtins();
    let mut runs = Vec::new();
    for (workers, fault_rate) in [(1, 0.0), (3, 0.0), (2, 0.1)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = laplace7();
        cfg.run.workers = workers;
        cfg.run.fault_rate = fault_rate;
        cfg.run.retry_budget = 20;
        cfg.run.output = Some(dir.path().to_path_buf());
        run_pipeline(&cfg, &registry).unwrap();
        runs.push(dir);
    }
    for name in ["G0.mtx", "b0.csv", "u0.csv", "G.mtx", "b.csv", "u.csv", "calibration.json"] {
        let base = read(runs[0].path(), name);
        for other in &runs[1..] {
            assert!(read(other.path(), name) == base, "{name} differs");
        }
    }
}

#[test]
fn exhausted_retry_budget_aborts_with_the_job_name() {
    let mut cfg = laplace7();
    cfg.run.fault_rate = 0.5;
    cfg.run.retry_budget = 0;
    match run_pipeline(&cfg, &ProblemRegistry::with_builtins()) {
        Err(Error::Phase { phase, source }) => {
            assert_eq!(phase, "I");
            match *source {
                Error::JobFailed { job, .. } => assert!(job.contains("knot"), "{job}"),
                e => panic!("unexpected {e}"),
            }
        }
        other => panic!("expected a phase error, got {other:?}"),
    }
}

#[test]
fn seed_changes_the_estimates() {
    let registry = ProblemRegistry::with_builtins();
    let mut a = laplace7();
    a.run.phase = Phase::WarmUp;
    let mut b = a.clone();
    b.run.seed += 1;
    let ua = run_pipeline(&a, &registry).unwrap().warm_up.system.rhs;
    let ub = run_pipeline(&b, &registry).unwrap().warm_up.system.rhs;
    assert_ne!(ua, ub);
}

#[test]
fn constant_solution_is_reproduced() {
    let out = run_pipeline(&laplace7(), &ProblemRegistry::with_builtins()).unwrap();
    let warm = out.warm_up.solve.solution.iter().map(|u| (u - 7.0).abs()).fold(0.0, f64::max);
    assert!(warm < 1e-3, "warm-up deviation {warm}");
    // The plain RBF interpolant reproduces constants only to |ΣH - 1|, so
    // the bound carries 7 times that measured deviation.
    let problem = laplace_const(7.0);
    let table = InterpolationTable::build(&out.plan, &problem, &mut StencilCache::new(DEFAULT_TARGET_CONDITION)).unwrap();
    let interp = out.plan.unknowns.iter().map(|&k| constant_deviation(&out.plan, &table, k)).fold(0.0, f64::max);
    assert!(interp < 1e-4, "{interp}");
    let prod = out.production.unwrap();
    for (u, s) in prod.solve.solution.iter().zip(&prod.system.stats) {
        let se = s.std_error().expect("production rows are scored against u0");
        assert!((u - 7.0).abs() <= 3.0 * se + 7.0 * interp + 1e-6, "{u} (se {se}, interp {interp})");
    }
}
