//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use pddsparse::assembly::InterpolationTable;
use pddsparse::config::{Phase, RunConfig};
use pddsparse::pipeline::{run_pipeline, PipelineOutputs};
use pddsparse::problem::{laplace_const, ExitRegion, ProblemRegistry};
use pddsparse::rbf::{StencilCache, DEFAULT_TARGET_CONDITION};
use pddsparse::scheduler::PoolConfig;
use pddsparse::sde::StoppingRule;
use pddsparse::verify::{bias_coverage, cardinal_delta, constant_deviation, exit_time_estimate, row_sums};
use pddsparse::geometry::GridSpec;
use pddsparse::{Point2, Result};

const Z95: f64 = 1.959_963_984_540_054;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn unit_disk() -> ExitRegion {
    ExitRegion::Disk {
        center: Point2::new(0.0, 0.0),
        radius: 1.0,
    }
}

fn serial() -> PoolConfig {
    PoolConfig::serial()
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/poisson43_desk.toml");
    let mut cfg = RunConfig::load(&path).expect("desk config");
    cfg.run.output = None;
    cfg
}

fn laplace7() -> RunConfig {
    RunConfig::from_toml(
        r#"
[problem]
name = "laplace_const"
params = { value = 7.0 }

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
seed = 17

[numerics]
warm_up_order = 12
final_order = 12
field_samples = 41
"#,
    )
    .expect("constant config")
}

fn c1() -> Result<Outcome> {
    let t = Instant::now();
    let (dev, cond) = cardinal_delta(32, DEFAULT_TARGET_CONDITION)?;
    let secs = t.elapsed().as_secs_f64();
    outcome(dev <= 1e-6 && secs < 1.0, format!("max |H_j(z_i) - d_ij| = {dev:.2e}, cond = {cond:.2e}, {secs:.3} s"))
}

fn c2() -> Result<Outcome> {
    let e = exit_time_estimate(unit_disk(), 1.0, StoppingRule::GobetMenozzi, 1e-3, 100_000, 21, &serial())?;
    let err = (e.mean - 0.25).abs();
    outcome(
        err <= 0.01 && err <= 3.0 * e.std_error,
        format!("mean {:.5} +- {:.5} (3 SE), exact 0.25", e.mean, 3.0 * e.std_error),
    )
}

fn c3() -> Result<Outcome> {
    let h = 1e-4;
    let n = 100_000;
    let mut est = Vec::new();
    for (side, seed) in [(1.0, 31), (2.0, 32)] {
        let sq = ExitRegion::Square {
            center: Point2::new(0.0, 0.0),
            side,
        };
        est.push(exit_time_estimate(sq, 1.0, StoppingRule::GobetMenozzi, h, n, seed, &serial())?);
    }
    let ratio = est[1].mean / est[0].mean;
    // the measured bias (against the series solution) must sit inside the CI
    let small_bias = est.iter().all(|e| e.bias().abs() <= 2.0 * Z95 * e.std_error);
    outcome(
        (3.8..=4.2).contains(&ratio) && small_bias,
        format!(
            "ratio {ratio:.4}; side 1: {:.5} (bias {:+.1e}, CI width {:.1e}); side 2: {:.5} (bias {:+.1e}, CI width {:.1e})",
            est[0].mean,
            est[0].bias(),
            2.0 * Z95 * est[0].std_error,
            est[1].mean,
            est[1].bias(),
            2.0 * Z95 * est[1].std_error
        ),
    )
}

fn c4() -> Result<Outcome> {
    let gm = exit_time_estimate(unit_disk(), 1.0, StoppingRule::GobetMenozzi, 0.01, 100_000, 41, &serial())?;
    let em = exit_time_estimate(unit_disk(), 1.0, StoppingRule::NaiveEm, 0.01, 100_000, 42, &serial())?;
    let (g, e) = (gm.bias(), em.bias());
    let (gw, ew) = (Z95 * gm.std_error, Z95 * em.std_error);
    // CIs of |bias|: intervals of the two means shifted by the exact value
    let disjoint = (g.abs() + gw) < (e.abs() - ew);
    outcome(
        g.abs() < e.abs() && disjoint,
        format!("GM bias {g:+.5} +- {gw:.5}, naive bias {e:+.5} +- {ew:.5}"),
    )
}

fn c5() -> Result<Outcome> {
    let cfg = laplace7();
    let out = run_pipeline(&cfg, &ProblemRegistry::with_builtins())?;
    let prod = out.production.as_ref().expect("full run");
    let mut worst_nodal: f64 = 0.0;
    let mut nodal_ok = true;
    let mut max_se: f64 = 0.0;
    for (u, s) in prod.solve.solution.iter().zip(&prod.system.stats) {
        let se = s.std_error().unwrap_or(f64::INFINITY);
        max_se = max_se.max(se);
        let d = (u - 7.0).abs();
        worst_nodal = worst_nodal.max(d / (3.0 * se + 1e-6));
        nodal_ok &= d <= 3.0 * se + 1e-6;
    }
    // field samples inherit the nodal uncertainty; use the largest nodal SE
    let r = cfg.numerics.field_samples;
    let dom = prod.field.grid.domain();
    let mut field_dev: f64 = 0.0;
    for j in 0..r {
        for i in 0..r {
            let q = Point2::new(
                dom.xmin + dom.width() * i as f64 / (r - 1) as f64,
                dom.ymin + dom.height() * j as f64 / (r - 1) as f64,
            );
            field_dev = field_dev.max((prod.field.value(q)? - 7.0).abs());
        }
    }
    let field_ok = field_dev <= 3.0 * max_se + 1e-6;
    let problem = laplace_const(7.0);
    let table = InterpolationTable::build(&out.plan, &problem, &mut StencilCache::new(DEFAULT_TARGET_CONDITION))?;
    let interp = out.plan.unknowns.iter().map(|&k| constant_deviation(&out.plan, &table, k)).fold(0.0, f64::max);
    outcome(
        nodal_ok && field_ok,
        format!(
            "worst nodal |u - 7| / (3 SE + 1e-6) = {worst_nodal:.2}; field max |u - 7| = {field_dev:.2e} vs {:.2e}; RBF constant deviation {interp:.2e}",
            3.0 * max_se + 1e-6
        ),
    )
}

fn c6() -> Result<Outcome> {
    let grid = GridSpec {
        origin: Point2::new(0.0, 0.0),
        square_side: 1.0,
        nx: 4,
        ny: 4,
        knots_per_interface: 8,
    };
    let rows = row_sums(&grid, 10_000, 1e-3, 61, &serial())?;
    let ok = rows.iter().filter(|r| r.deviation <= 3.0 * r.std_error + r.constant_deviation).count();
    let worst = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    outcome(
        ok as f64 >= 0.99 * rows.len() as f64,
        format!("{ok} of {} floating rows within bound; largest |1 + sum G_ij| = {worst:.2e}", rows.len()),
    )
}

struct Desk {
    out: PipelineOutputs,
    wall_s: f64,
}

fn c7(d: &Desk) -> Result<Outcome> {
    let m = &d.out.metrics;
    let one = m.phase("I").and_then(|p| p.errors.clone()).expect("phase I errors");
    let three = m.phase("III").and_then(|p| p.errors.clone()).expect("phase III errors");
    outcome(
        three.fraction_below_epsilon >= 0.90 && three.rmse <= 0.5 * one.rmse,
        format!(
            "n = {}; phase III {:.2}% below eps, RMSE {:.4} (phase I {:.4}, {:.2}% below); wall {:.0} s",
            m.n,
            100.0 * three.fraction_below_epsilon,
            three.rmse,
            one.rmse,
            100.0 * one.fraction_below_epsilon,
            d.wall_s
        ),
    )
}

fn c8(d: &Desk) -> Result<Outcome> {
    match &d.out.metrics.variance_reduction {
        Some(v) => outcome(
            v.mean_realised_factor >= 5.0 && v.fraction_meeting_prediction >= 0.8,
            format!(
                "mean realised factor {:.2}, {:.1}% of knots at or above 1/(1 - rho^2)",
                v.mean_realised_factor,
                100.0 * v.fraction_meeting_prediction
            ),
        ),
        None => outcome(false, "no production variance data".into()),
    }
}

fn c9(d: &Desk) -> Result<Outcome> {
    let cal = d.out.calibration.as_ref().expect("calibration report");
    let mut overlap = 0usize;
    for k in &cal.knots {
        let n = k.samples as f64;
        let w = Z95 * (k.variance / n).sqrt();
        let wc = Z95 * (k.corrected_variance / n).sqrt();
        if (k.mean_score - k.corrected_mean).abs() <= w + wc {
            overlap += 1;
        }
    }
    let frac = overlap as f64 / cal.knots.len() as f64;
    outcome(
        frac >= 0.95,
        format!("95% CIs of mean(score) and mean(score + xi) overlap at {overlap} of {} knots", cal.knots.len()),
    )
}

fn c10(d: &Desk) -> Result<Outcome> {
    let cond = d.out.metrics.condition_estimate;
    let mut sweep = Vec::new();
    for m in [8, 16, 32, 64] {
        let mut cfg = desk_config();
        cfg.grid.knots_per_interface = m;
        cfg.run.phase = Phase::WarmUp;
        cfg.run.n0 = 200;
        let out = run_pipeline(&cfg, &ProblemRegistry::with_builtins())?;
        sweep.push((out.metrics.n, out.warm_up.solve.condition_estimate));
    }
    let (n0, c0) = sweep[0];
    let linear = sweep.iter().all(|&(n, c)| c / c0 <= 3.0 * n as f64 / n0 as f64);
    let listing: Vec<String> = sweep.iter().map(|(n, c)| format!("n={n}: {c:.1}")).collect();
    outcome(cond <= 1e4 && linear, format!("desk cond {cond:.1}; sweep {}", listing.join(", ")))
}

fn c11() -> Result<Outcome> {
    let root = tempfile::tempdir()?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for (tag, workers, fault_rate) in [("w1", 1, 0.0), ("w8", 8, 0.0), ("w8f", 8, 0.1)] {
        let mut cfg = laplace7();
        cfg.problem.name = "poisson43".into();
        cfg.grid.origin = [-20.0, -20.0];
        cfg.grid.square_side = 40.0 / 3.0;
        cfg.run.h0 = 0.1;
        cfg.run.epsilon = 0.05;
        cfg.run.workers = workers;
        cfg.run.fault_rate = fault_rate;
        cfg.run.retry_budget = 10;
        let dir = root.path().join(tag);
        cfg.run.output = Some(dir.clone());
        run_pipeline(&cfg, &ProblemRegistry::with_builtins())?;
        dirs.push(dir);
    }
    let mut same = true;
    let names = ["G0.mtx", "b0.csv", "u0.csv", "G.mtx", "b.csv", "u.csv"];
    for name in names {
        let base = std::fs::read(dirs[0].join(name))?;
        for d in &dirs[1..] {
            same &= std::fs::read(d.join(name))? == base;
        }
    }
    outcome(same, format!("{} compared across 1 worker, 8 workers, 8 workers with 10% faults", names.join(" ")))
}

fn c12(d: &Desk) -> Result<Outcome> {
    let serial_s = d.out.metrics.phase("I").expect("phase I").timings.monte_carlo_s;
    let mut cfg = desk_config();
    cfg.run.phase = Phase::WarmUp;
    cfg.run.workers = 8;
    let out = run_pipeline(&cfg, &ProblemRegistry::with_builtins())?;
    let parallel_s = out.metrics.phase("I").expect("phase I").timings.monte_carlo_s;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    outcome(
        parallel_s <= serial_s / 6.0,
        format!(
            "warm-up assembly {serial_s:.1} s at 1 worker, {parallel_s:.1} s at 8 (speedup {:.2}, {cores} cores available)",
            serial_s / parallel_s
        ),
    )
}

fn c13() -> Result<Outcome> {
    let runs = bias_coverage(0.01, 100_000, 20, 1301, &serial())?;
    let covered = runs.iter().filter(|r| r.covered).count();
    let mean_bound = runs.iter().map(|r| r.bound).sum::<f64>() / runs.len() as f64;
    let mean_bias = runs.iter().map(|r| r.true_bias).sum::<f64>() / runs.len() as f64;
    outcome(
        covered * 10 >= runs.len() * 9,
        format!("{covered} of {} covered; mean bound {mean_bound:.4}, mean |bias| {mean_bias:.4}", runs.len()),
    )
}

fn report(id: u32, name: &str, r: Result<Outcome>, failures: &mut u32) {
    match r {
        Ok(o) => {
            if !o.passed {
                *failures += 1;
            }
            println!("{} {id:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        }
        Err(e) => {
            *failures += 1;
            println!("FAIL {id:>2} {name}: error: {e}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, "cardinal delta", c1(), &mut failures);
    report(2, "disk exit time", c2(), &mut failures);
    report(3, "area scaling of exit time", c3(), &mut failures);
    report(4, "weak-order ordering", c4(), &mut failures);
    report(5, "constant solution", c5(), &mut failures);
    report(6, "row-sum identity", c6(), &mut failures);

    let t = Instant::now();
    let desk = run_pipeline(&desk_config(), &ProblemRegistry::with_builtins()).map(|out| Desk {
        out,
        wall_s: t.elapsed().as_secs_f64(),
    });
    match &desk {
        Ok(d) => {
            report(7, "desk-scale reproduction", c7(d), &mut failures);
            report(8, "variance reduction", c8(d), &mut failures);
            report(9, "control-variate unbiasedness", c9(d), &mut failures);
            report(10, "conditioning", c10(d), &mut failures);
        }
        Err(e) => {
            for (id, name) in [(7, "desk-scale reproduction"), (8, "variance reduction"), (9, "control-variate unbiasedness"), (10, "conditioning")] {
                failures += 1;
                println!("FAIL {id:>2} {name}: desk run failed: {e}");
            }
        }
    }
    report(11, "determinism and fault tolerance", c11(), &mut failures);
    match &desk {
        Ok(d) => report(12, "parallel speedup", c12(d), &mut failures),
        Err(e) => {
            failures += 1;
            println!("FAIL 12 parallel speedup: desk run failed: {e}");
        }
    }
    report(13, "bias-bound coverage", c13(), &mut failures);

    println!("{} of 13 criteria passed", 13 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
