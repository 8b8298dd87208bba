//! Oracle experiments with known answers, and the suites run by
//! `pddsparse verify`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_system, AssemblySettings, InterpolationTable, RowParams};
use crate::calibration::bias_bound;
use crate::error::{Error, Result};
use crate::geometry::{build_discretisation, DiscretisationPlan, GridSpec, Rect};
use crate::point::Point2;
use crate::problem::{exit_time_problem, laplace_const, poisson_manufactured, ExitRegion};
use crate::rbf::{Stencil1D, StencilCache, DEFAULT_TARGET_CONDITION};
use crate::scheduler::{schedule_jobs, PoolConfig};
use crate::sde::{run_ensemble, Ensemble, IntegratorConfig, StoppingRule, StreamKey};
use crate::solver::{solve_linear, CsrMatrix, SolveMethod};
use crate::spectral::solve_subdomain;
use crate::stats::{CoMoments, Moments};

/// Largest `|H_j(z_i) − δ_ij|` on `m` equispaced knots in `[0, 1]`, with the
/// stencil's condition number.
pub fn cardinal_delta(m: usize, target_condition: f64) -> Result<(f64, f64)> {
    let coords: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let s = Stencil1D::tuned(&coords, target_condition)?;
    let mut worst: f64 = 0.0;
    for (i, &z) in coords.iter().enumerate() {
        let h = s.cardinal_values(z);
        for (j, v) in h.values.iter().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - delta).abs());
        }
    }
    Ok((worst, s.condition()))
}

/// Monte Carlo mean exit time from the centre of a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeEstimate {
    pub exact: f64,
    pub mean: f64,
    pub std_error: f64,
    pub count: u64,
    /// Mean of `τ_naive − τ_shifted` in paired mode.
    pub mean_em_minus_gm: Option<f64>,
    pub em_minus_gm_std_error: Option<f64>,
    /// Mean naive-stop score in paired mode.
    pub em_mean: Option<f64>,
    pub em_std_error: Option<f64>,
}

impl ExitTimeEstimate {
    pub fn bias(&self) -> f64 {
        self.mean - self.exact
    }
}

const EXIT_TIME_BATCH: u64 = 5000;

/// Runs `n` exit-time trajectories from the centre of `region` under
/// `diffusivity·∇²`, split into batches over the pool.
pub fn exit_time_estimate(
    region: ExitRegion,
    diffusivity: f64,
    rule: StoppingRule,
    timestep: f64,
    n: u64,
    seed: u64,
    pool: &PoolConfig,
) -> Result<ExitTimeEstimate> {
    let problem = exit_time_problem(region, diffusivity)?;
    let stopping = region.stopping_region();
    let start = region.center();
    let exact = problem.u_exact.as_ref().expect("exit-time problems carry the exact solution")(start);
    let config = IntegratorConfig::with_default_cap(&problem, stopping.as_ref(), start, timestep, rule)?;
    let batches: Vec<(u64, std::ops::Range<u64>)> = (0..n.div_ceil(EXIT_TIME_BATCH))
        .map(|b| (b, b * EXIT_TIME_BATCH..((b + 1) * EXIT_TIME_BATCH).min(n)))
        .collect();
    let (parts, _) = schedule_jobs(
        &batches,
        pool,
        |(b, range)| {
            let ens = Ensemble {
                start,
                region: stopping.as_ref(),
                problem: &problem,
                config: &config,
                control: None,
                key: StreamKey {
                    seed,
                    phase: 0,
                    knot: 0,
                    job: *b,
                },
            };
            let mut gm = Moments::new();
            let mut paired = CoMoments::new();
            let mut diff = Moments::new();
            let counts = run_ensemble(&ens, range.clone(), |out| {
                // g = 0, so the score is Z
                gm.push(out.primary.z);
                if let Some(em) = out.em {
                    paired.push(out.primary.z, em.z);
                    diff.push(em.z - out.primary.z);
                }
                Ok(())
            })?;
            if counts.failed > 0 {
                return Err(Error::TooManyFailures {
                    failed: counts.failed,
                    total: counts.completed + counts.failed,
                });
            }
            Ok((gm, paired, diff))
        },
        |(b, _)| format!("exit-time batch {b}"),
    )?;
    let mut gm = Moments::new();
    let mut paired = CoMoments::new();
    let mut diff = Moments::new();
    for (g, p, d) in &parts {
        gm.merge(g);
        paired.merge(p);
        diff.merge(d);
    }
    let mixed = diff.count > 0;
    Ok(ExitTimeEstimate {
        exact,
        mean: gm.mean,
        std_error: gm.std_error(),
        count: gm.count,
        mean_em_minus_gm: mixed.then_some(diff.mean),
        em_minus_gm_std_error: mixed.then(|| diff.std_error()),
        em_mean: mixed.then_some(paired.b.mean),
        em_std_error: mixed.then(|| paired.b.std_error()),
    })
}

/// One repetition of the bias-bound experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCoverage {
    pub bound: f64,
    pub true_bias: f64,
    pub covered: bool,
}

/// Repeats the paired calibration on the unit disk and compares the bound
/// `½|mean(em − gm)|` with the realised shifted-scheme bias `|mean − ¼|`.
pub fn bias_coverage(timestep: f64, n: u64, repeats: u64, seed: u64, pool: &PoolConfig) -> Result<Vec<BiasCoverage>> {
    let disk = ExitRegion::Disk {
        center: Point2::new(0.0, 0.0),
        radius: 1.0,
    };
    (0..repeats)
        .map(|r| {
            let est = exit_time_estimate(disk, 1.0, StoppingRule::MixedGmEm, timestep, n, seed.wrapping_add(r), pool)?;
            let bound = bias_bound(est.mean_em_minus_gm.expect("paired run"));
            let true_bias = est.bias().abs();
            Ok(BiasCoverage {
                bound,
                true_bias,
                covered: bound >= true_bias,
            })
        })
        .collect()
}

/// Row sums `Σ_{j≠i} G_ij` of floating rows for Laplace's equation, with
/// their standard errors and the interpolation-of-constant deviation of the
/// row's stencils.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowSumSample {
    pub row: usize,
    pub deviation: f64,
    pub std_error: f64,
    pub constant_deviation: f64,
}

/// Largest `|Σ_j H_j(z) − 1|` along every side of the patch of `knot`.
pub fn constant_deviation(plan: &DiscretisationPlan, table: &InterpolationTable, knot: usize) -> f64 {
    let patch = &plan.patches[plan.knot_patch[knot].expect("interior knot")];
    let interp = table.patch(plan.knot_patch[knot].expect("interior knot"));
    let mut worst: f64 = 0.0;
    for seg in patch.segments.iter().flatten() {
        let si = interp.side(seg.side).expect("segment has a stencil");
        let mut h = vec![0.0; si.knots.len()];
        let samples = 400;
        for k in 0..=samples {
            let t = k as f64 / samples as f64;
            let p = seg.start + (seg.end - seg.start) * t;
            si.cardinal_values_into(p, &mut h);
            worst = worst.max((h.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

pub fn row_sums(grid: &GridSpec, n: u64, timestep: f64, seed: u64, pool: &PoolConfig) -> Result<Vec<RowSumSample>> {
    let plan = build_discretisation(grid)?;
    let problem = laplace_const(0.0);
    let table = InterpolationTable::build(&plan, &problem, &mut StencilCache::new(DEFAULT_TARGET_CONDITION))?;
    let params = vec![
        RowParams {
            timestep,
            trajectories: n,
        };
        plan.n()
    ];
    let settings = AssemblySettings {
        trajectories_per_job: n.min(1000),
        seed,
        phase: 1,
        rule: StoppingRule::GobetMenozzi,
        max_steps: None,
    };
    let sys = assemble_system(&plan, &problem, &table, &params, &settings, None, None, pool)?;
    Ok(plan
        .unknowns
        .iter()
        .enumerate()
        .filter(|(_, &k)| plan.patch_of(k).is_some_and(|p| p.is_floating()))
        .map(|(row, &k)| {
            let off: f64 = sys.matrix.row(row).filter(|(c, _)| *c != row).map(|(_, v)| v).sum();
            RowSumSample {
                row,
                deviation: (1.0 + off).abs(),
                std_error: sys.stats[row].row_sum_std_error,
                constant_deviation: constant_deviation(&plan, &table, k),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const SUITES: [&str; 7] = ["rbf", "solver", "spectral", "exit-time", "weak-order", "row-sum", "bias"];

/// Runs a named suite with moderate sample sizes.
pub fn run_suite(name: &str, pool: &PoolConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    match name {
        "rbf" => {
            let (dev, cond) = cardinal_delta(32, DEFAULT_TARGET_CONDITION)?;
            checks.push(Check::new("cardinal delta (m = 32)", dev <= 1e-6, format!("max |H_j(z_i) - d_ij| = {dev:.2e}, cond = {cond:.2e}")));
        }
        "solver" => {
            let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, -0.5), (1, 0, -0.5), (1, 1, 1.0)])?;
            for m in [SolveMethod::DenseLu, SolveMethod::SparseLu, SolveMethod::Gmres] {
                let r = solve_linear(&a, &[1.0, 1.0], m, None)?;
                let err = (r.solution[0] - 2.0).abs().max((r.solution[1] - 2.0).abs());
                checks.push(Check::new(&format!("2x2 closed form ({m})"), err < 1e-10, format!("error {err:.2e}")));
            }
        }
        "spectral" => {
            let problem = poisson_manufactured();
            let u = problem.u_exact.clone().expect("manufactured");
            let rect = Rect {
                xmin: 0.0,
                xmax: 20.0,
                ymin: 20.0,
                ymax: 40.0,
            };
            let mut errs = Vec::new();
            for p in [8, 16] {
                let s = solve_subdomain(&problem, rect, &|q| u(q), p)?;
                let mut worst: f64 = 0.0;
                for k in 1..40 {
                    for l in 1..40 {
                        let q = Point2::new(rect.xmin + 0.5 * k as f64, rect.ymin + 0.5 * l as f64);
                        worst = worst.max((s.value(q) - u(q)).abs());
                    }
                }
                errs.push(worst);
            }
            checks.push(Check::new("spectral convergence 8 -> 16", errs[1] * 100.0 <= errs[0], format!("{:.2e} -> {:.2e}", errs[0], errs[1])));
        }
        "exit-time" => {
            let disk = ExitRegion::Disk {
                center: Point2::new(0.0, 0.0),
                radius: 1.0,
            };
            let e = exit_time_estimate(disk, 1.0, StoppingRule::GobetMenozzi, 1e-3, 20_000, 1, pool)?;
            let ok = (e.mean - e.exact).abs() <= 0.01 && (e.mean - e.exact).abs() <= 3.0 * e.std_error + 1e-3;
            checks.push(Check::new("disk exit time", ok, format!("mean {:.5} +- {:.5} vs {:.5}", e.mean, e.std_error, e.exact)));
        }
        "weak-order" => {
            let disk = ExitRegion::Disk {
                center: Point2::new(0.0, 0.0),
                radius: 1.0,
            };
            let gm = exit_time_estimate(disk, 1.0, StoppingRule::GobetMenozzi, 0.01, 20_000, 2, pool)?;
            let em = exit_time_estimate(disk, 1.0, StoppingRule::NaiveEm, 0.01, 20_000, 3, pool)?;
            checks.push(Check::new(
                "shifted bias below naive bias",
                gm.bias().abs() < em.bias().abs(),
                format!("GM {:+.5} +- {:.5}, EM {:+.5} +- {:.5}", gm.bias(), gm.std_error, em.bias(), em.std_error),
            ));
        }
        "row-sum" => {
            let grid = GridSpec {
                origin: Point2::new(0.0, 0.0),
                square_side: 1.0,
                nx: 4,
                ny: 4,
                knots_per_interface: 6,
            };
            let rows = row_sums(&grid, 1000, 1e-3, 4, pool)?;
            let ok = rows
                .iter()
                .filter(|r| r.deviation <= 3.0 * r.std_error + r.constant_deviation)
                .count();
            checks.push(Check::new(
                "Laplace floating row sums",
                ok as f64 >= 0.99 * rows.len() as f64,
                format!("{ok} of {} rows within 3 SE + constant deviation", rows.len()),
            ));
        }
        "bias" => {
            let runs = bias_coverage(0.01, 5000, 10, 5, pool)?;
            let covered = runs.iter().filter(|r| r.covered).count();
            checks.push(Check::new("bias bound coverage", covered * 10 >= runs.len() * 9, format!("{covered} of {} runs covered", runs.len())));
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite '{other}' (available: {}, all)",
                SUITES.join(", ")
            )))
        }
    }
    Ok(checks)
}
