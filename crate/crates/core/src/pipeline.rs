//! Three-phase driver.
//!
//! * I (warm-up): assemble with `N₀` trajectories at `h₀` per knot, solve,
//!   build the field `u₀`.
//! * II (calibration): paired shifted/naive trajectories at `h'₀` with the
//!   control variate from `∇u₀`, giving `{h_i, N_i}`.
//! * III (production): re-assemble with `{h_i, N_i}` and the control
//!   variate, solve, build the final field.
//!
//! Selecting a phase runs every phase up to and including it.

use std::path::Path;
use std::time::Instant;

use crate::assembly::{assemble_system, AssemblySettings, InterfacialSystem, InterpolationTable, RowParams};
use crate::calibration::{run_calibration, CalibrationReport, CalibrationSettings};
use crate::config::{ControlSource, Phase, RunConfig};
use crate::error::Result;
use crate::geometry::{build_discretisation, DiscretisationPlan};
use crate::io::{write_file, write_nodal_csv};
use crate::problem::{EllipticProblem, ProblemRegistry};
use crate::rbf::StencilCache;
use crate::report::{
    error_summary, field_max_error, variance_reduction, CalibrationMetrics, MetricsDocument, PhaseMetrics,
    PhaseTimings,
};
use crate::sde::{GradientSource, StoppingRule};
use crate::solver::{solve_linear, SolveReport};
use crate::spectral::{build_global_field, FieldTable, GlobalField};

/// Artifacts of one assembly-solve-field phase.
#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub system: InterfacialSystem,
    pub solve: SolveReport,
    pub field: GlobalField,
    pub metrics: PhaseMetrics,
}

#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub plan: DiscretisationPlan,
    pub warm_up: PhaseOutput,
    pub calibration: Option<CalibrationReport>,
    pub production: Option<PhaseOutput>,
    pub metrics: MetricsDocument,
}

enum Control {
    Spectral(GlobalField),
    Table(FieldTable),
}

impl Control {
    fn source(&self) -> &dyn GradientSource {
        match self {
            Control::Spectral(f) => f,
            Control::Table(t) => t,
        }
    }
}

struct Context<'a> {
    config: &'a RunConfig,
    problem: &'a EllipticProblem,
    plan: &'a DiscretisationPlan,
    table: &'a InterpolationTable,
    cache: StencilCache,
}

impl Context<'_> {
    fn phase(
        &mut self,
        phase: Phase,
        params: &[RowParams],
        control: Option<&dyn GradientSource>,
        reference: Option<&[f64]>,
        order: usize,
    ) -> Result<PhaseOutput> {
        let cfg = self.config;
        let pool = cfg.pool();
        let settings = AssemblySettings {
            trajectories_per_job: cfg.run.trajectories_per_job,
            seed: cfg.run.seed,
            phase: phase.stream_tag(),
            rule: StoppingRule::GobetMenozzi,
            max_steps: cfg.numerics.max_steps,
        };
        let t0 = Instant::now();
        let system = assemble_system(self.plan, self.problem, self.table, params, &settings, control, reference, &pool)?;
        let t1 = Instant::now();
        let solve = solve_linear(&system.matrix, &system.rhs, cfg.numerics.solver, None)?;
        let t2 = Instant::now();
        let field = build_global_field(self.plan, &solve.solution, self.problem, order, &mut self.cache, &pool)?;
        let t3 = Instant::now();
        let metrics = PhaseMetrics {
            phase: phase.label().to_string(),
            n: system.n(),
            trajectories: system.counts.completed,
            nonzero_fraction: system.nonzero_fraction(),
            condition_estimate: solve.condition_estimate,
            residual_inf: solve.residual_inf,
            errors: error_summary(self.plan, self.problem, &solve.solution, cfg.run.epsilon),
            field_max_error: field_max_error(&field, self.problem, cfg.numerics.field_samples),
            interface_mismatch: field.mismatch,
            extrapolations: system.stats.iter().map(|s| s.extrapolations).sum(),
            timings: PhaseTimings {
                monte_carlo_s: (t1 - t0).as_secs_f64(),
                solve_s: (t2 - t1).as_secs_f64(),
                field_s: (t3 - t2).as_secs_f64(),
            },
        };
        Ok(PhaseOutput {
            system,
            solve,
            field,
            metrics,
        })
    }

    fn write_phase(&self, dir: &Path, suffix: &str, out: &PhaseOutput) -> Result<()> {
        write_file(dir, &format!("G{suffix}.mtx"), |w| Ok(out.system.write_matrix_market(w)?))?;
        write_file(dir, &format!("b{suffix}.csv"), |w| Ok(out.system.write_rhs_csv(w)?))?;
        write_file(dir, &format!("u{suffix}.csv"), |w| {
            write_nodal_csv(w, self.plan, self.problem, &out.solve.solution)
        })?;
        let exact = self.problem.u_exact.clone();
        let exact_fn = exact.as_ref().map(|f| f.as_ref() as &dyn Fn(crate::Point2) -> f64);
        write_file(dir, &format!("field{suffix}.csv"), |w| {
            out.field.write_samples_csv(w, self.config.numerics.field_samples, exact_fn)
        })
    }
}

/// Runs the phases selected in `config` and writes their artifacts to the
/// configured output directory, if any.
pub fn run_pipeline(config: &RunConfig, registry: &ProblemRegistry) -> Result<PipelineOutputs> {
    config.validate()?;
    let problem = registry.build(&config.problem.name, &config.problem.params)?;
    let plan = build_discretisation(&config.grid.spec())?;
    let mut cache = StencilCache::new(config.numerics.target_condition);
    let table = InterpolationTable::build(&plan, &problem, &mut cache)?;
    let mut ctx = Context {
        config,
        problem: &problem,
        plan: &plan,
        table: &table,
        cache,
    };
    let out_dir = config.run.output.as_deref();
    let selected = config.run.phase;
    let n = plan.n();

    let warm_params = vec![
        RowParams {
            timestep: config.run.h0,
            trajectories: config.run.n0,
        };
        n
    ];
    let warm_up = ctx
        .phase(Phase::WarmUp, &warm_params, None, None, config.numerics.warm_up_order)
        .map_err(|e| e.in_phase("I"))?;
    if let Some(dir) = out_dir {
        ctx.write_phase(dir, "0", &warm_up).map_err(|e| e.in_phase("I"))?;
    }

    let mut calibration = None;
    let mut calibration_wall = 0.0;
    let mut production = None;
    if selected >= Phase::Calibration {
        let u0 = &warm_up.solve.solution;
        let control = match config.numerics.control {
            ControlSource::Spectral => Control::Spectral(warm_up.field.clone()),
            ControlSource::Table => Control::Table(
                FieldTable::build(&warm_up.field, config.numerics.table_cells).map_err(|e| e.in_phase("II"))?,
            ),
        };
        let t0 = Instant::now();
        let report = run_calibration(
            &plan,
            &problem,
            &table,
            u0,
            control.source(),
            &CalibrationSettings {
                epsilon: config.run.epsilon,
                h0: config.run.h0,
                h0_prime: config.h0_prime(),
                n0_prime: config.n0_prime(),
                trajectories_per_job: config.run.trajectories_per_job,
                seed: config.run.seed,
                phase: Phase::Calibration.stream_tag(),
                max_steps: config.numerics.max_steps,
                max_reduction: config.numerics.max_reduction,
            },
            &config.pool(),
        )
        .map_err(|e| e.in_phase("II"))?;
        calibration_wall = t0.elapsed().as_secs_f64();
        if let Some(dir) = out_dir {
            write_file(dir, "calibration.json", |w| Ok(serde_json::to_writer_pretty(w, &report)?))
                .map_err(|e| e.in_phase("II"))?;
        }

        if selected >= Phase::Production {
            let params: Vec<RowParams> = report
                .knots
                .iter()
                .map(|k| RowParams {
                    timestep: k.timestep,
                    trajectories: k.trajectories,
                })
                .collect();
            let out = ctx
                .phase(
                    Phase::Production,
                    &params,
                    Some(control.source()),
                    Some(u0),
                    config.numerics.final_order,
                )
                .map_err(|e| e.in_phase("III"))?;
            if let Some(dir) = out_dir {
                ctx.write_phase(dir, "", &out).map_err(|e| e.in_phase("III"))?;
            }
            production = Some(out);
        }
        calibration = Some(report);
    }

    let last = production.as_ref().unwrap_or(&warm_up);
    let order = config.numerics.final_order;
    let dofs = order * order * plan.subdomain_count();
    let metrics = MetricsDocument {
        problem: problem.name.clone(),
        epsilon: config.run.epsilon,
        n,
        total_knots: plan.knots.len(),
        dofs,
        shrinkage: last.system.shrinkage(dofs),
        nonzero_fraction: last.system.nonzero_fraction(),
        condition_estimate: last.solve.condition_estimate,
        phases: std::iter::once(&warm_up)
            .chain(production.as_ref())
            .map(|p| p.metrics.clone())
            .collect(),
        calibration: calibration.as_ref().map(|c| CalibrationMetrics {
            mean_variance_reduction_factor: c.mean_variance_reduction_factor,
            mean_realised_reduction_factor: c.mean_realised_reduction_factor,
            mean_bias_estimate: c.mean_bias_estimate,
            total_trajectories: c.total_trajectories,
            wall_s: calibration_wall,
        }),
        variance_reduction: match (&production, &calibration) {
            (Some(p), Some(c)) => variance_reduction(&p.system, c, config.numerics.max_reduction),
            _ => None,
        },
    };
    if let Some(dir) = out_dir {
        write_file(dir, "metrics.json", |w| Ok(serde_json::to_writer_pretty(w, &metrics)?))?;
    }
    Ok(PipelineOutputs {
        plan,
        warm_up,
        calibration,
        production,
        metrics,
    })
}
