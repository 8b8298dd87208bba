//! Monte Carlo assembly of the interfacial system `G u = b`.
//!
//! Every trajectory started at knot `i` ends on a side of the knot's patch.
//! On an interface side the unknown value there is replaced by the RBF
//! interpolant of the side's stencil, which turns the Feynman-Kac score into
//! a linear combination `Σ_j Y·H_j(exit)·u_j` plus known terms. Averaging the
//! weights over trajectories gives row `i` of `G`; the known terms (source
//! integral, boundary data, Dirichlet stencil knots) give `b_i`.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Axis, DiscretisationPlan, ExitRecord, ExitSite, Side};
use crate::point::Point2;
use crate::problem::EllipticProblem;
use crate::rbf::{Stencil1D, StencilCache};
use crate::scheduler::{schedule_jobs, PoolConfig, PoolStats};
use crate::sde::{
    check_failure_rate, default_max_steps, run_ensemble, Ensemble, EnsembleCounts, GradientSource,
    IntegratorConfig, ScoreMoments, ScoreSample, StopRecord, StoppingRule, StreamKey,
};
use crate::solver::CsrMatrix;
use crate::stats::Moments;

/// Interpolation along one patch side.
#[derive(Debug, Clone)]
pub struct SegmentInterp {
    pub side: Side,
    pub axis: Axis,
    /// Axis coordinate of the first stencil knot; stencils use coordinates
    /// relative to it.
    pub origin: f64,
    pub stencil: Arc<Stencil1D>,
    pub knots: Vec<usize>,
    /// Unknown index of each stencil knot, `None` for Dirichlet knots.
    pub columns: Vec<Option<usize>>,
    /// Boundary value at each Dirichlet stencil knot (zero elsewhere).
    pub dirichlet_values: Vec<f64>,
}

impl SegmentInterp {
    pub fn cardinal_values_into(&self, p: Point2, out: &mut [f64]) -> bool {
        self.stencil.cardinal_values_into(self.axis.coord(p) - self.origin, out)
    }
}

/// The four side interpolants of one patch.
#[derive(Debug, Clone)]
pub struct PatchInterp {
    pub sides: [Option<SegmentInterp>; 4],
    /// Sorted unknown columns appearing in any side stencil.
    pub columns: Vec<usize>,
    /// Per side, the position in `columns` of each stencil knot.
    slots: [Vec<Option<usize>>; 4],
    max_len: usize,
}

impl PatchInterp {
    pub fn side(&self, side: Side) -> Option<&SegmentInterp> {
        self.sides[side.index()].as_ref()
    }

    /// Value of the interface interpolant (or of `g` on ∂Ω) at an exit,
    /// given nodal values indexed by unknown. Returns whether the exit lies
    /// outside the stencil's span.
    pub fn exit_value(
        &self,
        exit: &ExitRecord,
        nodal: &[f64],
        problem: &EllipticProblem,
        scratch: &mut Vec<f64>,
    ) -> Result<(f64, bool)> {
        match exit.site {
            ExitSite::Dirichlet(_) => Ok((problem.g.eval(exit.point), false)),
            ExitSite::Interface(side) => {
                let seg = self
                    .side(side)
                    .ok_or_else(|| Error::MissingStencil(format!("{side:?}")))?;
                scratch.resize(seg.knots.len(), 0.0);
                let extrapolated = seg.cardinal_values_into(exit.point, scratch);
                let v = scratch
                    .iter()
                    .zip(seg.columns.iter().zip(&seg.dirichlet_values))
                    .map(|(h, (col, g))| h * col.map_or(*g, |c| nodal[c]))
                    .sum();
                Ok((v, extrapolated))
            }
        }
    }
}

/// Side interpolants for every patch of a plan, sharing stencils of equal
/// shape.
#[derive(Debug, Clone)]
pub struct InterpolationTable {
    pub patches: Vec<PatchInterp>,
}

impl InterpolationTable {
    pub fn build(plan: &DiscretisationPlan, problem: &EllipticProblem, cache: &mut StencilCache) -> Result<Self> {
        let mut patches = Vec::with_capacity(plan.patches.len());
        for patch in &plan.patches {
            let mut sides: [Option<SegmentInterp>; 4] = Default::default();
            let mut cols = Vec::new();
            for seg in patch.segments.iter().flatten() {
                let axis = seg.axis();
                let coords: Vec<f64> = seg
                    .stencil
                    .iter()
                    .map(|&k| axis.coord(plan.knot(k).position))
                    .collect();
                let origin = coords[0];
                let rel: Vec<f64> = coords.iter().map(|c| c - origin).collect();
                let columns: Vec<Option<usize>> = seg.stencil.iter().map(|&k| plan.knot(k).unknown).collect();
                let dirichlet_values = seg
                    .stencil
                    .iter()
                    .map(|&k| {
                        let knot = plan.knot(k);
                        if knot.unknown.is_none() {
                            problem.g.eval(knot.position)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                cols.extend(columns.iter().flatten().copied());
                sides[seg.side.index()] = Some(SegmentInterp {
                    side: seg.side,
                    axis,
                    origin,
                    stencil: cache.get(&rel)?,
                    knots: seg.stencil.clone(),
                    columns,
                    dirichlet_values,
                });
            }
            cols.sort_unstable();
            cols.dedup();
            let slots = std::array::from_fn(|s| {
                sides[s].as_ref().map_or_else(Vec::new, |seg: &SegmentInterp| {
                    seg.columns
                        .iter()
                        .map(|c| c.map(|c| cols.binary_search(&c).expect("column listed")))
                        .collect()
                })
            });
            let max_len = sides.iter().flatten().map(|s| s.knots.len()).max().unwrap_or(0);
            patches.push(PatchInterp {
                sides,
                columns: cols,
                slots,
                max_len,
            });
        }
        Ok(InterpolationTable { patches })
    }

    pub fn patch(&self, index: usize) -> &PatchInterp {
        &self.patches[index]
    }
}

/// Running sums for one row of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAccumulator {
    pub knot: usize,
    pub row: usize,
    /// Unknown columns of the patch stencils, sorted.
    pub columns: Vec<usize>,
    /// Σ Y·H_j per column.
    pub weight_sums: Vec<f64>,
    /// Known part of each score: Z + Y·g at ∂Ω exits + Dirichlet stencil terms.
    pub beta: Moments,
    /// Σ_j Y·H_j over unknown columns.
    pub row_sum: Moments,
    pub xi: Moments,
    /// Full scores against reference nodal values, with ξ.
    pub score: ScoreMoments,
    pub extrapolations: u64,
    pub counts: EnsembleCounts,
    scratch: Vec<f64>,
}

impl RowAccumulator {
    pub fn new(knot: usize, row: usize, patch: &PatchInterp) -> Self {
        RowAccumulator {
            knot,
            row,
            columns: patch.columns.clone(),
            weight_sums: vec![0.0; patch.columns.len()],
            beta: Moments::new(),
            row_sum: Moments::new(),
            xi: Moments::new(),
            score: ScoreMoments::default(),
            extrapolations: 0,
            counts: EnsembleCounts::default(),
            scratch: vec![0.0; patch.max_len],
        }
    }

    /// Trajectories consumed.
    pub fn count(&self) -> u64 {
        self.beta.count
    }

    /// Adds `other`; the canonical reduction merges jobs in increasing order.
    pub fn merge(&mut self, other: &RowAccumulator) {
        debug_assert_eq!(self.columns, other.columns);
        for (a, b) in self.weight_sums.iter_mut().zip(&other.weight_sums) {
            *a += b;
        }
        self.beta.merge(&other.beta);
        self.row_sum.merge(&other.row_sum);
        self.xi.merge(&other.xi);
        self.score.merge(&other.score);
        self.extrapolations += other.extrapolations;
        self.counts.merge(&other.counts);
    }
}

/// Scores one stopped trajectory into its row. `reference` holds nodal values
/// used only for the score statistics.
pub fn score_trajectory_into_row(
    acc: &mut RowAccumulator,
    stop: &StopRecord,
    patch: &PatchInterp,
    problem: &EllipticProblem,
    reference: Option<&[f64]>,
) -> Result<()> {
    let y = stop.y;
    let mut beta = stop.z;
    let mut row_sum = 0.0;
    let mut interface = 0.0;
    match stop.exit.site {
        ExitSite::Dirichlet(_) => beta += y * problem.g.eval(stop.exit.point),
        ExitSite::Interface(side) => {
            let seg = patch
                .side(side)
                .ok_or_else(|| Error::MissingStencil(format!("{side:?}")))?;
            let slots = &patch.slots[side.index()];
            let h = &mut acc.scratch[..seg.knots.len()];
            if seg.cardinal_values_into(stop.exit.point, h) {
                acc.extrapolations += 1;
            }
            for (k, hk) in h.iter().enumerate() {
                let w = y * hk;
                match slots[k] {
                    Some(slot) => {
                        acc.weight_sums[slot] += w;
                        row_sum += w;
                        if let Some(r) = reference {
                            interface += w * r[acc.columns[slot]];
                        }
                    }
                    None => beta += w * seg.dirichlet_values[k],
                }
            }
        }
    }
    acc.beta.push(beta);
    acc.row_sum.push(row_sum);
    acc.xi.push(stop.xi);
    if reference.is_some() {
        acc.score.push(ScoreSample {
            gm: beta + interface,
            em: None,
            xi: stop.xi,
        });
    }
    Ok(())
}

/// Per-row diagnostics, written next to `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub knot: usize,
    pub row: usize,
    pub count: u64,
    pub timestep: f64,
    pub b: f64,
    /// Mean of the known score part, without ξ.
    pub beta_mean: f64,
    pub beta_variance: f64,
    pub xi_mean: f64,
    pub xi_std_error: f64,
    /// Variance of full scores against the reference values, if any.
    pub score_variance: Option<f64>,
    pub score_mean: Option<f64>,
    pub score_std_error: Option<f64>,
    pub corrected_mean: Option<f64>,
    pub corrected_variance: Option<f64>,
    pub corrected_std_error: Option<f64>,
    pub rho: Option<f64>,
    /// Mean and standard error of Σ_j Y·H_j over unknown columns.
    pub row_sum_mean: f64,
    pub row_sum_std_error: f64,
    pub extrapolations: u64,
    pub resampled: u64,
    pub failed: u64,
}

impl RowStats {
    /// Standard error of the row's plain or corrected score.
    pub fn std_error(&self) -> Option<f64> {
        self.corrected_std_error.or(self.score_std_error)
    }
}

/// Finalised row: `(triplets, b_i, stats)`, with `G_ii = 1` and
/// `G_ij = −mean(Y·H_j)`.
pub fn finalize_row(
    acc: &RowAccumulator,
    timestep: f64,
    with_control: bool,
) -> Result<(Vec<(usize, usize, f64)>, f64, RowStats)> {
    let n = acc.count();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let nf = n as f64;
    let mut triplets = Vec::with_capacity(acc.columns.len() + 1);
    triplets.push((acc.row, acc.row, 1.0));
    for (&col, &s) in acc.columns.iter().zip(&acc.weight_sums) {
        triplets.push((acc.row, col, -s / nf));
    }
    let b = if with_control {
        acc.beta.mean + acc.xi.mean
    } else {
        acc.beta.mean
    };
    let with_scores = acc.score.count() > 0;
    let score = &acc.score.score_xi.a;
    let stats = RowStats {
        knot: acc.knot,
        row: acc.row,
        count: n,
        timestep,
        b,
        beta_mean: acc.beta.mean,
        beta_variance: acc.beta.variance(),
        xi_mean: acc.xi.mean,
        xi_std_error: acc.xi.std_error(),
        score_variance: with_scores.then(|| score.variance()),
        score_mean: with_scores.then_some(score.mean),
        score_std_error: with_scores.then(|| score.std_error()),
        corrected_mean: (with_scores && with_control).then_some(acc.score.corrected.mean),
        corrected_variance: (with_scores && with_control).then(|| acc.score.corrected.variance()),
        corrected_std_error: (with_scores && with_control).then(|| acc.score.corrected.std_error()),
        rho: if with_scores { acc.score.score_xi.correlation() } else { None },
        row_sum_mean: acc.row_sum.mean,
        row_sum_std_error: acc.row_sum.std_error(),
        extrapolations: acc.extrapolations,
        resampled: acc.counts.resampled,
        failed: acc.counts.failed,
    };
    Ok((triplets, b, stats))
}

/// Timestep and trajectory count of one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowParams {
    pub timestep: f64,
    pub trajectories: u64,
}

/// Settings shared by every row of one assembly.
#[derive(Debug, Clone, Copy)]
pub struct AssemblySettings {
    pub trajectories_per_job: u64,
    pub seed: u64,
    /// Phase tag mixed into the random streams.
    pub phase: u64,
    pub rule: StoppingRule,
    /// Explicit step cap; by default derived from patch area and diffusivity.
    pub max_steps: Option<usize>,
}

/// One unit of work: trajectories `range` of row `row`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnotJob {
    pub row: usize,
    pub job: u64,
    pub range: Range<u64>,
}

/// Splits every row's trajectories into jobs of `per_job`, in canonical
/// (row, job) order.
pub fn knot_jobs(counts: impl IntoIterator<Item = u64>, per_job: u64) -> Result<Vec<KnotJob>> {
    if per_job == 0 {
        return Err(Error::InvalidArgument("trajectories per job must be positive".into()));
    }
    let mut jobs = Vec::new();
    for (row, n) in counts.into_iter().enumerate() {
        if n == 0 || n % per_job != 0 {
            return Err(Error::InvalidArgument(format!(
                "row {row}: {n} trajectories is not a positive multiple of {per_job}"
            )));
        }
        for job in 0..n / per_job {
            jobs.push(KnotJob {
                row,
                job,
                range: job * per_job..(job + 1) * per_job,
            });
        }
    }
    Ok(jobs)
}

/// Integrator for row `row`, with the default step cap from the patch area.
pub fn row_integrator(
    plan: &DiscretisationPlan,
    problem: &EllipticProblem,
    row: usize,
    timestep: f64,
    rule: StoppingRule,
    max_steps: Option<usize>,
) -> Result<IntegratorConfig> {
    let knot = plan.knot(plan.unknowns[row]);
    let patch = plan.patch_of(knot.id).expect("interior knot has a patch");
    let cap = max_steps.unwrap_or_else(|| {
        default_max_steps(
            patch.bbox().area(),
            problem.min_diffusion_eigenvalue(knot.position),
            timestep,
        )
    });
    IntegratorConfig::new(timestep, rule, cap)
}

/// The assembled system with per-row diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfacialSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub stats: Vec<RowStats>,
    pub control_variate: bool,
    pub counts: EnsembleCounts,
    pub pool: PoolStats,
}

impl InterfacialSystem {
    pub fn n(&self) -> usize {
        self.rhs.len()
    }

    pub fn nonzero_fraction(&self) -> f64 {
        let n = self.n() as f64;
        self.matrix.nnz() as f64 / (n * n)
    }

    /// `1 − n/M` for `M` global degrees of freedom.
    pub fn shrinkage(&self, dofs: usize) -> f64 {
        1.0 - self.n() as f64 / dofs as f64
    }

    pub fn write_matrix_market(&self, out: &mut impl Write) -> std::io::Result<()> {
        self.matrix.write_matrix_market(out)
    }

    /// CSV of `b` and row statistics.
    pub fn write_rhs_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "knot,row,b,variance,n,h,extrapolations,row_sum,row_sum_se,resampled,failed"
        )?;
        for s in &self.stats {
            let variance = s.corrected_variance.or(s.score_variance).unwrap_or(s.beta_variance);
            writeln!(
                out,
                "{},{},{:e},{:e},{},{:e},{},{:e},{:e},{},{}",
                s.knot,
                s.row,
                s.b,
                variance,
                s.count,
                s.timestep,
                s.extrapolations,
                s.row_sum_mean,
                s.row_sum_std_error,
                s.resampled,
                s.failed
            )?;
        }
        Ok(())
    }
}

/// Runs one job: trajectories `job.range` of row `job.row`.
#[allow(clippy::too_many_arguments)]
fn run_row_job(
    plan: &DiscretisationPlan,
    problem: &EllipticProblem,
    table: &InterpolationTable,
    params: &[RowParams],
    settings: &AssemblySettings,
    control: Option<&dyn GradientSource>,
    reference: Option<&[f64]>,
    job: &KnotJob,
) -> Result<RowAccumulator> {
    let knot = plan.knot(plan.unknowns[job.row]);
    let patch_index = plan.knot_patch[knot.id].expect("interior knot has a patch");
    let patch = &plan.patches[patch_index];
    let interp = table.patch(patch_index);
    let config = row_integrator(
        plan,
        problem,
        job.row,
        params[job.row].timestep,
        settings.rule,
        settings.max_steps,
    )?;
    let ens = Ensemble {
        start: knot.position,
        region: &patch.region,
        problem,
        config: &config,
        control,
        key: StreamKey {
            seed: settings.seed,
            phase: settings.phase,
            knot: knot.id as u64,
            job: job.job,
        },
    };
    let mut acc = RowAccumulator::new(knot.id, job.row, interp);
    let counts = run_ensemble(&ens, job.range.clone(), |out| {
        score_trajectory_into_row(&mut acc, &out.primary, interp, problem, reference)
    })?;
    acc.counts = counts;
    Ok(acc)
}

/// Assembles `G` and `b` over the worker pool. Rows are reduced job by job in
/// canonical order, so the result depends only on the seed and the job
/// partition.
#[allow(clippy::too_many_arguments)]
pub fn assemble_system(
    plan: &DiscretisationPlan,
    problem: &EllipticProblem,
    table: &InterpolationTable,
    params: &[RowParams],
    settings: &AssemblySettings,
    control: Option<&dyn GradientSource>,
    reference: Option<&[f64]>,
    pool: &PoolConfig,
) -> Result<InterfacialSystem> {
    let n = plan.n();
    if params.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} row parameters for {n} unknowns",
            params.len()
        )));
    }
    if let Some(r) = reference {
        if r.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} reference values for {n} unknowns",
                r.len()
            )));
        }
    }
    let jobs = knot_jobs(params.iter().map(|p| p.trajectories), settings.trajectories_per_job)?;
    let (partials, pool_stats) = schedule_jobs(
        &jobs,
        pool,
        |job| run_row_job(plan, problem, table, params, settings, control, reference, job),
        |job| format!("phase {} knot {} job {}", settings.phase, plan.unknowns[job.row], job.job),
    )?;

    let mut rows: Vec<Option<RowAccumulator>> = vec![None; n];
    for acc in partials {
        let row = acc.row;
        match &mut rows[row] {
            Some(total) => total.merge(&acc),
            slot => *slot = Some(acc),
        }
    }
    let with_control = control.is_some();
    let mut triplets = Vec::new();
    let mut rhs = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    let mut counts = EnsembleCounts::default();
    for (row, acc) in rows.into_iter().enumerate() {
        let acc = acc.expect("every row has jobs");
        check_failure_rate(&acc.counts)?;
        counts.merge(&acc.counts);
        let (t, b, s) = finalize_row(&acc, params[row].timestep, with_control)?;
        triplets.extend(t);
        rhs.push(b);
        stats.push(s);
    }
    Ok(InterfacialSystem {
        matrix: CsrMatrix::from_triplets(n, &triplets)?,
        rhs,
        stats,
        control_variate: with_control,
        counts,
        pool: pool_stats,
    })
}
