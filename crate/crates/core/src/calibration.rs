//! Calibration: per-knot bias bounds, score variances and control-variate
//! correlations, turned into a timestep `h_i` and trajectory count `N_i`
//! for each knot.
//!
//! Each knot runs paired trajectories: one noise path is stopped first by the
//! shifted (Gobet-Menozzi) test and then continued to the naive stop, so the
//! difference of the two scores estimates the timestep bias of the shifted
//! scheme. Scores are evaluated against the warm-up nodal values.

use serde::{Deserialize, Serialize};

use crate::assembly::{knot_jobs, row_integrator, InterpolationTable, KnotJob};
use crate::error::{Error, Result};
use crate::geometry::DiscretisationPlan;
use crate::problem::EllipticProblem;
use crate::scheduler::{schedule_jobs, PoolConfig};
use crate::sde::{
    check_failure_rate, run_ensemble, variance_reduction_factor, Ensemble, EnsembleCounts, GradientSource,
    ScoreMoments, ScoreSample, StoppingRule, StreamKey,
};

/// ρ² is capped below one before use.
pub const RHO2_CAP: f64 = 1.0 - 1e-6;

/// Bias bound `½·|mean(score_em − score_gm)|` from paired samples.
pub fn estimate_bias(samples: &[ScoreSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut sum = 0.0;
    for s in samples {
        let em = s
            .em
            .ok_or_else(|| Error::InvalidArgument("bias estimate needs paired shifted/naive samples".into()))?;
        sum += em - s.gm;
    }
    Ok(bias_bound(sum / samples.len() as f64))
}

/// Bias bound from a mean paired difference.
pub fn bias_bound(mean_em_minus_gm: f64) -> f64 {
    0.5 * mean_em_minus_gm.abs()
}

/// `h_i = min(h₀, 2·h'₀·ε / (3·|mean(gm − em)|))`, `h₀` when the difference
/// vanishes.
pub fn set_timestep(mean_difference: f64, epsilon: f64, h0: f64, h0_prime: f64) -> f64 {
    let d = mean_difference.abs();
    if d == 0.0 {
        return h0;
    }
    h0.min(2.0 * h0_prime * epsilon / (3.0 * d))
}

/// `N = 9·V·(1 − ρ²)/ε²` rounded to the nearest multiple of `n_job` (ties
/// upward), at least `n_job`.
pub fn set_trajectory_count(variance: f64, rho2: f64, epsilon: f64, n_job: u64) -> u64 {
    let rho2 = rho2.clamp(0.0, RHO2_CAP);
    let n = 9.0 * variance.max(0.0) * (1.0 - rho2) / (epsilon * epsilon);
    let q = n / n_job as f64;
    // the relative nudge keeps exact ties such as 40.5 from rounding down
    // after floating-point error in the quotient
    let k = (q + 0.5 + 1e-9 * q.max(1.0)).floor();
    let k = if k.is_finite() { k.max(1.0) as u64 } else { u64::MAX / n_job };
    k * n_job
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotCalibration {
    pub knot: usize,
    pub row: usize,
    pub samples: u64,
    pub mean_score: f64,
    /// `½·|mean(score_em − score_gm)|`.
    pub bias_estimate: f64,
    pub mean_em_minus_gm: f64,
    pub variance: f64,
    pub rho2: f64,
    pub corrected_mean: f64,
    /// Realised variance of score + ξ.
    pub corrected_variance: f64,
    /// Predicted `1/(1 − ρ²)`.
    pub predicted_reduction: f64,
    pub timestep: f64,
    pub trajectories: u64,
    pub extrapolations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub epsilon: f64,
    pub h0: f64,
    pub h0_prime: f64,
    pub n0_prime: u64,
    pub trajectories_per_job: u64,
    pub knots: Vec<KnotCalibration>,
    pub mean_variance_reduction_factor: f64,
    pub mean_realised_reduction_factor: f64,
    pub mean_bias_estimate: f64,
    pub total_trajectories: u64,
    pub counts: EnsembleCounts,
}

impl CalibrationReport {
    pub fn timesteps(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.timestep).collect()
    }

    pub fn trajectory_counts(&self) -> Vec<u64> {
        self.knots.iter().map(|k| k.trajectories).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationSettings {
    pub epsilon: f64,
    pub h0: f64,
    pub h0_prime: f64,
    pub n0_prime: u64,
    pub trajectories_per_job: u64,
    pub seed: u64,
    pub phase: u64,
    pub max_steps: Option<usize>,
    /// Largest reduction factor reported for a single knot.
    pub max_reduction: f64,
}

struct CalibrationPartial {
    moments: ScoreMoments,
    extrapolations: u64,
    counts: EnsembleCounts,
}

#[allow(clippy::too_many_arguments)]
fn calibrate_job(
    plan: &DiscretisationPlan,
    problem: &EllipticProblem,
    table: &InterpolationTable,
    u0: &[f64],
    control: &dyn GradientSource,
    settings: &CalibrationSettings,
    job: &KnotJob,
) -> Result<CalibrationPartial> {
    let knot = plan.knot(plan.unknowns[job.row]);
    let patch_index = plan.knot_patch[knot.id].expect("interior knot has a patch");
    let interp = table.patch(patch_index);
    let config = row_integrator(
        plan,
        problem,
        job.row,
        settings.h0_prime,
        StoppingRule::MixedGmEm,
        settings.max_steps,
    )?;
    let ens = Ensemble {
        start: knot.position,
        region: &plan.patches[patch_index].region,
        problem,
        config: &config,
        control: Some(control),
        key: StreamKey {
            seed: settings.seed,
            phase: settings.phase,
            knot: knot.id as u64,
            job: job.job,
        },
    };
    let mut partial = CalibrationPartial {
        moments: ScoreMoments::default(),
        extrapolations: 0,
        counts: EnsembleCounts::default(),
    };
    let mut scratch = Vec::new();
    partial.counts = run_ensemble(&ens, job.range.clone(), |out| {
        let gm = &out.primary;
        let em = out
            .em
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("calibration needs mixed outcomes".into()))?;
        let (v_gm, x_gm) = interp.exit_value(&gm.exit, u0, problem, &mut scratch)?;
        let (v_em, x_em) = interp.exit_value(&em.exit, u0, problem, &mut scratch)?;
        partial.extrapolations += u64::from(x_gm) + u64::from(x_em);
        partial.moments.push(ScoreSample {
            gm: gm.score(v_gm),
            em: Some(em.score(v_em)),
            xi: gm.xi,
        });
        Ok(())
    })?;
    Ok(partial)
}

/// Runs the paired calibration trajectories for every unknown and derives
/// `{h_i, N_i}`.
pub fn run_calibration(
    plan: &DiscretisationPlan,
    problem: &EllipticProblem,
    table: &InterpolationTable,
    u0: &[f64],
    control: &dyn GradientSource,
    settings: &CalibrationSettings,
    pool: &PoolConfig,
) -> Result<CalibrationReport> {
    if !(settings.epsilon > 0.0) {
        return Err(Error::InvalidArgument("accuracy target must be positive".into()));
    }
    let n = plan.n();
    if u0.len() != n {
        return Err(Error::InvalidArgument(format!("{} warm-up values for {n} unknowns", u0.len())));
    }
    let jobs = knot_jobs(std::iter::repeat_n(settings.n0_prime, n), settings.trajectories_per_job)?;
    let (partials, _) = schedule_jobs(
        &jobs,
        pool,
        |job| calibrate_job(plan, problem, table, u0, control, settings, job),
        |job| format!("phase {} knot {} job {}", settings.phase, plan.unknowns[job.row], job.job),
    )?;
    let mut rows: Vec<Option<CalibrationPartial>> = (0..n).map(|_| None).collect();
    for (job, part) in jobs.iter().zip(partials) {
        match &mut rows[job.row] {
            Some(total) => {
                total.moments.merge(&part.moments);
                total.extrapolations += part.extrapolations;
                total.counts.merge(&part.counts);
            }
            slot => *slot = Some(part),
        }
    }
    let mut knots = Vec::with_capacity(n);
    let mut counts = EnsembleCounts::default();
    for (row, part) in rows.into_iter().enumerate() {
        let part = part.expect("every row has jobs");
        check_failure_rate(&part.counts)?;
        counts.merge(&part.counts);
        let stats = part.moments.statistics()?;
        let mean_diff = stats.mean_em_minus_gm.expect("paired samples");
        let rho2 = (stats.rho * stats.rho).min(RHO2_CAP);
        knots.push(KnotCalibration {
            knot: plan.unknowns[row],
            row,
            samples: stats.count,
            mean_score: stats.mean,
            bias_estimate: bias_bound(mean_diff),
            mean_em_minus_gm: mean_diff,
            variance: stats.variance,
            rho2,
            corrected_mean: stats.corrected_mean,
            corrected_variance: stats.corrected_variance,
            predicted_reduction: variance_reduction_factor(rho2, settings.max_reduction),
            timestep: set_timestep(mean_diff, settings.epsilon, settings.h0, settings.h0_prime),
            trajectories: set_trajectory_count(
                stats.variance,
                rho2,
                settings.epsilon,
                settings.trajectories_per_job,
            ),
            extrapolations: part.extrapolations,
        });
    }
    let nf = n as f64;
    let realised: Vec<f64> = knots
        .iter()
        .filter(|k| k.corrected_variance > 0.0)
        .map(|k| (k.variance / k.corrected_variance).min(settings.max_reduction))
        .collect();
    Ok(CalibrationReport {
        epsilon: settings.epsilon,
        h0: settings.h0,
        h0_prime: settings.h0_prime,
        n0_prime: settings.n0_prime,
        trajectories_per_job: settings.trajectories_per_job,
        mean_variance_reduction_factor: knots.iter().map(|k| k.predicted_reduction).sum::<f64>() / nf,
        mean_realised_reduction_factor: if realised.is_empty() {
            1.0
        } else {
            realised.iter().sum::<f64>() / realised.len() as f64
        },
        mean_bias_estimate: knots.iter().map(|k| k.bias_estimate).sum::<f64>() / nf,
        total_trajectories: knots.iter().map(|k| k.trajectories).sum(),
        knots,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(gm: f64, em: f64) -> ScoreSample {
        ScoreSample {
            gm,
            em: Some(em),
            xi: 0.0,
        }
    }

    #[test]
    fn identical_stops_give_zero_bias() {
        let s: Vec<_> = (0..10).map(|k| pair(k as f64, k as f64)).collect();
        assert_eq!(estimate_bias(&s).unwrap(), 0.0);
    }

    #[test]
    fn constant_difference_halves() {
        let s: Vec<_> = (0..10).map(|k| pair(k as f64 * 0.1, k as f64 * 0.1 + 0.004)).collect();
        assert!((estimate_bias(&s).unwrap() - 0.002).abs() < 1e-15);
    }

    #[test]
    fn unpaired_samples_are_rejected() {
        let s = [ScoreSample {
            gm: 1.0,
            em: None,
            xi: 0.0,
        }];
        assert!(estimate_bias(&s).is_err());
        assert!(estimate_bias(&[]).is_err());
    }

    #[test]
    fn timestep_rule() {
        assert_eq!(set_timestep(0.002, 0.01, 0.08, 0.08), 0.08);
        let h = set_timestep(-0.2, 0.01, 0.08, 0.08);
        assert!((h - 0.0026666666666666666).abs() < 1e-15);
        assert_eq!(set_timestep(0.0, 0.01, 0.08, 0.08), 0.08);
    }

    #[test]
    fn trajectory_count_rule() {
        assert_eq!(set_trajectory_count(0.09, 0.0, 0.01, 200), 8200);
        assert_eq!(set_trajectory_count(0.18, 0.5, 0.01, 200), 8200);
        assert_eq!(set_trajectory_count(0.0, 0.0, 0.01, 200), 200);
        assert_eq!(set_trajectory_count(5.0, 1.0, 0.01, 200), 200);
        assert_eq!(set_trajectory_count(0.0889, 0.0, 0.01, 200), 8000);
    }

    proptest! {
        #[test]
        fn count_is_monotone_and_a_multiple(v in 0.0f64..10.0, dv in 0.0f64..1.0, rho2 in 0.0f64..1.0, eps in 0.001f64..0.1, de in 0.0f64..0.05, job in 1u64..500) {
            let n = set_trajectory_count(v, rho2, eps, job);
            prop_assert!(n >= job && n.is_multiple_of(job));
            prop_assert!(set_trajectory_count(v + dv, rho2, eps, job) >= n);
            prop_assert!(set_trajectory_count(v, rho2, eps + de, job) <= n);
        }

        #[test]
        fn timestep_never_exceeds_h0(d in -1.0f64..1.0, eps in 1e-4f64..0.1, h0 in 1e-3f64..0.5) {
            prop_assert!(set_timestep(d, eps, h0, h0) <= h0);
        }
    }
}
