//! Euler-Maruyama integration of the Feynman-Kac system
//! `dX = d dt + σ dW`, `dY = c Y dt`, `dZ = −f Y dt` inside a stopping region,
//! with naive, boundary-shifted (Gobet-Menozzi) and mixed stopping, plus the
//! pathwise control variate `ξ = ∫ Y Fᵀ dW` with `F = −σᵀ∇u₀`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ExitRecord, StoppingRegion};
use crate::point::Point2;
use crate::problem::{DiffusionFactor, EllipticProblem};
use crate::stats::{CoMoments, Moments};

/// Boundary shift constant of the Gobet-Menozzi scheme.
pub const GM_CONSTANT: f64 = 0.5826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    /// Stop at the first step outside the region.
    NaiveEm,
    /// Stop at the first step closer to the boundary than the local shift.
    GobetMenozzi,
    /// Record the shifted stop, then resume the same path to the naive stop.
    MixedGmEm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub timestep: f64,
    pub rule: StoppingRule,
    pub max_steps: usize,
}

impl IntegratorConfig {
    pub fn new(timestep: f64, rule: StoppingRule, max_steps: usize) -> Result<Self> {
        if !(timestep > 0.0) || !timestep.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "timestep must be positive, got {timestep}"
            )));
        }
        if max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        Ok(IntegratorConfig {
            timestep,
            rule,
            max_steps,
        })
    }

    /// Step cap `100 · area / λ_min(A) / h` evaluated at `probe_point`.
    pub fn with_default_cap(
        problem: &EllipticProblem,
        region: &dyn StoppingRegion,
        probe_point: Point2,
        timestep: f64,
        rule: StoppingRule,
    ) -> Result<Self> {
        let lambda = problem.min_diffusion_eigenvalue(probe_point);
        if !(lambda > 0.0) {
            problem.check_point(probe_point)?;
        }
        let cap = default_max_steps(region.area(), lambda, timestep);
        Self::new(timestep, rule, cap)
    }
}

pub fn default_max_steps(area: f64, min_eigenvalue: f64, timestep: f64) -> usize {
    let steps = (100.0 * area / min_eigenvalue / timestep).ceil();
    if steps.is_finite() && steps < usize::MAX as f64 {
        steps as usize
    } else {
        usize::MAX
    }
}

/// Gradient of a reference solution `u₀`, the control-variate source.
pub trait GradientSource: Sync {
    fn gradient(&self, p: Point2) -> Point2;
}

impl<F: Fn(Point2) -> Point2 + Sync> GradientSource for F {
    fn gradient(&self, p: Point2) -> Point2 {
        self(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeState {
    pub x: Point2,
    pub y: f64,
    pub z: f64,
    pub xi: f64,
}

impl SdeState {
    pub fn start(x: Point2) -> Self {
        SdeState {
            x,
            y: 1.0,
            z: 0.0,
            xi: 0.0,
        }
    }
}

/// Coefficient access with constant fields evaluated once.
struct Coefficients<'a> {
    problem: &'a EllipticProblem,
    sigma: Option<DiffusionFactor>,
    drift: Option<Point2>,
    c: Option<f64>,
    f: Option<f64>,
}

impl<'a> Coefficients<'a> {
    fn new(problem: &'a EllipticProblem) -> Result<Self> {
        let sigma = match (
            problem.a_xx.as_const(),
            problem.a_xy.as_const(),
            problem.a_yy.as_const(),
        ) {
            (Some(a), Some(b), Some(d)) => {
                Some(DiffusionFactor::from_matrix(Point2::default(), a, b, d)?)
            }
            _ => None,
        };
        let drift = match (problem.d_x.as_const(), problem.d_y.as_const()) {
            (Some(a), Some(b)) => Some(Point2::new(a, b)),
            _ => None,
        };
        Ok(Coefficients {
            problem,
            sigma,
            drift,
            c: problem.c.as_const(),
            f: problem.f.as_const(),
        })
    }

    #[inline]
    fn sigma(&self, p: Point2) -> Result<DiffusionFactor> {
        match self.sigma {
            Some(s) => Ok(s),
            None => self.problem.diffusion_factor(p),
        }
    }

    #[inline]
    fn step(
        &self,
        s: &SdeState,
        cv: Option<&dyn GradientSource>,
        h: f64,
        sqrt_h: f64,
        zeta: Point2,
    ) -> Result<SdeState> {
        let x = s.x;
        let sigma = self.sigma(x)?;
        let drift = self.drift.unwrap_or_else(|| self.problem.drift(x));
        let c = self.c.unwrap_or_else(|| self.problem.c.eval(x));
        let f = self.f.unwrap_or_else(|| self.problem.f.eval(x));
        let dw = zeta * sqrt_h;
        let growth = 1.0 + c * h;
        if !(growth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "timestep {h} violates |c|·h < 1 at {x} (c = {c})"
            )));
        }
        let xi = match cv {
            Some(src) => {
                let control = sigma.apply_transpose(src.gradient(x)) * -1.0;
                s.xi + s.y * control.dot(dw)
            }
            None => s.xi,
        };
        let next = SdeState {
            x: x + drift * h + sigma.apply(dw),
            y: s.y * growth,
            z: s.z - f * s.y * h,
            xi,
        };
        if !(next.x.is_finite() && next.y.is_finite() && next.z.is_finite() && next.xi.is_finite()) {
            return Err(Error::NonFinite(x));
        }
        Ok(next)
    }

    #[inline]
    fn shift(&self, foot: Point2, normal: Point2, sqrt_h: f64) -> Result<f64> {
        Ok(GM_CONSTANT * self.sigma(foot)?.apply_transpose(normal).norm() * sqrt_h)
    }
}

/// One Euler-Maruyama step driven by the standard normal pair `zeta`.
pub fn em_step(
    state: &SdeState,
    problem: &EllipticProblem,
    control: Option<&dyn GradientSource>,
    timestep: f64,
    zeta: Point2,
) -> Result<SdeState> {
    Coefficients::new(problem)?.step(state, control, timestep, timestep.sqrt(), zeta)
}

/// Inward boundary shift `0.5826 · ‖σᵀ(p) N‖ · √h` at boundary point `p`
/// with unit normal `normal`.
pub fn gm_shift(problem: &EllipticProblem, p: Point2, normal: Point2, timestep: f64) -> Result<f64> {
    Ok(GM_CONSTANT * problem.diffusion_factor(p)?.apply_transpose(normal).norm() * timestep.sqrt())
}

/// State at one stopping event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRecord {
    pub exit: ExitRecord,
    pub y: f64,
    pub z: f64,
    pub xi: f64,
    pub steps: usize,
}

impl StopRecord {
    fn at(exit: ExitRecord, s: &SdeState, steps: usize) -> Self {
        StopRecord {
            exit,
            y: s.y,
            z: s.z,
            xi: s.xi,
            steps,
        }
    }

    /// Feynman-Kac score `value · Y + Z` for a boundary value at the exit.
    pub fn score(&self, boundary_value: f64) -> f64 {
        boundary_value * self.y + self.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryOutcome {
    /// Stop under the configured rule (the shifted stop in mixed mode).
    pub primary: StopRecord,
    /// Naive stop of the resumed path, mixed mode only.
    pub em: Option<StopRecord>,
}

impl TrajectoryOutcome {
    pub fn steps(&self) -> usize {
        self.em.map_or(self.primary.steps, |e| e.steps)
    }
}

/// Integrates one path from `start` until it stops in `region`.
pub fn run_trajectory<R: Rng + ?Sized>(
    start: Point2,
    region: &dyn StoppingRegion,
    problem: &EllipticProblem,
    config: &IntegratorConfig,
    control: Option<&dyn GradientSource>,
    rng: &mut R,
) -> Result<TrajectoryOutcome> {
    let mut noise = || {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        Point2::new(a, b)
    };
    run_trajectory_with_noise(start, region, problem, config, control, &mut noise)
}

/// As [`run_trajectory`], drawing the normal pairs from `noise`.
pub fn run_trajectory_with_noise(
    start: Point2,
    region: &dyn StoppingRegion,
    problem: &EllipticProblem,
    config: &IntegratorConfig,
    control: Option<&dyn GradientSource>,
    noise: &mut dyn FnMut() -> Point2,
) -> Result<TrajectoryOutcome> {
    let coeffs = Coefficients::new(problem)?;
    let h = config.timestep;
    let sqrt_h = h.sqrt();
    let rule = config.rule;
    let mut state = SdeState::start(start);
    let mut shifted: Option<StopRecord> = None;
    for steps in 1..=config.max_steps {
        let prev = state.x;
        state = coeffs.step(&state, control, h, sqrt_h, noise())?;
        let probe = region.probe(state.x);
        if rule != StoppingRule::NaiveEm && shifted.is_none() {
            let shift = coeffs.shift(probe.foot, probe.normal, sqrt_h)?;
            if probe.distance < shift {
                let exit = if probe.distance < 0.0 {
                    region.classify_exit(prev, state.x)?
                } else {
                    ExitRecord {
                        site: probe.site,
                        point: probe.foot,
                    }
                };
                let stop = StopRecord::at(exit, &state, steps);
                if rule == StoppingRule::GobetMenozzi {
                    return Ok(TrajectoryOutcome {
                        primary: stop,
                        em: None,
                    });
                }
                shifted = Some(stop);
            }
        }
        if rule != StoppingRule::GobetMenozzi && probe.distance < 0.0 {
            let stop = StopRecord::at(region.classify_exit(prev, state.x)?, &state, steps);
            return Ok(match shifted {
                Some(primary) => TrajectoryOutcome {
                    primary,
                    em: Some(stop),
                },
                None => TrajectoryOutcome {
                    primary: stop,
                    em: None,
                },
            });
        }
    }
    Err(Error::MaxSteps(config.max_steps))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Address of a counter-based family of trajectory streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub phase: u64,
    pub knot: u64,
    pub job: u64,
}

const RESAMPLE_STREAM: u64 = 1 << 63;

impl StreamKey {
    fn base_seed(&self) -> u64 {
        [self.phase, self.knot, self.job]
            .iter()
            .fold(splitmix64(self.seed), |acc, &v| splitmix64(acc ^ splitmix64(v)))
    }

    /// Stream for trajectory `index` under this key.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed());
        rng.set_stream(index & !RESAMPLE_STREAM);
        rng
    }

    /// Alternative stream used once when trajectory `index` runs away.
    pub fn resample_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed());
        rng.set_stream(index | RESAMPLE_STREAM);
        rng
    }
}

/// Everything needed to integrate the paths of one knot.
#[derive(Clone, Copy)]
pub struct Ensemble<'a> {
    pub start: Point2,
    pub region: &'a dyn StoppingRegion,
    pub problem: &'a EllipticProblem,
    pub config: &'a IntegratorConfig,
    pub control: Option<&'a dyn GradientSource>,
    pub key: StreamKey,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleCounts {
    pub completed: u64,
    pub resampled: u64,
    pub failed: u64,
}

impl EnsembleCounts {
    pub fn merge(&mut self, other: &EnsembleCounts) {
        self.completed += other.completed;
        self.resampled += other.resampled;
        self.failed += other.failed;
    }
}

/// Runs trajectories `indices` and hands each outcome to `sink`.
///
/// A path exceeding the step cap is redrawn once on an alternative stream
/// and otherwise discarded and counted as failed.
pub fn run_ensemble(
    ens: &Ensemble<'_>,
    indices: Range<u64>,
    mut sink: impl FnMut(&TrajectoryOutcome) -> Result<()>,
) -> Result<EnsembleCounts> {
    let mut counts = EnsembleCounts::default();
    for index in indices {
        let mut rng = ens.key.rng(index);
        let first = run_trajectory(ens.start, ens.region, ens.problem, ens.config, ens.control, &mut rng);
        let outcome = match first {
            Err(Error::MaxSteps(_)) => {
                counts.resampled += 1;
                let mut alt = ens.key.resample_rng(index);
                match run_trajectory(ens.start, ens.region, ens.problem, ens.config, ens.control, &mut alt) {
                    Err(Error::MaxSteps(_)) => {
                        counts.failed += 1;
                        continue;
                    }
                    other => other?,
                }
            }
            other => other?,
        };
        counts.completed += 1;
        sink(&outcome)?;
    }
    Ok(counts)
}

/// Aborts when more than 0.01% of the trajectories were discarded.
pub fn check_failure_rate(counts: &EnsembleCounts) -> Result<()> {
    let total = counts.completed + counts.failed;
    if counts.failed * 10_000 > total {
        return Err(Error::TooManyFailures {
            failed: counts.failed,
            total,
        });
    }
    Ok(())
}

/// Per-trajectory quantities entering the score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSample {
    pub gm: f64,
    pub em: Option<f64>,
    pub xi: f64,
}

/// Mergeable moments of score samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMoments {
    /// Joint moments of (score, ξ).
    pub score_xi: CoMoments,
    /// Moments of score + ξ.
    pub corrected: Moments,
    /// Moments of score_em − score_gm over samples that carry both.
    pub em_minus_gm: Moments,
}

impl ScoreMoments {
    pub fn push(&mut self, s: ScoreSample) {
        self.score_xi.push(s.gm, s.xi);
        self.corrected.push(s.gm + s.xi);
        if let Some(em) = s.em {
            self.em_minus_gm.push(em - s.gm);
        }
    }

    pub fn merge(&mut self, other: &ScoreMoments) {
        self.score_xi.merge(&other.score_xi);
        self.corrected.merge(&other.corrected);
        self.em_minus_gm.merge(&other.em_minus_gm);
    }

    pub fn count(&self) -> u64 {
        self.score_xi.count()
    }

    pub fn statistics(&self) -> Result<ScoreStatistics> {
        let n = self.count();
        if n < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: n as usize,
            });
        }
        let rho = self.score_xi.correlation();
        let paired = self.em_minus_gm.count == n;
        Ok(ScoreStatistics {
            count: n,
            mean: self.score_xi.a.mean,
            variance: self.score_xi.a.variance(),
            mean_em_minus_gm: paired.then_some(self.em_minus_gm.mean),
            rho: rho.unwrap_or(0.0),
            degenerate: rho.is_none(),
            corrected_mean: self.corrected.mean,
            corrected_variance: self.corrected.variance(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStatistics {
    pub count: u64,
    pub mean: f64,
    /// Unbiased sample variance of the scores.
    pub variance: f64,
    /// Present when every sample carries a naive stop.
    pub mean_em_minus_gm: Option<f64>,
    /// Pearson correlation of (score, ξ); 0 when degenerate.
    pub rho: f64,
    /// The correlation is undefined because a marginal has zero spread.
    pub degenerate: bool,
    pub corrected_mean: f64,
    pub corrected_variance: f64,
}

impl ScoreStatistics {
    pub fn std_error(&self) -> f64 {
        (self.variance / self.count as f64).sqrt()
    }

    pub fn corrected_std_error(&self) -> f64 {
        (self.corrected_variance / self.count as f64).sqrt()
    }
}

pub fn estimate_statistics(samples: &[ScoreSample]) -> Result<ScoreStatistics> {
    let mut m = ScoreMoments::default();
    samples.iter().for_each(|&s| m.push(s));
    m.statistics()
}

/// Predicted variance reduction `1/(1 − ρ²)`, capped at `max_factor`.
pub fn variance_reduction_factor(rho2: f64, max_factor: f64) -> f64 {
    let rest = 1.0 - rho2.clamp(0.0, 1.0);
    if rest * max_factor <= 1.0 {
        max_factor
    } else {
        1.0 / rest
    }
}
