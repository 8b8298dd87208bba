//! Metrics document summarising a run.

use serde::{Deserialize, Serialize};

use crate::assembly::InterfacialSystem;
use crate::calibration::CalibrationReport;
use crate::geometry::DiscretisationPlan;
use crate::point::Point2;
use crate::problem::EllipticProblem;
use crate::spectral::GlobalField;

const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from 0 to the largest value.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let top = values.iter().copied().fold(0.0, f64::max);
        let width = if top > 0.0 { top / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|k| k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let k = ((v / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }
}

/// Nodal errors against the exact solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub max_error: f64,
    pub rmse: f64,
    pub fraction_below_epsilon: f64,
    pub histogram: Histogram,
}

pub fn nodal_errors(plan: &DiscretisationPlan, problem: &EllipticProblem, u: &[f64]) -> Option<Vec<f64>> {
    let exact = problem.u_exact.as_ref()?;
    Some(
        plan.unknowns
            .iter()
            .zip(u)
            .map(|(&k, v)| (v - exact(plan.knot(k).position)).abs())
            .collect(),
    )
}

pub fn error_summary(plan: &DiscretisationPlan, problem: &EllipticProblem, u: &[f64], epsilon: f64) -> Option<ErrorSummary> {
    let errors = nodal_errors(plan, problem, u)?;
    let n = errors.len() as f64;
    Some(ErrorSummary {
        max_error: errors.iter().copied().fold(0.0, f64::max),
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        fraction_below_epsilon: errors.iter().filter(|&&e| e < epsilon).count() as f64 / n,
        histogram: Histogram::of(&errors, HISTOGRAM_BINS),
    })
}

/// Largest field error on a `samples × samples` lattice.
pub fn field_max_error(field: &GlobalField, problem: &EllipticProblem, samples: usize) -> Option<f64> {
    let exact = problem.u_exact.as_ref()?;
    let dom = field.grid.domain();
    let r = samples.max(2);
    let mut worst: f64 = 0.0;
    for j in 0..r {
        for i in 0..r {
            let q = Point2::new(
                dom.xmin + dom.width() * i as f64 / (r - 1) as f64,
                dom.ymin + dom.height() * j as f64 / (r - 1) as f64,
            );
            worst = worst.max((field.value(q).ok()? - exact(q)).abs());
        }
    }
    Some(worst)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub monte_carlo_s: f64,
    pub solve_s: f64,
    pub field_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: String,
    pub n: usize,
    pub trajectories: u64,
    pub nonzero_fraction: f64,
    pub condition_estimate: f64,
    pub residual_inf: f64,
    pub errors: Option<ErrorSummary>,
    pub field_max_error: Option<f64>,
    pub interface_mismatch: f64,
    pub extrapolations: u64,
    pub timings: PhaseTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub mean_variance_reduction_factor: f64,
    pub mean_realised_reduction_factor: f64,
    pub mean_bias_estimate: f64,
    pub total_trajectories: u64,
    pub wall_s: f64,
}

/// Realised variance reduction in production against the calibration
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReduction {
    /// Mean over knots of `Var(score) / Var(score + ξ)`.
    pub mean_realised_factor: f64,
    /// Fraction of knots whose realised factor reaches `1/(1 − ρ²)`.
    pub fraction_meeting_prediction: f64,
}

pub fn variance_reduction(system: &InterfacialSystem, calibration: &CalibrationReport, cap: f64) -> Option<VarianceReduction> {
    let mut factors = Vec::new();
    let mut met = 0usize;
    for (s, k) in system.stats.iter().zip(&calibration.knots) {
        let (Some(v), Some(vc)) = (s.score_variance, s.corrected_variance) else {
            return None;
        };
        let f = if vc > 0.0 { (v / vc).min(cap) } else { cap };
        if f >= k.predicted_reduction {
            met += 1;
        }
        factors.push(f);
    }
    if factors.is_empty() {
        return None;
    }
    Some(VarianceReduction {
        mean_realised_factor: factors.iter().sum::<f64>() / factors.len() as f64,
        fraction_meeting_prediction: met as f64 / factors.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub problem: String,
    pub epsilon: f64,
    /// Unknowns (interior interfacial knots).
    pub n: usize,
    /// All interfacial knots, including boundary crossings.
    pub total_knots: usize,
    /// `p² ·` subdomains at the final collocation order.
    pub dofs: usize,
    /// `1 − n/M`.
    pub shrinkage: f64,
    pub nonzero_fraction: f64,
    pub condition_estimate: f64,
    pub phases: Vec<PhaseMetrics>,
    pub calibration: Option<CalibrationMetrics>,
    pub variance_reduction: Option<VarianceReduction>,
}

impl MetricsDocument {
    pub fn phase(&self, label: &str) -> Option<&PhaseMetrics> {
        self.phases.iter().find(|p| p.phase == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_discretisation, GridSpec};
    use crate::problem::{laplace_const, Field};

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::of(&[0.0, 0.1, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        assert_eq!(h.edges.len(), 5);
        assert_eq!(Histogram::of(&[0.0, 0.0], 3).counts, vec![2, 0, 0]);
    }

    #[test]
    fn error_fields_follow_exact_solution_availability() {
        let plan = build_discretisation(&GridSpec {
            origin: Point2::new(0.0, 0.0),
            square_side: 1.0,
            nx: 2,
            ny: 2,
            knots_per_interface: 3,
        })
        .unwrap();
        let mut u = vec![7.0; plan.n()];
        u[0] = 7.5;
        let s = error_summary(&plan, &laplace_const(7.0), &u, 0.1).unwrap();
        assert_eq!(s.max_error, 0.5);
        assert!((s.rmse - (0.25 / plan.n() as f64).sqrt()).abs() < 1e-15);
        assert!((s.fraction_below_epsilon - (plan.n() - 1) as f64 / plan.n() as f64).abs() < 1e-15);
        let unknown = EllipticProblem::laplacian("x", Field::Const(0.0), Field::Const(7.0));
        assert!(error_summary(&plan, &unknown, &u, 0.1).is_none());
    }
}
