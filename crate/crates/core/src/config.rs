//! Run configuration, read from TOML.
//!
//! ```toml
//! [problem]
//! name = "poisson43"
//!
//! [grid]
//! origin = [-100.0, -100.0]
//! square_side = 40.0
//! nx = 5
//! ny = 5
//! knots_per_interface = 32
//!
//! [run]
//! epsilon = 0.02
//! n0 = 1000
//! h0 = 0.08
//! trajectories_per_job = 200
//! seed = 1
//! ```
//!
//! Every other key has a default; see the field docs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::point::Point2;
use crate::problem::ProblemParams;
use crate::rbf::DEFAULT_TARGET_CONDITION;
use crate::scheduler::PoolConfig;
use crate::solver::SolveMethod;
use crate::spectral::{FINAL_ORDER, WARM_UP_ORDER};

/// Last phase to run; each phase includes the ones before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    WarmUp,
    #[serde(rename = "II")]
    Calibration,
    #[serde(rename = "III", alias = "all")]
    Production,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::WarmUp => "I",
            Phase::Calibration => "II",
            Phase::Production => "III",
        }
    }

    /// Tag mixed into the random streams of the phase.
    pub fn stream_tag(self) -> u64 {
        match self {
            Phase::WarmUp => 1,
            Phase::Calibration => 2,
            Phase::Production => 3,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Phase::WarmUp),
            "II" | "2" => Ok(Phase::Calibration),
            "III" | "3" | "all" => Ok(Phase::Production),
            other => Err(Error::Config(format!("unknown phase '{other}' (expected I, II, III or all)"))),
        }
    }
}

/// Source of `∇u₀` for the control variate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// Direct evaluation of the collocation field.
    Spectral,
    /// Bilinear look-up table sampled from the field.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    #[serde(default)]
    pub params: ProblemParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub origin: [f64; 2],
    pub square_side: f64,
    pub nx: usize,
    pub ny: usize,
    pub knots_per_interface: usize,
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            origin: Point2::new(self.origin[0], self.origin[1]),
            square_side: self.square_side,
            nx: self.nx,
            ny: self.ny,
            knots_per_interface: self.knots_per_interface,
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_retry_budget() -> u32 {
    3
}

fn default_phase() -> Phase {
    Phase::Production
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Accuracy target ε.
    pub epsilon: f64,
    /// Warm-up trajectories per knot.
    pub n0: u64,
    /// Warm-up timestep.
    pub h0: f64,
    /// Calibration trajectories per knot; defaults to `n0`.
    #[serde(default)]
    pub n0_prime: Option<u64>,
    /// Calibration timestep; defaults to `h0`.
    #[serde(default)]
    pub h0_prime: Option<f64>,
    pub trajectories_per_job: u64,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_phase")]
    pub phase: Phase,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Probability that a job attempt is lost (testing only).
    #[serde(default)]
    pub fault_rate: f64,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    /// Condition number the RBF shape parameters are tuned to.
    pub target_condition: f64,
    pub warm_up_order: usize,
    pub final_order: usize,
    pub control: ControlSource,
    /// Look-up table cells per subdomain side.
    pub table_cells: usize,
    /// Step cap per trajectory; derived from patch size when absent.
    pub max_steps: Option<usize>,
    pub solver: SolveMethod,
    /// Field samples per axis in the CSV output.
    pub field_samples: usize,
    /// Upper clamp on reported variance reduction factors.
    pub max_reduction: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        NumericsSection {
            target_condition: DEFAULT_TARGET_CONDITION,
            warm_up_order: WARM_UP_ORDER,
            final_order: FINAL_ORDER,
            control: ControlSource::Spectral,
            table_cells: 40,
            max_steps: None,
            solver: SolveMethod::SparseLu,
            field_samples: 101,
            max_reduction: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub run: RunSection,
    #[serde(default)]
    pub numerics: NumericsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn n0_prime(&self) -> u64 {
        self.run.n0_prime.unwrap_or(self.run.n0)
    }

    pub fn h0_prime(&self) -> f64 {
        self.run.h0_prime.unwrap_or(self.run.h0)
    }

    pub fn pool(&self) -> PoolConfig {
        PoolConfig {
            workers: self.run.workers,
            retry_budget: self.run.retry_budget,
            fault_rate: self.run.fault_rate,
            fault_seed: self.run.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        let bad = |m: String| Err(Error::Config(m));
        if !(r.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", r.epsilon));
        }
        if !(r.h0 > 0.0) || !(self.h0_prime() > 0.0) {
            return bad("timesteps must be positive".into());
        }
        if r.trajectories_per_job == 0 {
            return bad("trajectories_per_job must be positive".into());
        }
        for (name, n) in [("n0", r.n0), ("n0_prime", self.n0_prime())] {
            if n == 0 || n % r.trajectories_per_job != 0 {
                return bad(format!(
                    "{name} = {n} is not a positive multiple of trajectories_per_job = {}",
                    r.trajectories_per_job
                ));
            }
        }
        if r.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&r.fault_rate) {
            return bad(format!("fault_rate {} outside [0, 1)", r.fault_rate));
        }
        let n = &self.numerics;
        if n.warm_up_order < 8 || n.final_order < 8 {
            return bad("collocation orders must be at least 8".into());
        }
        if n.table_cells == 0 {
            return bad("table_cells must be positive".into());
        }
        self.grid.spec().validate().map_err(|e| Error::Config(e.to_string()))
    }
}
