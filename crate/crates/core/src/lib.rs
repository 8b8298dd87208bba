//! Probabilistic sparse domain decomposition for 2D linear elliptic Dirichlet
//! problems.
//!
//! Nodal values on the artificial interfaces of a square-grid partition are
//! obtained from a sparse linear system `G u = b`. Each row comes from
//! Feynman-Kac trajectories confined to the patch around one knot; values on
//! the patch sides are expressed through 1D RBF cardinal functions of the
//! neighbouring knots. Once the nodal values are known, every subdomain is a
//! well-posed Dirichlet problem solved by Chebyshev collocation.
//!
//! The pipeline runs in three phases (warm-up, calibration, production) on
//! an in-process job queue; see [`pipeline::run_pipeline`].

// `!(x > 0.0)` is used on purpose so that NaN is rejected as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod calibration;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod point;
pub mod problem;
pub mod rbf;
pub mod report;
pub mod scheduler;
pub mod sde;
pub mod solver;
pub mod spectral;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use point::Point2;
