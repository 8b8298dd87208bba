//! Elliptic Dirichlet problems
//! `½a_xx u_xx + a_xy u_xy + ½a_yy u_yy + d·∇u + c u = f` in Ω, `u = g` on ∂Ω,
//! and the built-in analytic test problems.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Disk, Rect, RectRegion, StoppingRegion};
use crate::point::Point2;

pub type ScalarFn = Arc<dyn Fn(Point2) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Point2) -> Point2 + Send + Sync>;

/// A scalar coefficient field with a fast path for constants.
#[derive(Clone)]
pub enum Field {
    Const(f64),
    Func(ScalarFn),
}

impl Field {
    pub fn func(f: impl Fn(Point2) -> f64 + Send + Sync + 'static) -> Self {
        Field::Func(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, p: Point2) -> f64 {
        match self {
            Field::Const(v) => *v,
            Field::Func(f) => f(p),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Field::Const(v) => Some(*v),
            Field::Func(_) => None,
        }
    }
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Const(v) => write!(f, "Const({v})"),
            Field::Func(_) => f.write_str("Func(..)"),
        }
    }
}

/// Lower-triangular Cholesky factor `σ` of the diffusion matrix `A = σσᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionFactor {
    pub s11: f64,
    pub s21: f64,
    pub s22: f64,
}

impl DiffusionFactor {
    pub fn from_matrix(point: Point2, a_xx: f64, a_xy: f64, a_yy: f64) -> Result<Self> {
        let not_spd = || Error::NotPositiveDefinite {
            point,
            a_xx,
            a_xy,
            a_yy,
        };
        if !(a_xx > 0.0) {
            return Err(not_spd());
        }
        let s11 = a_xx.sqrt();
        let s21 = a_xy / s11;
        let pivot = a_yy - s21 * s21;
        if !(pivot > 0.0) {
            return Err(not_spd());
        }
        Ok(DiffusionFactor {
            s11,
            s21,
            s22: pivot.sqrt(),
        })
    }

    /// `σ v`.
    #[inline]
    pub fn apply(&self, v: Point2) -> Point2 {
        Point2::new(self.s11 * v.x, self.s21 * v.x + self.s22 * v.y)
    }

    /// `σᵀ v`.
    #[inline]
    pub fn apply_transpose(&self, v: Point2) -> Point2 {
        Point2::new(self.s11 * v.x + self.s21 * v.y, self.s22 * v.y)
    }

    /// Entries of `σσᵀ` as `(a_xx, a_xy, a_yy)`.
    pub fn reconstruct(&self) -> (f64, f64, f64) {
        (
            self.s11 * self.s11,
            self.s11 * self.s21,
            self.s21 * self.s21 + self.s22 * self.s22,
        )
    }
}

#[derive(Clone)]
pub struct EllipticProblem {
    pub name: String,
    pub a_xx: Field,
    pub a_xy: Field,
    pub a_yy: Field,
    pub d_x: Field,
    pub d_y: Field,
    /// Reaction coefficient, `c ≤ 0`.
    pub c: Field,
    pub f: Field,
    pub g: Field,
    pub u_exact: Option<ScalarFn>,
    pub grad_u_exact: Option<VectorFn>,
}

impl fmt::Debug for EllipticProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EllipticProblem")
            .field("name", &self.name)
            .field("a_xx", &self.a_xx)
            .field("a_xy", &self.a_xy)
            .field("a_yy", &self.a_yy)
            .field("c", &self.c)
            .field("has_exact", &self.u_exact.is_some())
            .finish()
    }
}

impl EllipticProblem {
    /// `u = g` on the boundary of a domain where `∇²u = f` and the generator
    /// is exactly the Laplacian (`a_xx = a_yy = 2`).
    pub fn laplacian(name: &str, f: Field, g: Field) -> Self {
        EllipticProblem {
            name: name.to_string(),
            a_xx: Field::Const(2.0),
            a_xy: Field::Const(0.0),
            a_yy: Field::Const(2.0),
            d_x: Field::Const(0.0),
            d_y: Field::Const(0.0),
            c: Field::Const(0.0),
            f,
            g,
            u_exact: None,
            grad_u_exact: None,
        }
    }

    pub fn diffusion_factor(&self, p: Point2) -> Result<DiffusionFactor> {
        diffusion_factor(self, p)
    }

    /// Smallest eigenvalue of `A` at `p`.
    pub fn min_diffusion_eigenvalue(&self, p: Point2) -> f64 {
        let a = self.a_xx.eval(p);
        let b = self.a_xy.eval(p);
        let d = self.a_yy.eval(p);
        0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
    }

    #[inline]
    pub fn drift(&self, p: Point2) -> Point2 {
        Point2::new(self.d_x.eval(p), self.d_y.eval(p))
    }

    /// Checks positive definiteness and the reaction sign at `p`.
    pub fn check_point(&self, p: Point2) -> Result<()> {
        diffusion_factor(self, p)?;
        let c = self.c.eval(p);
        if c > 0.0 {
            return Err(Error::InvalidArgument(format!(
                "reaction coefficient must be nonpositive, got {c} at {p}"
            )));
        }
        Ok(())
    }

    /// Applies the generator (including `c u`) to `u` at `p` with
    /// fourth-order central differences of step `step`.
    pub fn apply_generator_fd(&self, u: &dyn Fn(Point2) -> f64, p: Point2, step: f64) -> f64 {
        let at = |dx: f64, dy: f64| u(Point2::new(p.x + dx, p.y + dy));
        let s = step;
        let d1 = |fwd: &dyn Fn(f64) -> f64| {
            (-fwd(2.0 * s) + 8.0 * fwd(s) - 8.0 * fwd(-s) + fwd(-2.0 * s)) / (12.0 * s)
        };
        let d2 = |fwd: &dyn Fn(f64) -> f64| {
            (-fwd(2.0 * s) + 16.0 * fwd(s) - 30.0 * fwd(0.0) + 16.0 * fwd(-s) - fwd(-2.0 * s))
                / (12.0 * s * s)
        };
        let u_x = d1(&|t| at(t, 0.0));
        let u_y = d1(&|t| at(0.0, t));
        let u_xx = d2(&|t| at(t, 0.0));
        let u_yy = d2(&|t| at(0.0, t));
        // mixed derivative as a difference of first derivatives
        let u_xy = d1(&|t| {
            let g = |r: f64| at(r, t);
            (-g(2.0 * s) + 8.0 * g(s) - 8.0 * g(-s) + g(-2.0 * s)) / (12.0 * s)
        });
        0.5 * self.a_xx.eval(p) * u_xx
            + self.a_xy.eval(p) * u_xy
            + 0.5 * self.a_yy.eval(p) * u_yy
            + self.d_x.eval(p) * u_x
            + self.d_y.eval(p) * u_y
            + self.c.eval(p) * u(p)
    }
}

pub fn diffusion_factor(problem: &EllipticProblem, p: Point2) -> Result<DiffusionFactor> {
    DiffusionFactor::from_matrix(
        p,
        problem.a_xx.eval(p),
        problem.a_xy.eval(p),
        problem.a_yy.eval(p),
    )
}

/// Domain of the manufactured Poisson problem.
pub const POISSON43_DOMAIN: Rect = Rect {
    xmin: -100.0,
    xmax: 100.0,
    ymin: -100.0,
    ymax: 100.0,
};

struct Manufactured;

impl Manufactured {
    // u = 3 + sin(r)/3 + tanh(S)/3 with
    // r = sqrt(1 + x²/100 + y²/50), S = sin(3x/25 + y/20) + sin(x/20 − 3y/25)
    fn parts(p: Point2) -> (f64, f64, f64, f64) {
        let r = (1.0 + p.x * p.x / 100.0 + p.y * p.y / 50.0).sqrt();
        let a = 3.0 * p.x / 25.0 + p.y / 20.0;
        let b = p.x / 20.0 - 3.0 * p.y / 25.0;
        (r, a, b, a.sin() + b.sin())
    }

    fn value(p: Point2) -> f64 {
        let (r, _, _, s) = Self::parts(p);
        3.0 + r.sin() / 3.0 + s.tanh() / 3.0
    }

    fn gradient(p: Point2) -> Point2 {
        let (r, a, b, s) = Self::parts(p);
        let r_x = p.x / (100.0 * r);
        let r_y = p.y / (50.0 * r);
        let s_x = 3.0 / 25.0 * a.cos() + b.cos() / 20.0;
        let s_y = a.cos() / 20.0 - 3.0 / 25.0 * b.cos();
        let sech2 = 1.0 - s.tanh().powi(2);
        Point2::new(
            (r.cos() * r_x + sech2 * s_x) / 3.0,
            (r.cos() * r_y + sech2 * s_y) / 3.0,
        )
    }

    fn laplacian(p: Point2) -> f64 {
        let (r, a, b, s) = Self::parts(p);
        let r3 = r * r * r;
        let r_x = p.x / (100.0 * r);
        let r_y = p.y / (50.0 * r);
        let r_xx = 1.0 / (100.0 * r) - p.x * p.x / (1e4 * r3);
        let r_yy = 1.0 / (50.0 * r) - p.y * p.y / (2500.0 * r3);
        let lap_sin_r = r.cos() * (r_xx + r_yy) - r.sin() * (r_x * r_x + r_y * r_y);

        let s_x = 3.0 / 25.0 * a.cos() + b.cos() / 20.0;
        let s_y = a.cos() / 20.0 - 3.0 / 25.0 * b.cos();
        let lap_s = -(9.0 / 625.0 + 1.0 / 400.0) * s;
        let t = s.tanh();
        let sech2 = 1.0 - t * t;
        let lap_tanh_s = sech2 * lap_s - 2.0 * t * sech2 * (s_x * s_x + s_y * s_y);
        (lap_sin_r + lap_tanh_s) / 3.0
    }
}

/// `∇²u = f` on `[-100, 100]²` with the smooth manufactured solution
/// `u = 3 + sin(r)/3 + tanh(S)/3`.
pub fn poisson_manufactured() -> EllipticProblem {
    let mut p = EllipticProblem::laplacian(
        "poisson43",
        Field::func(Manufactured::laplacian),
        Field::func(Manufactured::value),
    );
    p.u_exact = Some(Arc::new(Manufactured::value));
    p.grad_u_exact = Some(Arc::new(Manufactured::gradient));
    p
}

/// Laplace's equation with constant Dirichlet data.
pub fn laplace_const(value: f64) -> EllipticProblem {
    let mut p = EllipticProblem::laplacian("laplace_const", Field::Const(0.0), Field::Const(value));
    p.u_exact = Some(Arc::new(move |_| value));
    p.grad_u_exact = Some(Arc::new(|_| Point2::new(0.0, 0.0)));
    p
}

/// Region on which a mean first-exit time is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExitRegion {
    Disk { center: Point2, radius: f64 },
    Square { center: Point2, side: f64 },
}

impl ExitRegion {
    pub fn stopping_region(&self) -> Box<dyn StoppingRegion> {
        match *self {
            ExitRegion::Disk { center, radius } => Box::new(Disk { center, radius }),
            ExitRegion::Square { center, side } => {
                Box::new(RectRegion::dirichlet_square(center, side))
            }
        }
    }

    pub fn center(&self) -> Point2 {
        match *self {
            ExitRegion::Disk { center, .. } | ExitRegion::Square { center, .. } => center,
        }
    }
}

// Mean exit time of standard 2D Brownian motion scaled so that the
// generator is ∇²: -∇²u = 1 on the square [0, side]², u = 0 on its boundary.
fn square_exit_time(side: f64, x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    let mut sum = 0.0;
    for m in (1..400).step_by(2) {
        let sx = (m as f64 * PI * x / side).sin();
        for n in (1..400).step_by(2) {
            let (mf, nf) = (m as f64, n as f64);
            let sy = (nf * PI * y / side).sin();
            sum += 16.0 / (PI.powi(4) * mf * nf * (mf * mf + nf * nf)) * sx * sy;
        }
    }
    sum * side * side
}

/// Problem whose solution is the mean first-exit time from `region` of the
/// diffusion with generator `diffusivity · ∇²`.
pub fn exit_time_problem(region: ExitRegion, diffusivity: f64) -> Result<EllipticProblem> {
    if !(diffusivity > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "diffusivity must be positive, got {diffusivity}"
        )));
    }
    let a = 2.0 * diffusivity;
    let mut p = EllipticProblem::laplacian("exit_time", Field::Const(-1.0), Field::Const(0.0));
    p.a_xx = Field::Const(a);
    p.a_yy = Field::Const(a);
    let u: ScalarFn = match region {
        ExitRegion::Disk { center, radius } => {
            if !(radius > 0.0) {
                return Err(Error::InvalidArgument("disk radius must be positive".into()));
            }
            p.name = "exit_time_disk".into();
            Arc::new(move |q: Point2| {
                let r2 = (q - center).dot(q - center);
                (radius * radius - r2).max(0.0) / (4.0 * diffusivity)
            })
        }
        ExitRegion::Square { center, side } => {
            if !(side > 0.0) {
                return Err(Error::InvalidArgument("square side must be positive".into()));
            }
            p.name = "exit_time_square".into();
            Arc::new(move |q: Point2| {
                let x = q.x - center.x + side / 2.0;
                let y = q.y - center.y + side / 2.0;
                square_exit_time(side, x, y) / diffusivity
            })
        }
    };
    p.u_exact = Some(u);
    Ok(p)
}

/// Free-form numeric parameters of a named problem.
pub type ProblemParams = BTreeMap<String, f64>;

type Builder = Arc<dyn Fn(&ProblemParams) -> Result<EllipticProblem> + Send + Sync>;

/// Problems selectable by name.
#[derive(Clone)]
pub struct ProblemRegistry {
    builders: BTreeMap<String, Builder>,
}

impl Default for ProblemRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn param(params: &ProblemParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

impl ProblemRegistry {
    pub fn empty() -> Self {
        ProblemRegistry {
            builders: BTreeMap::new(),
        }
    }

    /// `poisson43`, `laplace_const` (`value`), `exit_time_disk` (`radius`,
    /// `diffusivity`) and `exit_time_square` (`side`, `diffusivity`).
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("poisson43", |_| Ok(poisson_manufactured()));
        r.register("laplace_const", |p| Ok(laplace_const(param(p, "value", 7.0))));
        r.register("exit_time_disk", |p| {
            exit_time_problem(
                ExitRegion::Disk {
                    center: Point2::new(0.0, 0.0),
                    radius: param(p, "radius", 1.0),
                },
                param(p, "diffusivity", 1.0),
            )
        });
        r.register("exit_time_square", |p| {
            exit_time_problem(
                ExitRegion::Square {
                    center: Point2::new(0.0, 0.0),
                    side: param(p, "side", 1.0),
                },
                param(p, "diffusivity", 1.0),
            )
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        builder: impl Fn(&ProblemParams) -> Result<EllipticProblem> + Send + Sync + 'static,
    ) {
        self.builders.insert(name.to_string(), Arc::new(builder));
    }

    pub fn build(&self, name: &str, params: &ProblemParams) -> Result<EllipticProblem> {
        let b = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
        b(params)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }
}
