//! Chebyshev collocation on the subdomains once the interfacial values are
//! known, and the resulting piecewise field with value and gradient queries.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Axis, DiscretisationPlan, EdgeTrace, GridSpec, Rect, Side};
use crate::point::Point2;
use crate::problem::EllipticProblem;
use crate::rbf::{Stencil1D, StencilCache};
use crate::scheduler::{schedule_jobs, PoolConfig};
use crate::sde::GradientSource;

/// Collocation order used for the warm-up field.
pub const WARM_UP_ORDER: usize = 16;
/// Collocation order used for the final field.
pub const FINAL_ORDER: usize = 32;

/// `p` Chebyshev-Gauss-Lobatto points on `[a, b]`, ascending.
pub fn chebyshev_nodes(p: usize, a: f64, b: f64) -> Vec<f64> {
    let n = (p - 1) as f64;
    (0..p)
        .map(|k| {
            let t = -(std::f64::consts::PI * k as f64 / n).cos();
            0.5 * (a + b) + 0.5 * (b - a) * t
        })
        .collect()
}

fn barycentric_weights(p: usize) -> Vec<f64> {
    (0..p)
        .map(|k| {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            if k == 0 || k == p - 1 {
                0.5 * s
            } else {
                s
            }
        })
        .collect()
}

/// First-derivative collocation matrix on the given nodes.
pub fn differentiation_matrix(nodes: &[f64]) -> DMatrix<f64> {
    let p = nodes.len();
    let w = barycentric_weights(p);
    let mut d = DMatrix::zeros(p, p);
    for i in 0..p {
        let mut diag = 0.0;
        for j in 0..p {
            if i != j {
                let v = (w[j] / w[i]) / (nodes[i] - nodes[j]);
                d[(i, j)] = v;
                diag -= v;
            }
        }
        d[(i, i)] = diag;
    }
    d
}

/// `D²` with its diagonal reset so that rows annihilate constants exactly.
fn second_derivative_matrix(d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d2 = d * d;
    for i in 0..d2.nrows() {
        let off: f64 = (0..d2.ncols()).filter(|&j| j != i).map(|j| d2[(i, j)]).sum();
        d2[(i, i)] = -off;
    }
    d2
}

/// Lagrange basis values at `t` for Chebyshev-Lobatto nodes.
fn lagrange_into(nodes: &[f64], weights: &[f64], t: f64, out: &mut [f64]) {
    if let Some(k) = nodes.iter().position(|&x| x == t) {
        out.fill(0.0);
        out[k] = 1.0;
        return;
    }
    let mut total = 0.0;
    for k in 0..nodes.len() {
        let v = weights[k] / (t - nodes[k]);
        out[k] = v;
        total += v;
    }
    out.iter_mut().for_each(|v| *v /= total);
}

/// Collocation solution on one rectangle, stored as nodal values and nodal
/// derivatives on the `p × p` tensor grid (index `i + p·j`, `i` along x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubdomainSolution {
    pub rect: Rect,
    pub order: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    /// Relative residual of the collocation equations.
    pub residual: f64,
    weights: Vec<f64>,
}

impl SubdomainSolution {
    fn tensor(&self, grid: &[f64], q: Point2) -> f64 {
        let p = self.order;
        let mut lx = vec![0.0; p];
        let mut ly = vec![0.0; p];
        lagrange_into(&self.xs, &self.weights, q.x, &mut lx);
        lagrange_into(&self.ys, &self.weights, q.y, &mut ly);
        let mut s = 0.0;
        for j in 0..p {
            if ly[j] == 0.0 {
                continue;
            }
            let row: f64 = (0..p).map(|i| lx[i] * grid[i + p * j]).sum();
            s += ly[j] * row;
        }
        s
    }

    pub fn value(&self, q: Point2) -> f64 {
        self.tensor(&self.values, q)
    }

    pub fn gradient(&self, q: Point2) -> Point2 {
        Point2::new(self.tensor(&self.grad_x, q), self.tensor(&self.grad_y, q))
    }

    pub fn node(&self, i: usize, j: usize) -> Point2 {
        Point2::new(self.xs[i], self.ys[j])
    }
}

/// Solves the Dirichlet problem on `rect` with boundary values `trace` at
/// the boundary collocation nodes.
pub fn solve_subdomain(
    problem: &EllipticProblem,
    rect: Rect,
    trace: &dyn Fn(Point2) -> f64,
    order: usize,
) -> Result<SubdomainSolution> {
    if order < 8 {
        return Err(Error::InvalidArgument(format!("collocation order {order} below 8")));
    }
    let p = order;
    let xs = chebyshev_nodes(p, rect.xmin, rect.xmax);
    let ys = chebyshev_nodes(p, rect.ymin, rect.ymax);
    let dx = differentiation_matrix(&xs);
    let dy = differentiation_matrix(&ys);
    let dxx = second_derivative_matrix(&dx);
    let dyy = second_derivative_matrix(&dy);
    let n = p * p;
    let idx = |i: usize, j: usize| i + p * j;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for j in 0..p {
        for i in 0..p {
            let row = idx(i, j);
            let q = Point2::new(xs[i], ys[j]);
            if i == 0 || j == 0 || i == p - 1 || j == p - 1 {
                a[(row, row)] = 1.0;
                rhs[row] = trace(q);
                continue;
            }
            let axx = 0.5 * problem.a_xx.eval(q);
            let axy = problem.a_xy.eval(q);
            let ayy = 0.5 * problem.a_yy.eval(q);
            let drift = problem.drift(q);
            let c = problem.c.eval(q);
            for k in 0..p {
                a[(row, idx(k, j))] += axx * dxx[(i, k)] + drift.x * dx[(i, k)];
                a[(row, idx(i, k))] += ayy * dyy[(j, k)] + drift.y * dy[(j, k)];
            }
            if axy != 0.0 {
                for k in 0..p {
                    for l in 0..p {
                        a[(row, idx(k, l))] += axy * dx[(i, k)] * dy[(j, l)];
                    }
                }
            }
            a[(row, row)] += c;
            rhs[row] = problem.f.eval(q);
        }
    }
    let u = a
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularMatrix(0))?;
    let r = &a * &u - &rhs;
    let scale = a.row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
        * u.amax()
        + rhs.amax();
    let residual = if scale > 0.0 { r.amax() / scale } else { 0.0 };
    if !(residual <= 1e-10) {
        return Err(Error::NotConverged {
            residual,
            iterations: 0,
        });
    }
    let values: Vec<f64> = u.iter().copied().collect();
    let mut grad_x = vec![0.0; n];
    let mut grad_y = vec![0.0; n];
    for j in 0..p {
        for i in 0..p {
            grad_x[idx(i, j)] = (0..p).map(|k| dx[(i, k)] * values[idx(k, j)]).sum();
            grad_y[idx(i, j)] = (0..p).map(|k| dy[(j, k)] * values[idx(i, k)]).sum();
        }
    }
    Ok(SubdomainSolution {
        rect,
        order,
        xs,
        ys,
        values,
        grad_x,
        grad_y,
        residual,
        weights: barycentric_weights(p),
    })
}

/// Dirichlet data on one subdomain side.
enum SideTrace {
    Boundary,
    Knots {
        axis: Axis,
        origin: f64,
        stencil: Arc<Stencil1D>,
        values: Vec<f64>,
    },
}

impl SideTrace {
    fn eval(&self, problem: &EllipticProblem, q: Point2) -> f64 {
        match self {
            SideTrace::Boundary => problem.g.eval(q),
            SideTrace::Knots {
                axis,
                origin,
                stencil,
                values,
            } => stencil.interpolate(values, axis.coord(q) - origin),
        }
    }
}

/// Nodal values extended to every knot: unknowns from `nodal`, boundary
/// crossings from `g`.
pub fn knot_values(plan: &DiscretisationPlan, problem: &EllipticProblem, nodal: &[f64]) -> Vec<f64> {
    plan.knots
        .iter()
        .map(|k| match k.unknown {
            Some(c) => nodal[c],
            None => problem.g.eval(k.position),
        })
        .collect()
}

fn side_traces(
    plan: &DiscretisationPlan,
    index: usize,
    values: &[f64],
    cache: &mut StencilCache,
) -> Result<[SideTrace; 4]> {
    let traces = plan.subdomain_traces(index);
    let mut out: [SideTrace; 4] = std::array::from_fn(|_| SideTrace::Boundary);
    for (slot, trace) in out.iter_mut().zip(traces) {
        if let EdgeTrace::Knots { axis, knots } = trace {
            let coords: Vec<f64> = knots.iter().map(|&k| axis.coord(plan.knot(k).position)).collect();
            let origin = coords[0];
            let rel: Vec<f64> = coords.iter().map(|c| c - origin).collect();
            *slot = SideTrace::Knots {
                axis,
                origin,
                stencil: cache.get(&rel)?,
                values: knots.iter().map(|&k| values[k]).collect(),
            };
        }
    }
    Ok(out)
}

/// Piecewise collocation field over the whole grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalField {
    pub grid: GridSpec,
    pub subdomains: Vec<SubdomainSolution>,
    /// Largest value jump across an interior interface.
    pub mismatch: f64,
}

impl GlobalField {
    fn owner(&self, q: Point2) -> Result<&SubdomainSolution> {
        let dom = self.grid.domain();
        let tol = 1e-12 * (dom.width() + dom.height());
        if !(q.x >= dom.xmin - tol && q.x <= dom.xmax + tol && q.y >= dom.ymin - tol && q.y <= dom.ymax + tol) {
            return Err(Error::OutsideDomain(q));
        }
        let l = self.grid.square_side;
        let cell = |t: f64, n: usize| ((t / l).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
        let ix = cell(q.x - self.grid.origin.x, self.grid.nx);
        let iy = cell(q.y - self.grid.origin.y, self.grid.ny);
        Ok(&self.subdomains[iy * self.grid.nx + ix])
    }

    pub fn value(&self, q: Point2) -> Result<f64> {
        Ok(self.owner(q)?.value(q))
    }

    pub fn gradient(&self, q: Point2) -> Result<Point2> {
        Ok(self.owner(q)?.gradient(q))
    }

    pub fn order(&self) -> usize {
        self.subdomains.first().map_or(0, |s| s.order)
    }

    /// Global degrees of freedom `p² · subdomains`.
    pub fn dofs(&self) -> usize {
        self.order() * self.order() * self.subdomains.len()
    }

    /// Writes `x,y,u[,exact,error]` on a uniform `res × res` grid.
    pub fn write_samples_csv(
        &self,
        out: &mut impl Write,
        resolution: usize,
        exact: Option<&dyn Fn(Point2) -> f64>,
    ) -> Result<()> {
        let dom = self.grid.domain();
        if exact.is_some() {
            writeln!(out, "x,y,u,exact,error")?;
        } else {
            writeln!(out, "x,y,u")?;
        }
        let r = resolution.max(2);
        for j in 0..r {
            for i in 0..r {
                let q = Point2::new(
                    dom.xmin + dom.width() * i as f64 / (r - 1) as f64,
                    dom.ymin + dom.height() * j as f64 / (r - 1) as f64,
                );
                let u = self.value(q)?;
                match exact {
                    Some(f) => {
                        let e = f(q);
                        writeln!(out, "{:e},{:e},{:e},{:e},{:e}", q.x, q.y, u, e, u - e)?
                    }
                    None => writeln!(out, "{:e},{:e},{:e}", q.x, q.y, u)?,
                }
            }
        }
        Ok(())
    }
}

impl GradientSource for GlobalField {
    fn gradient(&self, q: Point2) -> Point2 {
        let q = self.grid.domain().clamp(q);
        self.owner(q).map(|s| s.gradient(q)).unwrap_or(Point2::new(0.0, 0.0))
    }
}

fn interface_mismatch(grid: &GridSpec, subs: &[SubdomainSolution]) -> f64 {
    let samples = 4 * subs.first().map_or(8, |s| s.order);
    let mut worst: f64 = 0.0;
    let at = |ix: usize, iy: usize| &subs[iy * grid.nx + ix];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let here = at(ix, iy);
            let rect = here.rect;
            for k in 0..=samples {
                let t = k as f64 / samples as f64;
                if ix + 1 < grid.nx {
                    let q = Point2::new(rect.xmax, rect.ymin + t * rect.height());
                    worst = worst.max((here.value(q) - at(ix + 1, iy).value(q)).abs());
                }
                if iy + 1 < grid.ny {
                    let q = Point2::new(rect.xmin + t * rect.width(), rect.ymax);
                    worst = worst.max((here.value(q) - at(ix, iy + 1).value(q)).abs());
                }
            }
        }
    }
    worst
}

/// Solves every subdomain with traces interpolated from the nodal values.
pub fn build_global_field(
    plan: &DiscretisationPlan,
    nodal: &[f64],
    problem: &EllipticProblem,
    order: usize,
    cache: &mut StencilCache,
    pool: &PoolConfig,
) -> Result<GlobalField> {
    if nodal.len() != plan.n() {
        return Err(Error::InvalidArgument(format!(
            "{} nodal values for {} unknowns",
            nodal.len(),
            plan.n()
        )));
    }
    let values = knot_values(plan, problem, nodal);
    let mut jobs = Vec::with_capacity(plan.subdomain_count());
    for index in 0..plan.subdomain_count() {
        jobs.push((index, side_traces(plan, index, &values, cache)?));
    }
    let (subdomains, _) = schedule_jobs(
        &jobs,
        &PoolConfig {
            fault_rate: 0.0,
            ..*pool
        },
        |(index, traces)| {
            let (_, _, rect) = plan.subdomain(*index);
            let trace = |q: Point2| {
                let on = |side: Side| (q - rect.side_endpoints(side).0).dot(side.inward_normal()).abs() <= 1e-12 * rect.width();
                // corners on ∂Ω take the boundary data
                let sides: Vec<Side> = Side::ALL.into_iter().filter(|s| on(*s)).collect();
                let side = sides
                    .iter()
                    .copied()
                    .find(|s| matches!(traces[s.index()], SideTrace::Boundary))
                    .or_else(|| sides.first().copied())
                    .expect("boundary node lies on a side");
                traces[side.index()].eval(problem, q)
            };
            solve_subdomain(problem, rect, &trace, order)
        },
        |(index, _)| format!("subdomain {index}"),
    )?;
    let mismatch = interface_mismatch(&plan.grid, &subdomains);
    Ok(GlobalField {
        grid: plan.grid.clone(),
        subdomains,
        mismatch,
    })
}

/// Gradient sampled on a uniform lattice and interpolated bilinearly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldTable {
    domain: Rect,
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    grad: Vec<Point2>,
}

impl FieldTable {
    /// Samples `field` with `cells_per_side` cells per subdomain side.
    pub fn build(field: &GlobalField, cells_per_side: usize) -> Result<Self> {
        let domain = field.grid.domain();
        let nx = field.grid.nx * cells_per_side.max(1);
        let ny = field.grid.ny * cells_per_side.max(1);
        let dx = domain.width() / nx as f64;
        let dy = domain.height() / ny as f64;
        let mut grad = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                let q = Point2::new(domain.xmin + i as f64 * dx, domain.ymin + j as f64 * dy);
                grad.push(field.gradient(q)?);
            }
        }
        Ok(FieldTable {
            domain,
            nx,
            ny,
            dx,
            dy,
            grad,
        })
    }

    pub fn lookup(&self, q: Point2) -> Point2 {
        let q = self.domain.clamp(q);
        let fx = (q.x - self.domain.xmin) / self.dx;
        let fy = (q.y - self.domain.ymin) / self.dy;
        let i = (fx.floor() as usize).min(self.nx - 1);
        let j = (fy.floor() as usize).min(self.ny - 1);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let w = self.nx + 1;
        let g = |i: usize, j: usize| self.grad[i + w * j];
        g(i, j) * ((1.0 - tx) * (1.0 - ty))
            + g(i + 1, j) * (tx * (1.0 - ty))
            + g(i, j + 1) * ((1.0 - tx) * ty)
            + g(i + 1, j + 1) * (tx * ty)
    }
}

impl GradientSource for FieldTable {
    fn gradient(&self, q: Point2) -> Point2 {
        self.lookup(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_discretisation;
    use crate::problem::{laplace_const, poisson_manufactured, Field, POISSON43_DOMAIN};
    use crate::rbf::DEFAULT_TARGET_CONDITION;
    use proptest::prelude::*;

    fn unit() -> Rect {
        Rect {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        }
    }

    fn laplace() -> EllipticProblem {
        EllipticProblem::laplacian("laplace", Field::Const(0.0), Field::Const(0.0))
    }

    #[test]
    fn differentiation_is_exact_on_cubics() {
        let x = chebyshev_nodes(9, -2.0, 3.0);
        let d = differentiation_matrix(&x);
        for i in 0..9 {
            let du: f64 = (0..9).map(|k| d[(i, k)] * x[k].powi(3)).sum();
            assert!((du - 3.0 * x[i] * x[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn harmonic_xy_is_reproduced() {
        let s = solve_subdomain(&laplace(), unit(), &|q| q.x * q.y, 12).unwrap();
        for (q, u) in [(Point2::new(0.3, 0.7), 0.21), (Point2::new(0.55, 0.1), 0.055)] {
            assert!((s.value(q) - u).abs() < 1e-10);
        }
        assert!(s.residual <= 1e-10);
    }

    #[test]
    fn constant_trace_gives_constant() {
        let s = solve_subdomain(&laplace(), unit(), &|_| 7.0, 10).unwrap();
        assert!(s.values.iter().all(|v| (v - 7.0).abs() < 1e-10));
        assert!(s.gradient(Point2::new(0.4, 0.4)).norm() < 1e-9);
    }

    #[test]
    fn low_order_is_rejected() {
        assert!(solve_subdomain(&laplace(), unit(), &|_| 0.0, 6).is_err());
    }

    #[test]
    fn manufactured_problem_converges_spectrally() {
        let problem = poisson_manufactured();
        let u = problem.u_exact.clone().unwrap();
        // one subdomain of the 10×10 decomposition
        let rect = Rect {
            xmin: 0.0,
            xmax: 20.0,
            ymin: 20.0,
            ymax: 40.0,
        };
        let err = |p: usize| {
            let s = solve_subdomain(&problem, rect, &|q| u(q), p).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..200 {
                let q = Point2::new(0.5 + 19.0 * ((k * 37) % 200) as f64 / 200.0, 20.5 + 19.0 * k as f64 / 200.0);
                worst = worst.max((s.value(q) - u(q)).abs());
            }
            worst
        };
        let (e8, e16) = (err(8), err(16));
        assert!(e16 * 100.0 <= e8, "{e8} -> {e16}");
    }

    #[test]
    fn anisotropic_operator_with_cross_term() {
        // u = x² − xy + 2y² under a_xx = 2, a_xy = 0.5, a_yy = 1, d = (1, 0), c = −1
        let mut problem = laplace();
        problem.a_xx = Field::Const(2.0);
        problem.a_xy = Field::Const(0.5);
        problem.a_yy = Field::Const(1.0);
        problem.d_x = Field::Const(1.0);
        problem.c = Field::Const(-1.0);
        let u = |q: Point2| q.x * q.x - q.x * q.y + 2.0 * q.y * q.y;
        // ½·2·2 + 0.5·(−1) + ½·1·4 + (2x − y) − u
        problem.f = Field::func(move |q| 2.0 - 0.5 + 2.0 + (2.0 * q.x - q.y) - u(q));
        let s = solve_subdomain(&problem, unit(), &u, 10).unwrap();
        let q = Point2::new(0.37, 0.81);
        assert!((s.value(q) - u(q)).abs() < 1e-10);
        let g = s.gradient(q);
        assert!((g.x - (2.0 * q.x - q.y)).abs() < 1e-9);
        assert!((g.y - (4.0 * q.y - q.x)).abs() < 1e-9);
    }

    fn plan(m: usize) -> DiscretisationPlan {
        build_discretisation(&GridSpec {
            origin: Point2::new(0.0, 0.0),
            square_side: 1.0,
            nx: 3,
            ny: 2,
            knots_per_interface: m,
        })
        .unwrap()
    }

    fn field_from(problem: &EllipticProblem, plan: &DiscretisationPlan, u: &dyn Fn(Point2) -> f64, p: usize) -> GlobalField {
        let nodal: Vec<f64> = plan.unknowns.iter().map(|&k| u(plan.knot(k).position)).collect();
        build_global_field(
            plan,
            &nodal,
            problem,
            p,
            &mut StencilCache::new(DEFAULT_TARGET_CONDITION),
            &PoolConfig::with_workers(2),
        )
        .unwrap()
    }

    #[test]
    fn linear_trace_has_unit_gradient() {
        let s = solve_subdomain(&laplace(), unit(), &|q| q.x, 12).unwrap();
        for q in [Point2::new(0.5, 0.5), Point2::new(1.0, 1.0), Point2::new(0.0, 0.3)] {
            let g = s.gradient(q);
            assert!((g.x - 1.0).abs() < 1e-9 && g.y.abs() < 1e-9, "{q}: {g}");
        }
    }

    /// Largest deviation of the boundary collocation values from `u`.
    fn trace_error(f: &GlobalField, u: &dyn Fn(Point2) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in &f.subdomains {
            let p = s.order;
            for j in 0..p {
                for i in 0..p {
                    if i == 0 || j == 0 || i == p - 1 || j == p - 1 {
                        worst = worst.max((s.values[i + p * j] - u(s.node(i, j))).abs());
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn linear_field_gradient_is_limited_by_trace_error() {
        let problem = EllipticProblem::laplacian("x", Field::Const(0.0), Field::func(|q| q.x));
        let pl = plan(12);
        let f = field_from(&problem, &pl, &|q| q.x, 12);
        let te = trace_error(&f, &|q| q.x);
        assert!(te < 5e-4, "{te}");
        // differentiation amplifies trace errors by at most ~p²
        for q in [Point2::new(0.5, 0.5), Point2::new(1.0, 1.0), Point2::new(2.9, 0.1), Point2::new(3.0, 2.0)] {
            let g = f.gradient(q).unwrap();
            assert!((g.x - 1.0).abs() < 144.0 * te && g.y.abs() < 144.0 * te, "{q}: {g}");
        }
        assert!(f.value(Point2::new(3.5, 0.0)).is_err());
    }

    #[test]
    fn quadratic_field_gradient() {
        let problem = EllipticProblem::laplacian("r2", Field::Const(4.0), Field::func(|q| q.x * q.x + q.y * q.y));
        let pl = plan(24);
        let u = |q: Point2| q.x * q.x + q.y * q.y;
        let f = field_from(&problem, &pl, &u, 12);
        for q in [Point2::new(0.3, 0.4), Point2::new(1.7, 1.2), Point2::new(2.5, 0.5)] {
            let g = f.gradient(q).unwrap();
            assert!((g.x - 2.0 * q.x).abs() < 1e-4 && (g.y - 2.0 * q.y).abs() < 1e-4, "{q}: {g}");
        }
        // field at a knot reproduces the nodal value up to the trace error
        let te = trace_error(&f, &u);
        let k = pl.knot(pl.unknowns[5]);
        assert!((f.value(k.position).unwrap() - u(k.position)).abs() <= 2.0 * te);
    }

    #[test]
    fn constant_nodal_values_give_constant_field() {
        let problem = laplace_const(7.0);
        let pl = plan(8);
        let f = field_from(&problem, &pl, &|_| 7.0, 10);
        // discrete maximum principle: interior deviation bounded by the trace's
        let te = trace_error(&f, &|_| 7.0);
        assert!(te < 1e-3);
        for s in &f.subdomains {
            assert!(s.values.iter().all(|v| (v - 7.0).abs() <= te + 1e-9));
        }
        assert!(f.mismatch <= te);
    }

    #[test]
    fn manufactured_field_matches_exact_solution() {
        let problem = poisson_manufactured();
        let u = problem.u_exact.clone().unwrap();
        let du = problem.grad_u_exact.clone().unwrap();
        let grid = GridSpec {
            origin: Point2::new(POISSON43_DOMAIN.xmin, POISSON43_DOMAIN.ymin),
            square_side: 20.0,
            nx: 10,
            ny: 10,
            knots_per_interface: 30,
        };
        let pl = build_discretisation(&grid).unwrap();
        let f = field_from(&problem, &pl, &|q| u(q), 16);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = Point2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            assert!((f.value(q).unwrap() - u(q)).abs() < 1e-3);
            let g = f.gradient(q).unwrap();
            assert!((g - du(q)).norm() < 1e-3, "{q}: {g} vs {}", du(q));
        }
        let table = FieldTable::build(&f, 20).unwrap();
        let q = Point2::new(13.3, -71.2);
        assert!((table.lookup(q) - du(q)).norm() < 2e-3);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(x in 0.1f64..0.9, y in 0.1f64..0.9) {
            let u = |q: Point2| (q.x * 2.0).sin() * (q.y * 2.0).sinh();
            let s = solve_subdomain(&laplace(), unit(), &u, 14).unwrap();
            let q = Point2::new(x, y);
            let e = 1e-5;
            let fd = Point2::new(
                (s.value(q + Point2::new(e, 0.0)) - s.value(q - Point2::new(e, 0.0))) / (2.0 * e),
                (s.value(q + Point2::new(0.0, e)) - s.value(q - Point2::new(0.0, e))) / (2.0 * e),
            );
            prop_assert!((s.gradient(q) - fd).norm() < 1e-6);
        }
    }
}
