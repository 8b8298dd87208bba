//! Grid discretisation: squares, subdomains, knots, patches, segments and
//! stencils, plus the point-location queries used while integrating
//! trajectories.
//!
//! The domain is always an exact union of grid squares,
//! `origin + [0, nx·side] × [0, ny·side]`. Every slab therefore lies inside
//! the closed domain and each of its sides is either an artificial interface
//! or lies entirely on the physical boundary.
//!
//! Knot numbering is deterministic: knots on horizontal interfaces first
//! (bottom to top, then left to right), then knots on vertical interfaces
//! (left to right, then bottom to top), then crossings in row-major order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Point2,
    pub square_side: f64,
    pub nx: usize,
    pub ny: usize,
    /// Knots strictly between two adjacent crossings.
    pub knots_per_interface: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.square_side > 0.0) || !self.square_side.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "square side must be positive, got {}",
                self.square_side
            )));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 squares per axis, got {}x{}",
                self.nx, self.ny
            )));
        }
        if self.knots_per_interface == 0 {
            return Err(Error::InvalidGrid(
                "knots_per_interface must be positive".into(),
            ));
        }
        if !self.origin.is_finite() {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn domain(&self) -> Rect {
        Rect {
            xmin: self.origin.x,
            xmax: self.origin.x + self.nx as f64 * self.square_side,
            ymin: self.origin.y,
            ymax: self.origin.y + self.ny as f64 * self.square_side,
        }
    }

    /// Distance between consecutive knots along an interface.
    pub fn knot_spacing(&self) -> f64 {
        self.square_side / (self.knots_per_interface + 1) as f64
    }

    /// Number of knots a stencil is extended by past each segment end.
    pub fn extension_knots(&self) -> usize {
        (self.knots_per_interface / 2).max(1)
    }

    pub fn square(&self, ix: usize, iy: usize) -> Rect {
        let l = self.square_side;
        Rect {
            xmin: self.origin.x + ix as f64 * l,
            xmax: self.origin.x + (ix + 1) as f64 * l,
            ymin: self.origin.y + iy as f64 * l,
            ymax: self.origin.y + (iy + 1) as f64 * l,
        }
    }

    fn grid_x(&self, i: usize) -> f64 {
        self.origin.x + i as f64 * self.square_side
    }

    fn grid_y(&self, j: usize) -> f64 {
        self.origin.y + j as f64 * self.square_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn clamp(&self, p: Point2) -> Point2 {
        Point2::new(
            p.x.clamp(self.xmin, self.xmax),
            p.y.clamp(self.ymin, self.ymax),
        )
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    /// Coordinate of the line carrying `side`.
    pub fn side_line(&self, side: Side) -> f64 {
        match side {
            Side::E => self.xmax,
            Side::N => self.ymax,
            Side::W => self.xmin,
            Side::S => self.ymin,
        }
    }

    /// Endpoints of `side`, ordered by increasing axis coordinate.
    pub fn side_endpoints(&self, side: Side) -> (Point2, Point2) {
        match side {
            Side::E => (Point2::new(self.xmax, self.ymin), Point2::new(self.xmax, self.ymax)),
            Side::W => (Point2::new(self.xmin, self.ymin), Point2::new(self.xmin, self.ymax)),
            Side::N => (Point2::new(self.xmin, self.ymax), Point2::new(self.xmax, self.ymax)),
            Side::S => (Point2::new(self.xmin, self.ymin), Point2::new(self.xmax, self.ymin)),
        }
    }

    /// Signed distance from `p` to the line of `side`, positive on the inner
    /// half-plane.
    fn side_distance(&self, side: Side, p: Point2) -> f64 {
        match side {
            Side::E => self.xmax - p.x,
            Side::N => self.ymax - p.y,
            Side::W => p.x - self.xmin,
            Side::S => p.y - self.ymin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    E,
    N,
    W,
    S,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::E, Side::N, Side::W, Side::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn inward_normal(self) -> Point2 {
        match self {
            Side::E => Point2::new(-1.0, 0.0),
            Side::N => Point2::new(0.0, -1.0),
            Side::W => Point2::new(1.0, 0.0),
            Side::S => Point2::new(0.0, 1.0),
        }
    }

    /// Sides E and W are vertical: their arclength coordinate is `y`.
    pub fn axis(self) -> Axis {
        match self {
            Side::E | Side::W => Axis::Y,
            Side::N | Side::S => Axis::X,
        }
    }

    /// Normal projection of `p` onto the line of this side of `rect`.
    pub fn project(self, rect: &Rect, p: Point2) -> Point2 {
        match self.axis() {
            Axis::Y => Point2::new(rect.side_line(self), p.y),
            Axis::X => Point2::new(p.x, rect.side_line(self)),
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Side::E => "E",
            Side::N => "N",
            Side::W => "W",
            Side::S => "S",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn coord(self, p: Point2) -> f64 {
        match self {
            Axis::X => p.x,
            Axis::Y => p.y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideKind {
    Interface,
    Boundary,
}

/// Where a trajectory left its confinement region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitSite {
    /// An artificial interface; the value there comes from the side stencil.
    Interface(Side),
    /// The physical boundary, where the Dirichlet data is known.
    Dirichlet(Option<Side>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub site: ExitSite,
    pub point: Point2,
}

/// Nearest-boundary query used by the boundary-shift stopping test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryProbe {
    /// Positive inside, negative outside.
    pub distance: f64,
    pub normal: Point2,
    pub foot: Point2,
    pub site: ExitSite,
}

/// A region in which a diffusion is stopped on first exit.
pub trait StoppingRegion: Sync {
    fn probe(&self, p: Point2) -> BoundaryProbe;

    fn classify_exit(&self, prev: Point2, next: Point2) -> Result<ExitRecord>;

    fn area(&self) -> f64;

    fn contains(&self, p: Point2) -> bool {
        self.probe(p).distance >= 0.0
    }
}

/// Axis-aligned rectangle whose sides are either interfaces or physical
/// boundary. `domain` bounds the points at which Dirichlet data is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectRegion {
    pub rect: Rect,
    pub kinds: [SideKind; 4],
    pub domain: Rect,
}

impl RectRegion {
    /// A square with Dirichlet data on all four sides.
    pub fn dirichlet_square(center: Point2, side: f64) -> Self {
        let rect = Rect {
            xmin: center.x - side / 2.0,
            xmax: center.x + side / 2.0,
            ymin: center.y - side / 2.0,
            ymax: center.y + side / 2.0,
        };
        RectRegion {
            rect,
            kinds: [SideKind::Boundary; 4],
            domain: rect,
        }
    }

    pub fn kind(&self, side: Side) -> SideKind {
        self.kinds[side.index()]
    }

    fn site(&self, side: Side) -> ExitSite {
        match self.kind(side) {
            SideKind::Interface => ExitSite::Interface(side),
            SideKind::Boundary => ExitSite::Dirichlet(Some(side)),
        }
    }

    fn record(&self, side: Side, p: Point2) -> ExitRecord {
        let point = side.project(&self.rect, p);
        match self.kind(side) {
            SideKind::Interface => ExitRecord {
                site: ExitSite::Interface(side),
                point,
            },
            SideKind::Boundary => ExitRecord {
                site: ExitSite::Dirichlet(Some(side)),
                point: self.domain.clamp(point),
            },
        }
    }
}

impl StoppingRegion for RectRegion {
    fn probe(&self, p: Point2) -> BoundaryProbe {
        distance_to_boundary(self, p)
    }

    fn classify_exit(&self, prev: Point2, next: Point2) -> Result<ExitRecord> {
        classify_exit(self, prev, next)
    }

    fn area(&self) -> f64 {
        self.rect.area()
    }
}

/// Signed distance to the nearest side of the rectangle (positive inside)
/// with that side's inward normal and the foot of the normal projection.
///
/// Outside the rectangle the most violated side is reported.
pub fn distance_to_boundary(region: &RectRegion, p: Point2) -> BoundaryProbe {
    let mut best = Side::E;
    let mut best_d = f64::INFINITY;
    for side in Side::ALL {
        let d = region.rect.side_distance(side, p);
        if d < best_d {
            best_d = d;
            best = side;
        }
    }
    BoundaryProbe {
        distance: best_d,
        normal: best.inward_normal(),
        foot: best.project(&region.rect, p),
        site: region.site(best),
    }
}

/// Patch-boundary distance query for a [`Patch`].
pub fn distance_to_patch_boundary(patch: &Patch, p: Point2) -> BoundaryProbe {
    distance_to_boundary(&patch.region, p)
}

/// Classify the exit of the step `prev -> next` through the boundary of the
/// rectangle.
///
/// A single violated side yields the normal projection onto that side. A
/// diagonal overshoot (outside two sides) is projected onto the nearer of the
/// two side lines, which may land past the corner on the extended stencil;
/// the corner itself is never returned for an interface exit. When that
/// projection would leave the physical domain the exit is assigned to the
/// other side, which is then necessarily on the physical boundary.
pub fn classify_exit(region: &RectRegion, prev: Point2, next: Point2) -> Result<ExitRecord> {
    debug_assert!(
        region.rect.side_distance(Side::E, prev) > -1e-9 * region.rect.width().max(1.0)
            || !prev.is_finite(),
        "previous point should be inside the region"
    );
    let mut violated: Vec<(f64, Side)> = Side::ALL
        .iter()
        .map(|&s| (-region.rect.side_distance(s, next), s))
        .filter(|&(v, _)| v > 0.0)
        .collect();
    if violated.is_empty() {
        return Err(Error::NoExit(next));
    }
    // nearest line first; ties broken by side order
    violated.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (_, first) = violated[0];
    if violated.len() == 1 {
        return Ok(region.record(first, next));
    }
    let candidate = first.project(&region.rect, next);
    let leaves_domain = !region.domain.contains(candidate);
    if region.kind(first) == SideKind::Interface && leaves_domain {
        let second = violated[1].1;
        return Ok(region.record(second, next));
    }
    Ok(region.record(first, next))
}

/// Disk with Dirichlet data on its circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: Point2,
    pub radius: f64,
}

impl StoppingRegion for Disk {
    fn probe(&self, p: Point2) -> BoundaryProbe {
        let d = p - self.center;
        let r = d.norm();
        let dir = if r > 0.0 { d * (1.0 / r) } else { Point2::new(1.0, 0.0) };
        BoundaryProbe {
            distance: self.radius - r,
            normal: dir * -1.0,
            foot: self.center + dir * self.radius,
            site: ExitSite::Dirichlet(None),
        }
    }

    fn classify_exit(&self, _prev: Point2, next: Point2) -> Result<ExitRecord> {
        let probe = self.probe(next);
        if probe.distance >= 0.0 {
            return Err(Error::NoExit(next));
        }
        Ok(ExitRecord {
            site: ExitSite::Dirichlet(None),
            point: probe.foot,
        })
    }

    fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnotKind {
    Crossing,
    EdgeInterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub id: usize,
    pub position: Point2,
    pub kind: KnotKind,
    pub on_boundary: bool,
    /// Index in the unknown vector; `None` for Dirichlet knots on the boundary.
    pub unknown: Option<usize>,
}

/// One side of a patch boundary lying on an artificial interface, with the
/// collinear stencil supporting interpolation along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub side: Side,
    pub start: Point2,
    pub end: Point2,
    /// Knot ids sorted by increasing axis coordinate.
    pub stencil: Vec<usize>,
    /// Whether the stencil was extended past the low and high ends.
    pub extended: [bool; 2],
}

impl Segment {
    pub fn axis(&self) -> Axis {
        self.side.axis()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatchKey {
    /// Edge `i` of horizontal grid line `j`.
    HorizontalEdge { i: usize, j: usize },
    /// Edge `j` of vertical grid line `i`.
    VerticalEdge { i: usize, j: usize },
    Crossing { i: usize, j: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub key: PatchKey,
    /// Interior knots whose slab is this patch.
    pub owners: Vec<usize>,
    /// Grid squares `(ix, iy)` forming the slab.
    pub squares: Vec<(usize, usize)>,
    pub region: RectRegion,
    pub segments: [Option<Segment>; 4],
    pub boundary_overlap: Vec<Side>,
}

impl Patch {
    pub fn bbox(&self) -> Rect {
        self.region.rect
    }

    pub fn segment(&self, side: Side) -> Option<&Segment> {
        self.segments[side.index()].as_ref()
    }

    pub fn is_floating(&self) -> bool {
        self.boundary_overlap.is_empty()
    }
}

/// Dirichlet data on one side of a subdomain: either the physical boundary
/// or the collinear knots along an interface edge, including both end
/// crossings and extended past them like the patch stencils.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EdgeTrace {
    Boundary,
    Knots { axis: Axis, knots: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretisationPlan {
    pub grid: GridSpec,
    pub knots: Vec<Knot>,
    /// Knot id of each unknown.
    pub unknowns: Vec<usize>,
    pub patches: Vec<Patch>,
    /// Patch index of each knot; `None` for Dirichlet knots.
    pub knot_patch: Vec<Option<usize>>,
    /// Knots on each interior horizontal line `j`, sorted by x.
    h_lines: Vec<Vec<usize>>,
    /// Knots on each interior vertical line `i`, sorted by y.
    v_lines: Vec<Vec<usize>>,
}

pub fn build_discretisation(spec: &GridSpec) -> Result<DiscretisationPlan> {
    spec.validate()?;
    let (nx, ny, m) = (spec.nx, spec.ny, spec.knots_per_interface);
    let s = spec.knot_spacing();
    let mut knots: Vec<Knot> = Vec::new();
    let mut push = |position: Point2, kind: KnotKind, on_boundary: bool| -> usize {
        let id = knots.len();
        knots.push(Knot {
            id,
            position,
            kind,
            on_boundary,
            unknown: None,
        });
        id
    };

    // (line index, position along line) pairs, resolved into sorted lists below
    let mut h_edge: Vec<Vec<usize>> = vec![Vec::new(); ny + 1];
    let mut v_edge: Vec<Vec<usize>> = vec![Vec::new(); nx + 1];
    for (j, line) in h_edge.iter_mut().enumerate().take(ny).skip(1) {
        let y = spec.grid_y(j);
        for i in 0..nx {
            for k in 1..=m {
                let x = spec.grid_x(i) + k as f64 * s;
                line.push(push(Point2::new(x, y), KnotKind::EdgeInterior, false));
            }
        }
    }
    for (i, line) in v_edge.iter_mut().enumerate().take(nx).skip(1) {
        let x = spec.grid_x(i);
        for jj in 0..ny {
            for k in 1..=m {
                let y = spec.grid_y(jj) + k as f64 * s;
                line.push(push(Point2::new(x, y), KnotKind::EdgeInterior, false));
            }
        }
    }
    let mut crossing = vec![vec![None; nx + 1]; ny + 1];
    for (j, row) in crossing.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let interior_i = i > 0 && i < nx;
            let interior_j = j > 0 && j < ny;
            if !(interior_i || interior_j) {
                continue;
            }
            let on_boundary = !(interior_i && interior_j);
            let p = Point2::new(spec.grid_x(i), spec.grid_y(j));
            *cell = Some(push(p, KnotKind::Crossing, on_boundary));
        }
    }

    let mut unknowns = Vec::new();
    for knot in knots.iter_mut() {
        if !knot.on_boundary {
            knot.unknown = Some(unknowns.len());
            unknowns.push(knot.id);
        }
    }

    // sorted knot lists per interior line, crossings included
    let mut h_lines = vec![Vec::new(); ny + 1];
    for j in 1..ny {
        let mut line = Vec::with_capacity(nx * (m + 1) + 1);
        for i in 0..=nx {
            line.push(crossing[j][i].expect("crossing on interior line"));
            if i < nx {
                line.extend_from_slice(&h_edge[j][i * m..(i + 1) * m]);
            }
        }
        h_lines[j] = line;
    }
    let mut v_lines = vec![Vec::new(); nx + 1];
    for i in 1..nx {
        let mut line = Vec::with_capacity(ny * (m + 1) + 1);
        for j in 0..=ny {
            line.push(crossing[j][i].expect("crossing on interior line"));
            if j < ny {
                line.extend_from_slice(&v_edge[i][j * m..(j + 1) * m]);
            }
        }
        v_lines[i] = line;
    }

    let mut plan = DiscretisationPlan {
        grid: spec.clone(),
        knots,
        unknowns,
        patches: Vec::new(),
        knot_patch: Vec::new(),
        h_lines,
        v_lines,
    };

    let mut patches = Vec::new();
    let mut knot_patch = vec![None; plan.knots.len()];
    for j in 1..ny {
        for i in 0..nx {
            let owners = plan.h_lines[j][i * (m + 1) + 1..(i + 1) * (m + 1)].to_vec();
            let key = PatchKey::HorizontalEdge { i, j };
            patches.push(plan.make_patch(key, owners, vec![(i, j - 1), (i, j)]));
        }
    }
    for i in 1..nx {
        for j in 0..ny {
            let owners = plan.v_lines[i][j * (m + 1) + 1..(j + 1) * (m + 1)].to_vec();
            let key = PatchKey::VerticalEdge { i, j };
            patches.push(plan.make_patch(key, owners, vec![(i - 1, j), (i, j)]));
        }
    }
    for j in 1..ny {
        for i in 1..nx {
            let owner = crossing[j][i].expect("interior crossing");
            let key = PatchKey::Crossing { i, j };
            let squares = vec![(i - 1, j - 1), (i, j - 1), (i - 1, j), (i, j)];
            patches.push(plan.make_patch(key, vec![owner], squares));
        }
    }
    for (p, patch) in patches.iter().enumerate() {
        for &k in &patch.owners {
            knot_patch[k] = Some(p);
        }
    }
    plan.patches = patches;
    plan.knot_patch = knot_patch;
    Ok(plan)
}

impl DiscretisationPlan {
    /// Number of unknowns (interior interfacial knots).
    pub fn n(&self) -> usize {
        self.unknowns.len()
    }

    pub fn knot(&self, id: usize) -> &Knot {
        &self.knots[id]
    }

    /// Patch of an interior knot.
    pub fn patch_of(&self, knot: usize) -> Option<&Patch> {
        self.knot_patch[knot].map(|p| &self.patches[p])
    }

    pub fn dirichlet_knots(&self) -> impl Iterator<Item = &Knot> {
        self.knots.iter().filter(|k| k.on_boundary)
    }

    pub fn subdomain_count(&self) -> usize {
        self.grid.nx * self.grid.ny
    }

    /// Subdomain index (row-major) and rectangle.
    pub fn subdomain(&self, index: usize) -> (usize, usize, Rect) {
        let ix = index % self.grid.nx;
        let iy = index / self.grid.nx;
        (ix, iy, self.grid.square(ix, iy))
    }

    /// Subdomain owning `p`; points on shared edges go to the lowest index.
    pub fn locate(&self, p: Point2) -> Option<usize> {
        let dom = self.grid.domain();
        let tol = 1e-12 * (dom.width() + dom.height());
        if p.x < dom.xmin - tol || p.x > dom.xmax + tol || p.y < dom.ymin - tol || p.y > dom.ymax + tol
        {
            return None;
        }
        let l = self.grid.square_side;
        let cell = |t: f64, n: usize| -> usize {
            let c = t / l;
            (c.ceil() as isize - 1).clamp(0, n as isize - 1) as usize
        };
        let ix = cell(p.x - self.grid.origin.x, self.grid.nx);
        let iy = cell(p.y - self.grid.origin.y, self.grid.ny);
        Some(iy * self.grid.nx + ix)
    }

    /// Dirichlet data carriers for the four sides of a subdomain.
    pub fn subdomain_traces(&self, index: usize) -> [EdgeTrace; 4] {
        let (ix, iy, _) = self.subdomain(index);
        let (nx, ny, m) = (self.grid.nx, self.grid.ny, self.grid.knots_per_interface);
        let ext = self.grid.extension_knots();
        let edge = |line: &Vec<usize>, e: usize| {
            let lo = (e * (m + 1)).saturating_sub(ext);
            let hi = ((e + 1) * (m + 1) + ext).min(line.len() - 1);
            line[lo..=hi].to_vec()
        };
        let vertical = |i: usize| {
            if i == 0 || i == nx {
                EdgeTrace::Boundary
            } else {
                EdgeTrace::Knots {
                    axis: Axis::Y,
                    knots: edge(&self.v_lines[i], iy),
                }
            }
        };
        let horizontal = |j: usize| {
            if j == 0 || j == ny {
                EdgeTrace::Boundary
            } else {
                EdgeTrace::Knots {
                    axis: Axis::X,
                    knots: edge(&self.h_lines[j], ix),
                }
            }
        };
        [vertical(ix + 1), horizontal(iy + 1), vertical(ix), horizontal(iy)]
    }

    /// Unknown indices appearing in any stencil of the knot's patch.
    pub fn stencil_columns(&self, knot: usize) -> BTreeSet<usize> {
        let mut cols = BTreeSet::new();
        if let Some(patch) = self.patch_of(knot) {
            for seg in patch.segments.iter().flatten() {
                cols.extend(seg.stencil.iter().filter_map(|&k| self.knots[k].unknown));
            }
        }
        cols
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn make_patch(&self, key: PatchKey, owners: Vec<usize>, squares: Vec<(usize, usize)>) -> Patch {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let ix0 = squares.iter().map(|s| s.0).min().unwrap();
        let ix1 = squares.iter().map(|s| s.0).max().unwrap() + 1;
        let iy0 = squares.iter().map(|s| s.1).min().unwrap();
        let iy1 = squares.iter().map(|s| s.1).max().unwrap() + 1;
        let rect = Rect {
            xmin: self.grid.grid_x(ix0),
            xmax: self.grid.grid_x(ix1),
            ymin: self.grid.grid_y(iy0),
            ymax: self.grid.grid_y(iy1),
        };
        let on_boundary = |side: Side| match side {
            Side::E => ix1 == nx,
            Side::W => ix0 == 0,
            Side::N => iy1 == ny,
            Side::S => iy0 == 0,
        };
        let mut kinds = [SideKind::Interface; 4];
        let mut boundary_overlap = Vec::new();
        let mut segments: [Option<Segment>; 4] = Default::default();
        for side in Side::ALL {
            if on_boundary(side) {
                kinds[side.index()] = SideKind::Boundary;
                boundary_overlap.push(side);
                continue;
            }
            let (line, lo, hi) = match side {
                Side::E => (&self.v_lines[ix1], iy0, iy1),
                Side::W => (&self.v_lines[ix0], iy0, iy1),
                Side::N => (&self.h_lines[iy1], ix0, ix1),
                Side::S => (&self.h_lines[iy0], ix0, ix1),
            };
            segments[side.index()] = Some(self.make_segment(side, &rect, line, lo, hi));
        }
        Patch {
            key,
            owners,
            squares,
            region: RectRegion {
                rect,
                kinds,
                domain: self.grid.domain(),
            },
            segments,
            boundary_overlap,
        }
    }

    /// Stencil for the part of `line` between grid crossings `lo` and `hi`,
    /// extended on each side where the line continues.
    fn make_segment(&self, side: Side, rect: &Rect, line: &[usize], lo: usize, hi: usize) -> Segment {
        let m = self.grid.knots_per_interface;
        let ext = self.grid.extension_knots();
        let a = lo * (m + 1);
        let b = hi * (m + 1);
        let start = a.saturating_sub(ext);
        let end = (b + ext).min(line.len() - 1);
        let (p0, p1) = rect.side_endpoints(side);
        Segment {
            side,
            start: p0,
            end: p1,
            stencil: line[start..=end].to_vec(),
            extended: [start < a, end > b],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(nx: usize, ny: usize, m: usize) -> GridSpec {
        GridSpec {
            origin: Point2::new(0.0, 0.0),
            square_side: 1.0,
            nx,
            ny,
            knots_per_interface: m,
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(build_discretisation(&spec(2, 1, 3)).is_err());
        let mut bad = spec(2, 2, 3);
        bad.square_side = 0.0;
        assert!(build_discretisation(&bad).is_err());
        bad.square_side = -1.0;
        assert!(build_discretisation(&bad).is_err());
    }

    #[test]
    fn two_by_two_plus_shape() {
        let plan = build_discretisation(&spec(2, 2, 3)).unwrap();
        // 2 interior lines x 2 edges x 3 knots + 1 interior crossing
        assert_eq!(plan.n(), 13);
        // 4 boundary crossings where the "+" meets the boundary
        assert_eq!(plan.dirichlet_knots().count(), 4);

        let center = plan
            .knots
            .iter()
            .find(|k| k.position == Point2::new(1.0, 1.0))
            .unwrap();
        assert_eq!(center.kind, KnotKind::Crossing);
        let patch = plan.patch_of(center.id).unwrap();
        assert_eq!(patch.squares.len(), 4);
        assert_eq!(patch.bbox(), Rect { xmin: 0.0, xmax: 2.0, ymin: 0.0, ymax: 2.0 });

        let mid = plan
            .knots
            .iter()
            .find(|k| k.position == Point2::new(1.0, 0.5))
            .unwrap();
        let patch = plan.patch_of(mid.id).unwrap();
        assert_eq!(patch.squares.len(), 2);
        assert_eq!(patch.bbox(), Rect { xmin: 0.0, xmax: 2.0, ymin: 0.0, ymax: 1.0 });
        assert!(patch.bbox().contains(mid.position));
    }

    #[test]
    fn knots_on_same_edge_share_stencils() {
        let plan = build_discretisation(&spec(4, 4, 5)).unwrap();
        let p = plan.knot_patch[plan.unknowns[7]].unwrap();
        let owners = &plan.patches[p].owners;
        assert_eq!(owners.len(), 5);
        let a = plan.patch_of(owners[0]).unwrap();
        let b = plan.patch_of(owners[3]).unwrap();
        for side in Side::ALL {
            assert_eq!(
                a.segment(side).map(|s| &s.stencil),
                b.segment(side).map(|s| &s.stencil)
            );
        }
    }

    #[test]
    fn positions_are_unique() {
        let plan = build_discretisation(&spec(3, 4, 4)).unwrap();
        let mut pts: Vec<(i64, i64)> = plan
            .knots
            .iter()
            .map(|k| ((k.position.x * 1e9) as i64, (k.position.y * 1e9) as i64))
            .collect();
        pts.sort();
        let len = pts.len();
        pts.dedup();
        assert_eq!(pts.len(), len);
    }

    #[test]
    fn stencils_are_sorted_collinear_and_cover_segment() {
        let plan = build_discretisation(&spec(4, 3, 6)).unwrap();
        for patch in &plan.patches {
            for seg in patch.segments.iter().flatten() {
                let axis = seg.axis();
                let line_coord = |p: Point2| match axis {
                    Axis::X => p.y,
                    Axis::Y => p.x,
                };
                let coords: Vec<f64> = seg
                    .stencil
                    .iter()
                    .map(|&k| axis.coord(plan.knots[k].position))
                    .collect();
                assert!(coords.windows(2).all(|w| w[0] < w[1]));
                for &k in &seg.stencil {
                    assert_eq!(line_coord(plan.knots[k].position), line_coord(seg.start));
                }
                // every knot lying on the segment belongs to the stencil
                let lo = axis.coord(seg.start);
                let hi = axis.coord(seg.end);
                for knot in &plan.knots {
                    let on_line = line_coord(knot.position) == line_coord(seg.start);
                    let t = axis.coord(knot.position);
                    if on_line && t >= lo && t <= hi {
                        assert!(seg.stencil.contains(&knot.id));
                    }
                }
            }
        }
    }

    #[test]
    fn patch_boundary_fully_covered() {
        let plan = build_discretisation(&spec(3, 3, 2)).unwrap();
        for patch in &plan.patches {
            for side in Side::ALL {
                let seg = patch.segment(side).is_some();
                let bnd = patch.boundary_overlap.contains(&side);
                assert!(seg ^ bnd, "side {side} must be exactly one of segment/boundary");
            }
        }
    }

    #[test]
    fn every_unknown_owns_a_patch_and_appears_in_a_neighbour_stencil() {
        let plan = build_discretisation(&spec(3, 3, 3)).unwrap();
        let mut seen = vec![false; plan.n()];
        for &k in &plan.unknowns {
            assert!(plan.knot_patch[k].is_some());
            for c in plan.stencil_columns(k) {
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn extension_is_clipped_at_the_boundary() {
        let plan = build_discretisation(&spec(3, 3, 4)).unwrap();
        let knot = plan
            .knots
            .iter()
            .find(|k| k.position == Point2::new(1.0, 0.4))
            .unwrap();
        let patch = plan.patch_of(knot.id).unwrap();
        assert_eq!(patch.boundary_overlap, vec![Side::W, Side::S]);
        let e = patch.segment(Side::E).unwrap();
        assert_eq!(e.extended, [false, true]);
        // 4 edge knots + 2 crossings + 2 extension knots
        assert_eq!(e.stencil.len(), 8);
        assert!(plan.knots[e.stencil[0]].on_boundary);
        let n = patch.segment(Side::N).unwrap();
        assert_eq!(n.extended, [false, true]);
    }

    #[test]
    fn distance_queries() {
        let region = RectRegion::dirichlet_square(Point2::new(0.5, 0.5), 1.0);
        let p = distance_to_boundary(&region, Point2::new(0.5, 0.5));
        assert!((p.distance - 0.5).abs() < 1e-15);
        let p = distance_to_boundary(&region, Point2::new(1.0, 0.3));
        assert_eq!(p.distance, 0.0);
        let p = distance_to_boundary(&region, Point2::new(1.1, 0.5));
        assert!((p.distance + 0.1).abs() < 1e-12);
        assert_eq!(p.normal, Point2::new(-1.0, 0.0));
    }

    fn interface_square() -> RectRegion {
        let rect = Rect { xmin: 1.0, xmax: 2.0, ymin: 1.0, ymax: 2.0 };
        RectRegion {
            rect,
            kinds: [SideKind::Interface; 4],
            domain: Rect { xmin: 0.0, xmax: 3.0, ymin: 0.0, ymax: 3.0 },
        }
    }

    #[test]
    fn single_side_exit_projects_normally() {
        let r = interface_square();
        let e = classify_exit(&r, Point2::new(1.5, 1.05), Point2::new(1.4, 0.9)).unwrap();
        assert_eq!(e.site, ExitSite::Interface(Side::S));
        assert_eq!(e.point, Point2::new(1.4, 1.0));
    }

    #[test]
    fn corner_overshoot_goes_to_nearest_extended_line() {
        let r = interface_square();
        // past the SE corner, closer to the South line
        let e = classify_exit(&r, Point2::new(1.95, 1.05), Point2::new(2.2, 0.95)).unwrap();
        assert_eq!(e.site, ExitSite::Interface(Side::S));
        assert_eq!(e.point, Point2::new(2.2, 1.0));
        assert_ne!(e.point, Point2::new(2.0, 1.0));
    }

    #[test]
    fn inside_point_is_not_an_exit() {
        let r = interface_square();
        assert!(matches!(
            classify_exit(&r, Point2::new(1.5, 1.5), Point2::new(1.6, 1.4)),
            Err(Error::NoExit(_))
        ));
    }

    #[test]
    fn corner_overshoot_next_to_boundary_goes_to_boundary() {
        // S side interface, E side on the physical boundary x = 2
        let rect = Rect { xmin: 1.0, xmax: 2.0, ymin: 1.0, ymax: 2.0 };
        let mut kinds = [SideKind::Interface; 4];
        kinds[Side::E.index()] = SideKind::Boundary;
        let r = RectRegion {
            rect,
            kinds,
            domain: Rect { xmin: 0.0, xmax: 2.0, ymin: 0.0, ymax: 3.0 },
        };
        let e = classify_exit(&r, Point2::new(1.95, 1.05), Point2::new(2.2, 0.95)).unwrap();
        assert_eq!(e.site, ExitSite::Dirichlet(Some(Side::E)));
        assert_eq!(e.point, Point2::new(2.0, 0.95));
    }

    #[test]
    fn locate_prefers_lowest_subdomain_on_shared_edges() {
        let plan = build_discretisation(&spec(3, 2, 2)).unwrap();
        assert_eq!(plan.locate(Point2::new(0.5, 0.5)), Some(0));
        assert_eq!(plan.locate(Point2::new(1.0, 0.5)), Some(0));
        assert_eq!(plan.locate(Point2::new(1.5, 1.0)), Some(1));
        assert_eq!(plan.locate(Point2::new(2.5, 1.5)), Some(5));
        assert_eq!(plan.locate(Point2::new(0.0, 0.0)), Some(0));
        assert_eq!(plan.locate(Point2::new(3.5, 0.0)), None);
    }

    #[test]
    fn json_roundtrip_has_knot_and_patch_tables() {
        let plan = build_discretisation(&spec(2, 2, 1)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
        assert_eq!(v["knots"].as_array().unwrap().len(), plan.knots.len());
        assert_eq!(v["patches"].as_array().unwrap().len(), plan.patches.len());
    }

    #[test]
    fn ten_by_ten_counts() {
        let plan = build_discretisation(&GridSpec {
            origin: Point2::new(-100.0, -100.0),
            square_side: 20.0,
            nx: 10,
            ny: 10,
            knots_per_interface: 62,
        })
        .unwrap();
        assert_eq!(plan.knots.len(), 11277);
        assert_eq!(plan.dirichlet_knots().count(), 36);
        assert_eq!(plan.n(), 11241);
    }
}
