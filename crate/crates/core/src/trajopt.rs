//! Piecewise-polynomial trajectories and their minimum-energy QP.
//!
//! A trajectory with `m` segments of order `n` in `d` dimensions is stored as
//! one parameter vector `x` of length `n_t = (n+1) m d`. Segment `j` covers
//! `[t_j, t_{j+1}]` of the normalized knot vector and is evaluated in
//! segment-local time: `h(t) = Σ_i a_{i,j} (t - t_j)^i`. Coefficient
//! `a_{i,j}[c]` lives at `x[j (n+1) d + i d + c]`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::geometry::Point;
use crate::knots::KnotVector;
use crate::linalg;
use crate::pathfinder::WaypointPath;
use crate::qp::{self, QpError, QpOptions, QpProblem};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajError {
    #[error("RankDeficient: equality constraints are linearly dependent ({rows} rows, rank {rank})")]
    RankDeficient { rows: usize, rank: usize },
    #[error("Infeasible: {0}")]
    Infeasible(String),
    #[error("MaxIterations: active set did not settle after {0} iterations")]
    MaxIterations(usize),
    #[error("OutOfDomain: t = {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

impl TrajError {
    pub fn kind(&self) -> &'static str {
        match self {
            TrajError::RankDeficient { .. } => "RankDeficient",
            TrajError::Infeasible(_) => "Infeasible",
            TrajError::MaxIterations(_) => "MaxIterations",
            TrajError::OutOfDomain(_) => "OutOfDomain",
            TrajError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

impl From<QpError> for TrajError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Infeasible(s) => TrajError::Infeasible(s),
            QpError::MaxIterations(n) => TrajError::MaxIterations(n),
            QpError::RankDeficient => TrajError::RankDeficient { rows: 0, rank: 0 },
            QpError::NotStrictlyConvex => {
                TrajError::InvalidConfig("cost is not positive definite on the feasible subspace".into())
            }
            QpError::DimensionMismatch(s) => TrajError::InvalidConfig(s),
        }
    }
}

/// Polynomial order `n`, cost derivative order `k_r`, continuity order `p`, dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyConfig {
    pub dim: usize,
    pub order: usize,
    pub cost_order: usize,
    pub continuity: usize,
}

impl Default for PolyConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            order: 5,
            cost_order: 3,
            continuity: 3,
        }
    }
}

impl PolyConfig {
    pub fn with_dim(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrajError> {
        if self.dim == 0 || self.dim > 3 {
            return Err(TrajError::InvalidConfig(format!("dimension {}", self.dim)));
        }
        if self.cost_order > self.order {
            return Err(TrajError::InvalidConfig("k_r exceeds the polynomial order".into()));
        }
        if self.order > 0 && self.continuity > self.order - 1 {
            return Err(TrajError::InvalidConfig("continuity order must be at most n - 1".into()));
        }
        Ok(())
    }

    /// `n_t = (n+1) m d`.
    pub fn n_t(&self, segments: usize) -> usize {
        (self.order + 1) * segments * self.dim
    }

    /// Equality rows for `m` segments: continuity, waypoints, terminal derivatives.
    pub fn equality_rows(&self, segments: usize) -> usize {
        let p = self.continuity;
        (segments.saturating_sub(1) * (p + 1) + (segments + 1) + 2 * p) * self.dim
    }

    /// Smallest segment count whose equality system is not overdetermined.
    pub fn min_segments(&self) -> usize {
        (1..).find(|&m| self.equality_rows(m) <= self.n_t(m)).unwrap_or(1)
    }

    #[inline]
    pub fn index(&self, seg: usize, power: usize, comp: usize) -> usize {
        seg * (self.order + 1) * self.dim + power * self.dim + comp
    }
}

/// `d^deriv/dt^deriv [1, t, ..., t^n]`.
pub fn basis_row(t: f64, deriv: usize, order: usize) -> DVector<f64> {
    DVector::from_fn(order + 1, |i, _| {
        if i < deriv {
            0.0
        } else {
            falling(i, deriv) * t.powi((i - deriv) as i32)
        }
    })
}

/// `basis_row` in segment-local time `τ = t - t_seg`.
pub fn segment_row(knots: &KnotVector, seg: usize, t: f64, deriv: usize, order: usize) -> DVector<f64> {
    basis_row(t - knots.values()[seg], deriv, order)
}

/// `a! / (a-k)!`.
fn falling(a: usize, k: usize) -> f64 {
    ((a - k + 1)..=a).map(|v| v as f64).product()
}

/// A trajectory `h(t) = C(t) x` on normalized knots.
///
/// Segment `i` is a polynomial in `τ = t - t_i`. Global-time monomials reach
/// coefficients around 1e6 on tens of meters at seven segments, and f64
/// rounding of those coefficients alone breaks jerk continuity at 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePolynomial {
    cfg: PolyConfig,
    knots: KnotVector,
    x: DVector<f64>,
}

impl PiecewisePolynomial {
    pub fn new(cfg: PolyConfig, knots: KnotVector, x: DVector<f64>) -> Result<Self, TrajError> {
        cfg.validate()?;
        if !knots.is_normalized() {
            return Err(TrajError::InvalidConfig("trajectory knots must be normalized".into()));
        }
        let expect = cfg.n_t(knots.segments());
        if x.len() != expect {
            return Err(TrajError::InvalidConfig(format!(
                "parameter vector has {} entries, expected {expect}",
                x.len()
            )));
        }
        Ok(Self { cfg, knots, x })
    }

    pub fn config(&self) -> &PolyConfig {
        &self.cfg
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn segments(&self) -> usize {
        self.knots.segments()
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// `C_t^(deriv) x`, locating the segment by knot interval.
    pub fn evaluate(&self, t: f64, deriv: usize) -> Result<DVector<f64>, TrajError> {
        if !(-1e-12..=1.0 + 1e-12).contains(&t) || t.is_nan() {
            return Err(TrajError::OutOfDomain(t));
        }
        if deriv > self.cfg.order {
            return Err(TrajError::InvalidConfig(format!("derivative order {deriv} exceeds n")));
        }
        Ok(self.evaluate_segment(self.knots.segment_of(t), t, deriv))
    }

    /// Evaluate segment `seg`'s polynomial at global time `t` (no domain check).
    pub fn evaluate_segment(&self, seg: usize, t: f64, deriv: usize) -> DVector<f64> {
        let row = segment_row(&self.knots, seg, t, deriv, self.cfg.order);
        let d = self.cfg.dim;
        DVector::from_fn(d, |c, _| {
            linalg::dot2(
                row.iter().copied(),
                (0..=self.cfg.order).map(|i| self.x[self.cfg.index(seg, i, c)]),
            )
        })
    }

    pub fn start(&self) -> Point {
        self.evaluate_segment(0, 0.0, 0)
    }

    pub fn end(&self) -> Point {
        self.evaluate_segment(self.segments() - 1, 1.0, 0)
    }
}

/// Terminal conditions: endpoints and derivatives of orders `1..=p` at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    pub start_point: Point,
    pub goal_point: Point,
    pub start_derivs: Vec<DVector<f64>>,
    pub goal_derivs: Vec<DVector<f64>>,
}

impl BoundarySpec {
    /// Rest-to-rest: all terminal derivatives zero.
    pub fn rest(start: Point, goal: Point, p: usize) -> Self {
        let d = start.len();
        Self {
            start_point: start,
            goal_point: goal,
            start_derivs: vec![DVector::zeros(d); p],
            goal_derivs: vec![DVector::zeros(d); p],
        }
    }
}

/// Which part of the equality system a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqualityBlock {
    Continuity,
    Waypoint,
    Terminal,
}

/// `A x = b`, rows stacked as continuity, waypoint, terminal-derivative blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualitySystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub blocks: [Range<usize>; 3],
}

impl EqualitySystem {
    pub fn block(&self, which: EqualityBlock) -> Range<usize> {
        match which {
            EqualityBlock::Continuity => self.blocks[0].clone(),
            EqualityBlock::Waypoint => self.blocks[1].clone(),
            EqualityBlock::Terminal => self.blocks[2].clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// `‖A x − b‖∞`, accumulated in double-double.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        linalg::residual2(&self.a, x, &self.b).amax()
    }
}

fn check_shapes(
    cfg: &PolyConfig,
    waypoints: &WaypointPath,
    knots: &KnotVector,
    bounds: &BoundarySpec,
) -> Result<(), TrajError> {
    cfg.validate()?;
    if !knots.is_normalized() {
        return Err(TrajError::InvalidConfig("equality assembly needs normalized knots".into()));
    }
    if waypoints.points().len() != knots.segments() + 1 {
        return Err(TrajError::InvalidConfig(format!(
            "{} waypoints for {} segments",
            waypoints.points().len(),
            knots.segments()
        )));
    }
    if waypoints.dim() != cfg.dim || bounds.start_point.len() != cfg.dim {
        return Err(TrajError::InvalidConfig("dimension mismatch".into()));
    }
    let p = cfg.continuity;
    if bounds.start_derivs.len() != p || bounds.goal_derivs.len() != p {
        return Err(TrajError::InvalidConfig(format!(
            "boundary derivative lists must have {p} entries"
        )));
    }
    Ok(())
}

/// Assemble `A x = b` and verify full row rank.
pub fn assemble_equality(
    cfg: &PolyConfig,
    waypoints: &WaypointPath,
    knots: &KnotVector,
    bounds: &BoundarySpec,
) -> Result<EqualitySystem, TrajError> {
    let sys = assemble_equality_unchecked(cfg, waypoints, knots, bounds)?;
    let rows = sys.rows();
    let rank = linalg::rank(&sys.a);
    if rows > sys.a.ncols() || rank < rows {
        return Err(TrajError::RankDeficient { rows, rank });
    }
    Ok(sys)
}

/// Assemble `A x = b` without the rank check (overdetermined layouts included).
pub fn assemble_equality_unchecked(
    cfg: &PolyConfig,
    waypoints: &WaypointPath,
    knots: &KnotVector,
    bounds: &BoundarySpec,
) -> Result<EqualitySystem, TrajError> {
    check_shapes(cfg, waypoints, knots, bounds)?;
    let a = equality_matrix(cfg, knots);
    let b = equality_rhs(cfg, waypoints.points(), bounds);
    let m = knots.segments();
    let d = cfg.dim;
    let n1 = m.saturating_sub(1) * (cfg.continuity + 1) * d;
    let n2 = n1 + (m + 1) * d;
    let blocks = [0..n1, n1..n2, n2..a.nrows()];
    Ok(EqualitySystem { a, b, blocks })
}

/// The constraint matrix `A`, which depends on the knots only.
pub fn equality_matrix(cfg: &PolyConfig, knots: &KnotVector) -> DMatrix<f64> {
    let m = knots.segments();
    let d = cfg.dim;
    let n = cfg.order;
    let p = cfg.continuity;
    let t = knots.values();
    let mut a = DMatrix::zeros(cfg.equality_rows(m), cfg.n_t(m));
    let mut r = 0;
    // continuity at interior knots: h_{i-1}^(o)(t_i) - h_i^(o)(t_i) = 0
    for i in 1..m {
        for o in 0..=p {
            let left = segment_row(knots, i - 1, t[i], o, n);
            let right = segment_row(knots, i, t[i], o, n);
            for c in 0..d {
                for pw in 0..=n {
                    a[(r, cfg.index(i - 1, pw, c))] = left[pw];
                    a[(r, cfg.index(i, pw, c))] = -right[pw];
                }
                r += 1;
            }
        }
    }
    // waypoint interpolation; waypoint 0 on segment 0, waypoint i on segment i-1
    for i in 0..=m {
        let seg = if i == 0 { 0 } else { i - 1 };
        let row = segment_row(knots, seg, t[i], 0, n);
        for c in 0..d {
            for pw in 0..=n {
                a[(r, cfg.index(seg, pw, c))] = row[pw];
            }
            r += 1;
        }
    }
    // terminal derivatives, orders p..1 at the start then at the goal
    for (seg, tt) in [(0, t[0]), (m - 1, t[m])] {
        for o in (1..=p).rev() {
            let row = segment_row(knots, seg, tt, o, n);
            for c in 0..d {
                for pw in 0..=n {
                    a[(r, cfg.index(seg, pw, c))] = row[pw];
                }
                r += 1;
            }
        }
    }
    debug_assert_eq!(r, a.nrows());
    a
}

/// The right-hand side `b = [0; waypoints; terminal derivatives]`.
///
/// Interior waypoints come from `points`; the first and last entries of the
/// waypoint block are the boundary start/goal points.
pub fn equality_rhs(cfg: &PolyConfig, points: &[Point], bounds: &BoundarySpec) -> DVector<f64> {
    let m = points.len() - 1;
    let d = cfg.dim;
    let p = cfg.continuity;
    let mut b = DVector::zeros(cfg.equality_rows(m));
    let mut r = m.saturating_sub(1) * (p + 1) * d;
    for (i, pt) in points.iter().enumerate() {
        let src = if i == 0 {
            &bounds.start_point
        } else if i == m {
            &bounds.goal_point
        } else {
            pt
        };
        for c in 0..d {
            b[r] = src[c];
            r += 1;
        }
    }
    for derivs in [&bounds.start_derivs, &bounds.goal_derivs] {
        for o in (1..=p).rev() {
            for c in 0..d {
                b[r] = derivs[o - 1][c];
                r += 1;
            }
        }
    }
    b
}

/// Energy Hessian `H` with `E = x' H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub cost_order: usize,
    pub hessian: DMatrix<f64>,
}

impl CostSpec {
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let hx = linalg::matvec2(&self.hessian, x);
        linalg::dot2(x.iter().copied(), hx.iter().copied())
    }
}

/// Block-diagonal `H`: per segment `∫_0^Δ C_τ^(k_r)' C_τ^(k_r) dτ` in closed form.
pub fn assemble_cost(cfg: &PolyConfig, knots: &KnotVector) -> CostSpec {
    let m = knots.segments();
    let n = cfg.order;
    let k = cfg.cost_order;
    let d = cfg.dim;
    let t = knots.values();
    let mut h = DMatrix::zeros(cfg.n_t(m), cfg.n_t(m));
    for seg in 0..m {
        let dt = t[seg + 1] - t[seg];
        for a in k..=n {
            for b in k..=n {
                let e = (a + b - 2 * k + 1) as i32;
                let v = falling(a, k) * falling(b, k) * dt.powi(e) / e as f64;
                for c in 0..d {
                    h[(cfg.index(seg, a, c), cfg.index(seg, b, c))] = v;
                }
            }
        }
    }
    CostSpec { cost_order: k, hessian: h }
}

/// Corridor width and samples per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorSpec {
    pub width: f64,
    pub samples: usize,
    /// Optional per-segment widths overriding `width`.
    pub segment_widths: Option<Vec<f64>>,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        Self {
            width: 1.0,
            samples: 3,
            segment_widths: None,
        }
    }
}

impl CorridorSpec {
    pub fn width_of(&self, seg: usize) -> f64 {
        self.segment_widths
            .as_ref()
            .and_then(|w| w.get(seg).copied())
            .unwrap_or(self.width)
    }

    pub fn validate(&self, segments: usize) -> Result<(), TrajError> {
        if self.samples == 0 {
            return Err(TrajError::InvalidConfig("corridor needs at least one sample".into()));
        }
        if (0..segments).any(|s| !(self.width_of(s) > 0.0)) {
            return Err(TrajError::InvalidConfig("corridor widths must be positive".into()));
        }
        Ok(())
    }

    /// `s_j = t_i + j/(1+n_c) (t_{i+1} - t_i)` for `j = 1..=n_c`.
    pub fn sample_times(&self, knots: &KnotVector, seg: usize) -> Vec<f64> {
        let t = knots.values();
        (1..=self.samples)
            .map(|j| t[seg] + j as f64 / (1 + self.samples) as f64 * (t[seg + 1] - t[seg]))
            .collect()
    }
}

/// Identifies one corridor inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorridorTag {
    pub segment: usize,
    pub sample: usize,
    pub component: usize,
    pub upper: bool,
}

/// Affine inequalities `G x <= h`; row `r` evaluates to `G_r x - h_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorridorSet {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub tags: Vec<CorridorTag>,
}

impl CorridorSet {
    pub fn empty(n_t: usize) -> Self {
        Self {
            g: DMatrix::zeros(0, n_t),
            h: DVector::zeros(0),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Constraint values `G x - h` (nonpositive when satisfied).
    pub fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        -linalg::residual2(&self.g, x, &self.h)
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        if self.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.evaluate(x).max()
    }
}

fn unit_tangent(a: &Point, b: &Point) -> DVector<f64> {
    let v = b - a;
    let n = v.norm();
    if n == 0.0 {
        v
    } else {
        v / n
    }
}

fn projector(tangent: &DVector<f64>) -> DMatrix<f64> {
    let d = tangent.len();
    DMatrix::identity(d, d) - tangent * tangent.transpose()
}

fn push_rows(
    cfg: &PolyConfig,
    seg: usize,
    sample: usize,
    s: f64,
    proj: &DMatrix<f64>,
    upper_rhs: &DVector<f64>,
    lower_rhs: &DVector<f64>,
    rows: &mut Vec<(DVector<f64>, f64, CorridorTag)>,
    n_t: usize,
) {
    let d = cfg.dim;
    let basis = basis_row(s, 0, cfg.order);
    // `s` is segment-local here.
    for c in 0..d {
        // e_c' P C(s): component c' of h(s) enters with weight P[c, c'].
        let mut g = DVector::zeros(n_t);
        for cc in 0..d {
            let w = proj[(c, cc)];
            if w == 0.0 {
                continue;
            }
            for pw in 0..=cfg.order {
                g[cfg.index(seg, pw, cc)] += w * basis[pw];
            }
        }
        let tag = |upper| CorridorTag {
            segment: seg,
            sample,
            component: c,
            upper,
        };
        rows.push((g.clone(), upper_rhs[c], tag(true)));
        rows.push((-g, -lower_rhs[c], tag(false)));
    }
}

fn collect(rows: Vec<(DVector<f64>, f64, CorridorTag)>, n_t: usize) -> CorridorSet {
    let mut g = DMatrix::zeros(rows.len(), n_t);
    let mut h = DVector::zeros(rows.len());
    let mut tags = Vec::with_capacity(rows.len());
    for (r, (row, rhs, tag)) in rows.into_iter().enumerate() {
        g.set_row(r, &row.transpose());
        h[r] = rhs;
        tags.push(tag);
    }
    CorridorSet { g, h, tags }
}

/// Per-path corridor: `‖P_i (h(s_j) − q_i)‖∞ ≤ δ_i` as `2d` affine rows per sample.
pub fn corridor_constraints(
    cfg: &PolyConfig,
    waypoints: &WaypointPath,
    knots: &KnotVector,
    spec: &CorridorSpec,
) -> Result<CorridorSet, TrajError> {
    shared_corridor(cfg, std::slice::from_ref(waypoints), knots, spec)
}

/// Corridor shared by several waypoint paths with identical segment counts.
///
/// The tangent and reference point of segment `i` come from the mean path;
/// each bound is widened to cover every path's own chord at the sample
/// fraction, so a single path reproduces the per-path corridor exactly.
pub fn shared_corridor(
    cfg: &PolyConfig,
    paths: &[WaypointPath],
    knots: &KnotVector,
    spec: &CorridorSpec,
) -> Result<CorridorSet, TrajError> {
    let m = knots.segments();
    spec.validate(m)?;
    if paths.is_empty() || paths.iter().any(|p| p.points().len() != m + 1) {
        return Err(TrajError::InvalidConfig("corridor paths must have m + 1 waypoints".into()));
    }
    let n_t = cfg.n_t(m);
    let d = cfg.dim;
    let q = paths.len() as f64;
    let mean: Vec<Point> = (0..=m)
        .map(|i| {
            let mut s = Point::zeros(d);
            for p in paths {
                s += &p.points()[i];
            }
            s / q
        })
        .collect();
    let mut rows = Vec::new();
    for seg in 0..m {
        let tangent = unit_tangent(&mean[seg], &mean[seg + 1]);
        let proj = projector(&tangent);
        let base = &proj * &mean[seg];
        let delta = spec.width_of(seg);
        for (j, s) in spec.sample_times(knots, seg).into_iter().enumerate() {
            let frac = (j + 1) as f64 / (1 + spec.samples) as f64;
            let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
            let mut lo = DVector::from_element(d, f64::INFINITY);
            for p in paths {
                let a = &p.points()[seg];
                let b = &p.points()[seg + 1];
                let r = a + frac * (b - a);
                let w = &proj * (r - &mean[seg]);
                for c in 0..d {
                    hi[c] = hi[c].max(w[c]);
                    lo[c] = lo[c].min(w[c]);
                }
            }
            let upper = DVector::from_fn(d, |c, _| base[c] + hi[c] + delta);
            let lower = DVector::from_fn(d, |c, _| base[c] + lo[c] - delta);
            push_rows(cfg, seg, j, s - knots.values()[seg], &proj, &upper, &lower, &mut rows, n_t);
        }
    }
    Ok(collect(rows, n_t))
}

/// Solved trajectory QP with its KKT residuals.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub eq_residual: f64,
    pub max_violation: f64,
    pub active_corridor: Vec<usize>,
    pub eq_multipliers: DVector<f64>,
    pub corridor_multipliers: DVector<f64>,
    pub kkt_stationarity: f64,
    pub iterations: usize,
}

/// Tolerances of the KKT audit.
pub const AUDIT_EQ_TOL: f64 = 1e-8;
pub const AUDIT_INEQ_TOL: f64 = 1e-8;
pub const AUDIT_STATIONARITY_REL: f64 = 1e-6;
pub const AUDIT_MULTIPLIER_TOL: f64 = -1e-10;

impl QpSolution {
    pub fn audit_passes(&self) -> bool {
        self.eq_residual <= AUDIT_EQ_TOL
            && self.max_violation <= AUDIT_INEQ_TOL
            && self.kkt_stationarity <= AUDIT_STATIONARITY_REL * (1.0 + self.x.norm())
            && self.corridor_multipliers.iter().all(|&m| m >= AUDIT_MULTIPLIER_TOL)
    }
}

/// KKT residuals of an arbitrary candidate `x` with given multipliers.
pub fn kkt_report(
    cost: &CostSpec,
    eq: &EqualitySystem,
    corridor: &CorridorSet,
    x: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let n = x.len();
    let hx = linalg::matvec2(&cost.hessian, &x);
    let grad = DVector::from_fn(n, |i, _| {
        let mut terms = vec![2.0 * hx[i]];
        terms.extend((0..eq.rows()).map(|r| eq.a[(r, i)] * lambda[r]));
        terms.extend((0..corridor.len()).map(|r| corridor.g[(r, i)] * mu[r]));
        linalg::sum2(terms)
    });
    let active = (0..corridor.len()).filter(|&r| mu[r] > 0.0).collect();
    QpSolution {
        objective: linalg::dot2(x.iter().copied(), hx.iter().copied()),
        eq_residual: eq.residual(&x),
        max_violation: corridor.max_violation(&x).max(0.0),
        active_corridor: active,
        kkt_stationarity: grad.amax(),
        eq_multipliers: lambda,
        corridor_multipliers: mu,
        x,
        iterations,
    }
}

/// `min x'Hx  s.t.  A x = b,  G x <= h`.
pub fn solve_qp(
    cost: &CostSpec,
    eq: &EqualitySystem,
    corridor: &CorridorSet,
) -> Result<QpSolution, TrajError> {
    solve_qp_with(cost, eq, corridor, &QpOptions::default())
}

pub fn solve_qp_with(
    cost: &CostSpec,
    eq: &EqualitySystem,
    corridor: &CorridorSet,
    opts: &QpOptions,
) -> Result<QpSolution, TrajError> {
    let n = cost.hessian.nrows();
    let problem = QpProblem::unconstrained(2.0 * &cost.hessian, DVector::zeros(n))
        .with_equalities(eq.a.clone(), eq.b.clone())
        .with_inequalities(corridor.g.clone(), corridor.h.clone());
    let out = qp::solve(&problem, opts).map_err(|e| match e {
        QpError::RankDeficient => TrajError::RankDeficient {
            rows: eq.rows(),
            rank: linalg::rank(&eq.a),
        },
        other => other.into(),
    })?;
    Ok(kkt_report(
        cost,
        eq,
        corridor,
        out.x,
        out.eq_multipliers,
        out.ineq_multipliers,
        out.iterations,
    ))
}

/// Smallest first-order optimality margin `∇f(x)' (y − x) / |y − x|` with
/// `∇f(x) = 2 H x`, over random feasible points `y` near `x`.
///
/// Steps are drawn in the null space of `A`, with a random inward component
/// on every corridor row that is tight at `x`. Because `A (y − x) = 0` for
/// feasible `y`, the gradient is first reduced by `A' λ` (λ fitted by least
/// squares, residual accumulated in double-double): the value is unchanged in
/// exact arithmetic, and it no longer carries the rounding of the large
/// multipliers.
pub fn variational_margin<R: rand::Rng>(
    cost: &CostSpec,
    eq: &EqualitySystem,
    corridor: &CorridorSet,
    x: &DVector<f64>,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let n = x.len();
    let z = linalg::null_space(&eq.a);
    let values = corridor.evaluate(x);
    let tight: Vec<usize> = (0..corridor.len()).filter(|&r| values[r] > -1e-9).collect();
    let gz = DMatrix::from_fn(tight.len(), z.ncols(), |r, c| {
        linalg::dot2(corridor.g.row(tight[r]).iter().copied(), z.column(c).iter().copied())
    });
    let kept = independent_rows(&gz);
    let gk = DMatrix::from_fn(kept.len(), z.ncols(), |r, c| gz[(kept[r], c)]);
    // tangent directions keep the kept tight rows fixed; inward ones decrease them
    let tangent = &z * linalg::null_space(&gk);
    let pinv = if kept.is_empty() {
        DMatrix::zeros(z.ncols(), 0)
    } else {
        let ggt = &gk * gk.transpose();
        match ggt.clone().cholesky() {
            Some(ch) => gk.transpose() * ch.inverse(),
            None => DMatrix::zeros(z.ncols(), kept.len()),
        }
    };

    let hx = linalg::matvec2(&cost.hessian, x);
    let grad = 2.0 * &hx;
    let lambda = linalg::least_squares(&eq.a.transpose(), &(-&grad))
        .unwrap_or_else(|| DVector::zeros(eq.rows()));
    let reduced = DVector::from_fn(n, |i, _| {
        let mut terms = vec![grad[i]];
        terms.extend((0..eq.rows()).map(|r| eq.a[(r, i)] * lambda[r]));
        linalg::sum2(terms)
    });

    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let u = DVector::from_fn(tangent.ncols(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut dir = &tangent * u;
        if !kept.is_empty() {
            let c = DVector::from_fn(kept.len(), |_, _| rng.random::<f64>());
            dir -= &z * (&pinv * c);
        }
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        dir /= norm;
        let gd = &corridor.g * &dir;
        let mut alpha: f64 = 1.0;
        for r in 0..corridor.len() {
            if gd[r] > 1e-12 {
                alpha = alpha.min((-values[r]).max(0.0) / gd[r]);
            }
        }
        if alpha <= 0.0 {
            continue;
        }
        let step = 0.5 * alpha * &dir;
        let val = linalg::dot2(reduced.iter().copied(), step.iter().copied()) / step.norm();
        worst = worst.min(val);
    }
    worst
}

/// Indices of a maximal set of linearly independent rows (greedy, in order).
fn independent_rows(m: &DMatrix<f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for r in 0..m.nrows() {
        let mut trial = kept.clone();
        trial.push(r);
        let sub = DMatrix::from_fn(trial.len(), m.ncols(), |i, j| m[(trial[i], j)]);
        if linalg::rank(&sub) == trial.len() {
            kept = trial;
        }
    }
    kept
}
