//! The optimal virtual tube: `q` basis QP solutions sharing one equality
//! matrix, knot vector and corridor, from which any member trajectory is the
//! convex combination `x(θ) = Σ θ_k x_k`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::geometry::{self, BarycentricWeights, GeometryError, OrderPairSet, Point};
use crate::knots::{self, KnotVector};
use crate::par::{self, Parallelism};
use crate::pathfinder::{self, ObstacleSet, PathError, RrtConfig, WaypointPath};
use crate::trajopt::{
    self, BoundarySpec, CorridorSet, CorridorSpec, CostSpec, EqualitySystem, PiecewisePolynomial,
    PolyConfig, QpSolution, TrajError,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TubeError {
    #[error("AuditFailed: basis solution {pair} failed the KKT audit ({detail})")]
    AuditFailed { pair: usize, detail: String },
    #[error("InvalidWeights: {0}")]
    InvalidWeights(String),
    #[error("OutOfDomain: t = {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("Inconsistent: {0}")]
    Inconsistent(String),
}

impl TubeError {
    pub fn kind(&self) -> &'static str {
        match self {
            TubeError::AuditFailed { .. } => "AuditFailed",
            TubeError::InvalidWeights(_) => "InvalidWeights",
            TubeError::OutOfDomain(_) => "OutOfDomain",
            TubeError::Inconsistent(_) => "Inconsistent",
        }
    }
}

/// How corridor inequalities are shared between the basis problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorridorMode {
    /// One corridor covering all pairs, identical for every basis QP.
    #[default]
    Shared,
    /// Each pair keeps the corridor around its own waypoints.
    PerPair,
    /// Equality constraints only.
    Off,
}

impl CorridorMode {
    pub fn name(self) -> &'static str {
        match self {
            CorridorMode::Shared => "shared",
            CorridorMode::PerPair => "per_pair",
            CorridorMode::Off => "off",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "shared" | "strict" => Some(CorridorMode::Shared),
            "per_pair" | "loose" => Some(CorridorMode::PerPair),
            "off" | "none" => Some(CorridorMode::Off),
            _ => None,
        }
    }
}

/// Trajectory-stage configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajConfig {
    pub poly: PolyConfig,
    pub corridor: CorridorSpec,
    pub corridor_mode: CorridorMode,
    pub m_target: usize,
}

impl Default for TrajConfig {
    fn default() -> Self {
        Self {
            poly: PolyConfig::default(),
            corridor: CorridorSpec::default(),
            corridor_mode: CorridorMode::Shared,
            m_target: 7,
        }
    }
}

/// KKT figures of one basis solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisReport {
    pub objective: f64,
    pub eq_residual: f64,
    pub max_violation: f64,
    pub kkt_stationarity: f64,
    pub active: usize,
    pub audit_passed: bool,
}

impl BasisReport {
    fn from_solution(sol: &QpSolution) -> Self {
        Self {
            objective: sol.objective,
            eq_residual: sol.eq_residual,
            max_violation: sol.max_violation,
            kkt_stationarity: sol.kkt_stationarity,
            active: sol.active_corridor.len(),
            audit_passed: sol.audit_passes(),
        }
    }
}

/// Positions of all basis trajectories at normalized time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub t: f64,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone)]
pub struct OptimalVirtualTube {
    pairs: OrderPairSet,
    cfg: TrajConfig,
    /// Unnormalized public knots (chord-length units).
    public_knots: KnotVector,
    knots: KnotVector,
    paths: Vec<WaypointPath>,
    eq_matrix: DMatrix<f64>,
    cost: CostSpec,
    corridors: Vec<CorridorSet>,
    basis_x: Vec<DVector<f64>>,
    basis_b: Vec<DVector<f64>>,
    reports: Vec<BasisReport>,
}

/// Full pipeline: homotopic RRT* paths, equalization, knots, `q` QP solves.
pub fn build_tube(
    pairs: &OrderPairSet,
    obstacles: &ObstacleSet,
    rrt: &RrtConfig,
    traj: &TrajConfig,
    mode: Parallelism,
) -> crate::Result<OptimalVirtualTube> {
    let raw = pathfinder::find_homotopic_paths(pairs, obstacles, rrt, mode)?;
    let paths = pathfinder::equalize_waypoints(&raw, traj.m_target)?;
    if let Some((a, b)) = pathfinder::same_index_violation(&paths, obstacles) {
        return Err(PathError::HomotopyCheckFailed(a, b).into());
    }
    OptimalVirtualTube::from_paths(pairs.clone(), paths, traj.clone(), mode)
}

fn combine(vectors: &[DVector<f64>], theta: &[f64]) -> DVector<f64> {
    let mut out = &vectors[0] * theta[0];
    for (v, &w) in vectors.iter().zip(theta).skip(1) {
        out.axpy(w, v, 1.0);
    }
    out
}

impl OptimalVirtualTube {
    /// Build from already equalized waypoint paths (one per order pair).
    pub fn from_paths(
        pairs: OrderPairSet,
        paths: Vec<WaypointPath>,
        cfg: TrajConfig,
        mode: Parallelism,
    ) -> crate::Result<Self> {
        cfg.poly.validate()?;
        let q = pairs.q();
        if paths.len() != q {
            return Err(TubeError::Inconsistent(format!("{} paths for {q} pairs", paths.len())).into());
        }
        if pairs.dim() != cfg.poly.dim {
            return Err(TrajError::InvalidConfig(format!(
                "terminal dimension {} differs from trajectory dimension {}",
                pairs.dim(),
                cfg.poly.dim
            ))
            .into());
        }
        let m = paths[0].segments();
        if paths.iter().any(|p| p.segments() != m) {
            return Err(TubeError::Inconsistent("paths have different waypoint counts".into()).into());
        }
        let chords = paths
            .iter()
            .map(knots::chord_length_knots)
            .collect::<Result<Vec<_>, _>>()?;
        let public_knots = knots::public_knots(&chords)?;
        let knots = knots::normalize_knots(&public_knots)?;
        let p = cfg.poly.continuity;
        let bounds: Vec<BoundarySpec> = (0..q)
            .map(|k| {
                let (s, g) = pairs.pair(k);
                BoundarySpec::rest(s.clone(), g.clone(), p)
            })
            .collect();
        // Rank check on the shared matrix once.
        let first = trajopt::assemble_equality(&cfg.poly, &paths[0], &knots, &bounds[0])?;
        let eq_matrix = first.a;
        let basis_b: Vec<DVector<f64>> = (0..q)
            .map(|k| trajopt::equality_rhs(&cfg.poly, paths[k].points(), &bounds[k]))
            .collect();
        let cost = trajopt::assemble_cost(&cfg.poly, &knots);
        let corridors = match cfg.corridor_mode {
            CorridorMode::Off => Vec::new(),
            CorridorMode::Shared => vec![trajopt::shared_corridor(&cfg.poly, &paths, &knots, &cfg.corridor)?],
            CorridorMode::PerPair => paths
                .iter()
                .map(|p| trajopt::corridor_constraints(&cfg.poly, p, &knots, &cfg.corridor))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let n_t = cfg.poly.n_t(m);
        let empty = CorridorSet::empty(n_t);
        let corridor_for = |k: usize| -> &CorridorSet {
            match cfg.corridor_mode {
                CorridorMode::Off => &empty,
                CorridorMode::Shared => &corridors[0],
                CorridorMode::PerPair => &corridors[k],
            }
        };
        let solutions = par::try_map_indexed(q, mode, |k| {
            let eq = EqualitySystem {
                a: eq_matrix.clone(),
                b: basis_b[k].clone(),
                blocks: first.blocks.clone(),
            };
            trajopt::solve_qp(&cost, &eq, corridor_for(k))
        })?;
        let mut basis_x = Vec::with_capacity(q);
        let mut reports = Vec::with_capacity(q);
        for (k, sol) in solutions.into_iter().enumerate() {
            let report = BasisReport::from_solution(&sol);
            if !report.audit_passed {
                return Err(TubeError::AuditFailed {
                    pair: k,
                    detail: format!(
                        "eq {:.2e}, violation {:.2e}, stationarity {:.2e}",
                        report.eq_residual, report.max_violation, report.kkt_stationarity
                    ),
                }
                .into());
            }
            basis_x.push(sol.x);
            reports.push(report);
        }
        Ok(Self {
            pairs,
            cfg,
            public_knots,
            knots,
            paths,
            eq_matrix,
            cost,
            corridors,
            basis_x,
            basis_b,
            reports,
        })
    }

    /// Reassemble a tube from stored basis data. Matrices and corridors are
    /// rebuilt from the knots and paths; the basis vectors are taken as given.
    pub fn from_parts(
        pairs: OrderPairSet,
        cfg: TrajConfig,
        public_knots: KnotVector,
        paths: Vec<WaypointPath>,
        basis_x: Vec<DVector<f64>>,
        basis_b: Vec<DVector<f64>>,
    ) -> crate::Result<Self> {
        cfg.poly.validate()?;
        let q = pairs.q();
        if paths.len() != q || basis_x.len() != q || basis_b.len() != q {
            return Err(TubeError::Inconsistent("basis data does not match q".into()).into());
        }
        let knots = knots::normalize_knots(&public_knots)?;
        let m = knots.segments();
        let n_t = cfg.poly.n_t(m);
        let rows = cfg.poly.equality_rows(m);
        if basis_x.iter().any(|x| x.len() != n_t) || basis_b.iter().any(|b| b.len() != rows) {
            return Err(TubeError::Inconsistent("basis vector lengths do not match the configuration".into()).into());
        }
        if paths.iter().any(|p| p.segments() != m) {
            return Err(TubeError::Inconsistent("paths do not match the knot vector".into()).into());
        }
        let eq_matrix = trajopt::equality_matrix(&cfg.poly, &knots);
        let cost = trajopt::assemble_cost(&cfg.poly, &knots);
        let corridors = match cfg.corridor_mode {
            CorridorMode::Off => Vec::new(),
            CorridorMode::Shared => vec![trajopt::shared_corridor(&cfg.poly, &paths, &knots, &cfg.corridor)?],
            CorridorMode::PerPair => paths
                .iter()
                .map(|p| trajopt::corridor_constraints(&cfg.poly, p, &knots, &cfg.corridor))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let mut tube = Self {
            pairs,
            cfg,
            public_knots,
            knots,
            paths,
            eq_matrix,
            cost,
            corridors,
            basis_x,
            basis_b,
            reports: Vec::new(),
        };
        tube.reports = (0..q)
            .map(|k| {
                let sol = tube.audit_vector(&tube.basis_x[k], &tube.basis_b[k], k);
                BasisReport::from_solution(&sol)
            })
            .collect();
        Ok(tube)
    }

    pub fn pairs(&self) -> &OrderPairSet {
        &self.pairs
    }

    pub fn config(&self) -> &TrajConfig {
        &self.cfg
    }

    pub fn q(&self) -> usize {
        self.basis_x.len()
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn public_knots(&self) -> &KnotVector {
        &self.public_knots
    }

    pub fn paths(&self) -> &[WaypointPath] {
        &self.paths
    }

    pub fn basis_x(&self) -> &[DVector<f64>] {
        &self.basis_x
    }

    pub fn basis_b(&self) -> &[DVector<f64>] {
        &self.basis_b
    }

    pub fn reports(&self) -> &[BasisReport] {
        &self.reports
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_matrix
    }

    pub fn n_t(&self) -> usize {
        self.cfg.poly.n_t(self.knots.segments())
    }

    /// Replace basis vector `k` (used to exercise the verifier on tampered data).
    pub fn set_basis_x(&mut self, k: usize, x: DVector<f64>) {
        self.basis_x[k] = x;
    }

    fn check_theta(&self, theta: &BarycentricWeights) -> Result<(), TubeError> {
        if theta.len() != self.q() {
            return Err(TubeError::InvalidWeights(format!(
                "{} weights for {} basis trajectories",
                theta.len(),
                self.q()
            )));
        }
        Ok(())
    }

    /// `x(θ) = Σ θ_k x_k`: `q · n_t` multiply-adds, no solve.
    pub fn member_x(&self, theta: &BarycentricWeights) -> Result<DVector<f64>, TubeError> {
        self.check_theta(theta)?;
        Ok(combine(&self.basis_x, theta.as_slice()))
    }

    /// `member_x` for a batch of weight vectors, in input order.
    pub fn member_batch(
        &self,
        thetas: &[BarycentricWeights],
        mode: Parallelism,
    ) -> Result<Vec<DVector<f64>>, TubeError> {
        par::map_slice(thetas, mode, |th| self.member_x(th)).into_iter().collect()
    }

    /// `b(θ) = Σ θ_k b_k` from the stored right-hand sides.
    pub fn member_b(&self, theta: &BarycentricWeights) -> Result<DVector<f64>, TubeError> {
        self.check_theta(theta)?;
        Ok(combine(&self.basis_b, theta.as_slice()))
    }

    pub fn member_trajectory(&self, theta: &BarycentricWeights) -> Result<PiecewisePolynomial, TubeError> {
        let x = self.member_x(theta)?;
        Ok(PiecewisePolynomial::new(self.cfg.poly, self.knots.clone(), x)
            .expect("tube configuration was validated at build time"))
    }

    pub fn basis_trajectory(&self, k: usize) -> PiecewisePolynomial {
        PiecewisePolynomial::new(self.cfg.poly, self.knots.clone(), self.basis_x[k].clone())
            .expect("tube configuration was validated at build time")
    }

    /// Member for a start point inside the start terminal.
    pub fn member_for_start(&self, p: &Point) -> crate::Result<PiecewisePolynomial> {
        let theta = geometry::barycentric_weights(p, self.pairs.start())?;
        Ok(self.member_trajectory(&theta)?)
    }

    /// Waypoints of the member: `Σ θ_k q_{i,k}`.
    pub fn member_waypoints(&self, theta: &BarycentricWeights) -> Result<WaypointPath, TubeError> {
        self.check_theta(theta)?;
        let m = self.knots.segments();
        let pts = (0..=m)
            .map(|i| {
                let col: Vec<Point> = self.paths.iter().map(|p| p.points()[i].clone()).collect();
                geometry::combine_points(&col, theta.as_slice())
            })
            .collect();
        WaypointPath::new(pts, 0).map_err(|e| TubeError::Inconsistent(e.to_string()))
    }

    /// Inequalities that a member with weights `θ` must satisfy.
    pub fn member_corridor(&self, theta: &BarycentricWeights) -> Result<CorridorSet, TubeError> {
        match self.cfg.corridor_mode {
            CorridorMode::Off => Ok(CorridorSet::empty(self.n_t())),
            CorridorMode::Shared => Ok(self.corridors[0].clone()),
            CorridorMode::PerPair => {
                let wp = self.member_waypoints(theta)?;
                trajopt::corridor_constraints(&self.cfg.poly, &wp, &self.knots, &self.cfg.corridor)
                    .map_err(|e| TubeError::Inconsistent(e.to_string()))
            }
        }
    }

    fn equality_for(&self, b: DVector<f64>) -> EqualitySystem {
        let m = self.knots.segments();
        let d = self.cfg.poly.dim;
        let n1 = m.saturating_sub(1) * (self.cfg.poly.continuity + 1) * d;
        let n2 = n1 + (m + 1) * d;
        EqualitySystem {
            a: self.eq_matrix.clone(),
            blocks: [0..n1, n1..n2, n2..b.len()],
            b,
        }
    }

    /// Independent QP solve at `b(θ)` with the member's corridor.
    pub fn direct_solve(&self, theta: &BarycentricWeights) -> crate::Result<QpSolution> {
        let b = self.member_b(theta)?;
        let corridor = self.member_corridor(theta)?;
        Ok(trajopt::solve_qp(&self.cost, &self.equality_for(b), &corridor)?)
    }

    /// KKT residuals of a given vector against pair `k`'s problem, with
    /// multipliers fitted by least squares.
    fn audit_vector(&self, x: &DVector<f64>, b: &DVector<f64>, k: usize) -> QpSolution {
        let eq = self.equality_for(b.clone());
        let corridor = match self.cfg.corridor_mode {
            CorridorMode::Off => CorridorSet::empty(self.n_t()),
            CorridorMode::Shared => self.corridors[0].clone(),
            CorridorMode::PerPair => self.corridors[k].clone(),
        };
        let values = corridor.evaluate(x);
        let tight: Vec<usize> = (0..corridor.len()).filter(|&r| values[r] > -1e-9).collect();
        let n = x.len();
        let cols = eq.rows() + tight.len();
        let mut mat = DMatrix::zeros(n, cols);
        mat.view_mut((0, 0), (n, eq.rows())).copy_from(&eq.a.transpose());
        for (w, &r) in tight.iter().enumerate() {
            mat.set_column(eq.rows() + w, &corridor.g.row(r).transpose());
        }
        let grad = -2.0 * crate::linalg::matvec2(&self.cost.hessian, x);
        let sol = crate::linalg::least_squares(&mat, &grad).unwrap_or_else(|| DVector::zeros(cols));
        let lambda = sol.rows(0, eq.rows()).into_owned();
        let mut mu = DVector::zeros(corridor.len());
        for (w, &r) in tight.iter().enumerate() {
            mu[r] = sol[eq.rows() + w];
        }
        trajopt::kkt_report(&self.cost, &eq, &corridor, x.clone(), lambda, mu, 0)
    }

    /// Positions of every basis trajectory at `t`.
    pub fn cross_section(&self, t: f64) -> Result<CrossSection, TubeError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(TubeError::OutOfDomain(t));
        }
        let seg = self.knots.segment_of(t);
        let points = (0..self.q())
            .map(|k| self.basis_trajectory(k).evaluate_segment(seg, t, 0))
            .collect();
        Ok(CrossSection { t, points })
    }

    /// Feasibility, direct-solve agreement and first-order optimality of member `θ`.
    pub fn verify_member_optimality<R: Rng>(
        &self,
        theta: &BarycentricWeights,
        trials: usize,
        rng: &mut R,
    ) -> crate::Result<VerificationReport> {
        let x = self.member_x(theta)?;
        let b = self.member_b(theta)?;
        let eq = self.equality_for(b);
        let corridor = self.member_corridor(theta)?;
        let eq_residual = eq.residual(&x);
        let corridor_violation = corridor.max_violation(&x).max(0.0);
        let direct = trajopt::solve_qp(&self.cost, &eq, &corridor)?;
        let coefficient_error = (&x - &direct.x).amax();
        let objective = self.cost.energy(&x);
        let objective_rel_error = (objective - direct.objective).abs() / direct.objective.abs().max(1e-300);
        let variational_margin = if trials == 0 {
            f64::INFINITY
        } else {
            trajopt::variational_margin(&self.cost, &eq, &corridor, &x, trials, rng)
        };
        Ok(VerificationReport {
            eq_residual,
            corridor_violation,
            coefficient_error,
            objective,
            objective_rel_error,
            variational_margin,
            direct_audit_passed: direct.audit_passes(),
            direct_active: direct.active_corridor.len(),
        })
    }

    /// Per-member wall times of convex combination vs. direct QP solves.
    ///
    /// Combination is timed over all `count` members; direct solves over at
    /// most `direct_samples` of them.
    pub fn combination_benchmark<R: Rng>(
        &self,
        counts: &[usize],
        direct_samples: usize,
        rng: &mut R,
    ) -> crate::Result<Vec<BenchRow>> {
        let mut rows = Vec::with_capacity(counts.len());
        for &count in counts {
            let thetas: Vec<BarycentricWeights> = (0..count).map(|_| random_weights(self.q(), rng)).collect();
            let start = Instant::now();
            let mut sink = 0.0;
            for th in &thetas {
                let x = self.member_x(th)?;
                sink += x[0];
            }
            let combine_s = start.elapsed().as_secs_f64() / count.max(1) as f64;
            std::hint::black_box(sink);
            let n_direct = direct_samples.min(count).max(1);
            let start = Instant::now();
            for th in thetas.iter().take(n_direct) {
                std::hint::black_box(self.direct_solve(th)?);
            }
            let direct_s = start.elapsed().as_secs_f64() / n_direct as f64;
            rows.push(BenchRow {
                count,
                combine_seconds: combine_s,
                direct_seconds: direct_s,
            });
        }
        Ok(rows)
    }
}

/// One row of [`OptimalVirtualTube::combination_benchmark`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub count: usize,
    pub combine_seconds: f64,
    pub direct_seconds: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.direct_seconds / self.combine_seconds.max(1e-15)
    }
}

/// Outcome of [`OptimalVirtualTube::verify_member_optimality`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub eq_residual: f64,
    pub corridor_violation: f64,
    pub coefficient_error: f64,
    pub objective: f64,
    pub objective_rel_error: f64,
    pub variational_margin: f64,
    pub direct_audit_passed: bool,
    pub direct_active: usize,
}

pub const VERIFY_FEASIBILITY_TOL: f64 = 1e-8;
pub const VERIFY_COEFFICIENT_TOL: f64 = 1e-6;
pub const VERIFY_OBJECTIVE_REL_TOL: f64 = 1e-8;
pub const VERIFY_VARIATIONAL_TOL: f64 = -1e-8;

impl VerificationReport {
    pub fn feasible(&self) -> bool {
        self.eq_residual <= VERIFY_FEASIBILITY_TOL && self.corridor_violation <= VERIFY_FEASIBILITY_TOL
    }

    pub fn optimal(&self) -> bool {
        self.coefficient_error <= VERIFY_COEFFICIENT_TOL && self.objective_rel_error <= VERIFY_OBJECTIVE_REL_TOL
    }

    pub fn variational_ok(&self) -> bool {
        self.variational_margin >= VERIFY_VARIATIONAL_TOL
    }

    pub fn passed(&self) -> bool {
        self.feasible() && self.optimal() && self.variational_ok() && self.direct_audit_passed
    }
}

/// Uniform sample from the probability simplex (normalized exponentials).
pub fn random_weights<R: Rng>(q: usize, rng: &mut R) -> BarycentricWeights {
    let e: Vec<f64> = (0..q).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    let mut theta: Vec<f64> = e.iter().map(|v| v / s).collect();
    let rest: f64 = theta[1..].iter().sum();
    theta[0] = 1.0 - rest;
    BarycentricWeights::new(theta).expect("normalized exponentials lie in the simplex")
}

/// `count` weight vectors equispaced over the simplex edge or face.
///
/// For `q = 2` these are `(1 - s, s)` with `s = i / (count - 1)`; a single
/// member is the midpoint. For larger `q` the grid is the smallest simplex
/// lattice with at least `count` points, truncated in lexicographic order.
pub fn equispaced_weights(q: usize, count: usize) -> Vec<BarycentricWeights> {
    if count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![BarycentricWeights::uniform(q)];
    }
    if q == 1 {
        return vec![BarycentricWeights::vertex(1, 0); count];
    }
    let mut res = 1;
    loop {
        let pts = lattice(q, res);
        if pts.len() >= count {
            return pts.into_iter().take(count).collect();
        }
        res += 1;
    }
}

fn lattice(q: usize, res: usize) -> Vec<BarycentricWeights> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; q];
    fn rec(k: usize, left: usize, res: usize, cur: &mut Vec<usize>, out: &mut Vec<BarycentricWeights>) {
        let q = cur.len();
        if k == q - 1 {
            cur[k] = left;
            let theta: Vec<f64> = cur.iter().map(|&c| c as f64 / res as f64).collect();
            out.push(BarycentricWeights::new(theta).expect("lattice point lies in the simplex"));
            return;
        }
        for c in (0..=left).rev() {
            cur[k] = c;
            rec(k + 1, left - c, res, cur, out);
        }
    }
    rec(0, res, res, &mut cur, &mut out);
    out
}

impl From<GeometryError> for TubeError {
    fn from(e: GeometryError) -> Self {
        TubeError::InvalidWeights(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Terminal;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    fn straight_tube(q_offsets: &[f64], mode: CorridorMode) -> OptimalVirtualTube {
        let starts: Vec<Point> = q_offsets.iter().map(|&y| p(&[0.0, y])).collect();
        let goals: Vec<Point> = q_offsets.iter().map(|&y| p(&[20.0, y + 2.0])).collect();
        let pairs = OrderPairSet::new(
            Terminal::new(starts.clone()).unwrap(),
            Terminal::new(goals.clone()).unwrap(),
            (0..starts.len()).collect(),
        )
        .unwrap();
        let paths: Vec<WaypointPath> = starts
            .iter()
            .zip(&goals)
            .enumerate()
            .map(|(k, (s, g))| {
                let raw = WaypointPath::new(vec![s.clone(), p(&[10.0, s[1] + 3.0]), g.clone()], k).unwrap();
                pathfinder::equalize_waypoints(&[raw], 6).unwrap().remove(0)
            })
            .collect();
        let cfg = TrajConfig {
            corridor_mode: mode,
            m_target: 6,
            ..TrajConfig::default()
        };
        OptimalVirtualTube::from_paths(pairs, paths, cfg, Parallelism::Sequential).unwrap()
    }

    #[test]
    fn unit_weights_reproduce_basis() {
        let tube = straight_tube(&[0.0, 4.0], CorridorMode::Shared);
        for k in 0..2 {
            let x = tube.member_x(&BarycentricWeights::vertex(2, k)).unwrap();
            assert_eq!(x, tube.basis_x()[k]);
        }
        let mid = tube.member_x(&BarycentricWeights::uniform(2)).unwrap();
        assert_relative_eq!(mid, 0.5 * (&tube.basis_x()[0] + &tube.basis_x()[1]), epsilon = 1e-9);
    }

    #[test]
    fn cross_section_endpoints() {
        let tube = straight_tube(&[0.0, 4.0], CorridorMode::Off);
        let c0 = tube.cross_section(0.0).unwrap();
        let c1 = tube.cross_section(1.0).unwrap();
        assert_relative_eq!(c0.points[1], p(&[0.0, 4.0]), epsilon = 1e-9);
        assert_relative_eq!(c1.points[0], p(&[20.0, 2.0]), epsilon = 1e-9);
        assert!(tube.cross_section(1.5).is_err());
    }

    #[test]
    fn members_verify_without_corridor() {
        let tube = straight_tube(&[0.0, 4.0], CorridorMode::Off);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let th = random_weights(2, &mut rng);
            let r = tube.verify_member_optimality(&th, 20, &mut rng).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn batch_matches_single_members() {
        let tube = straight_tube(&[0.0, 4.0], CorridorMode::Off);
        let thetas = equispaced_weights(2, 7);
        let seq = tube.member_batch(&thetas, Parallelism::Sequential).unwrap();
        assert_eq!(seq, tube.member_batch(&thetas, Parallelism::Rayon).unwrap());
        for (x, th) in seq.iter().zip(&thetas) {
            assert_eq!(x, &tube.member_x(th).unwrap());
        }
    }

    #[test]
    fn equispaced_grid() {
        let w = equispaced_weights(2, 11);
        assert_eq!(w.len(), 11);
        assert_eq!(w[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(w[10].as_slice(), &[0.0, 1.0]);
        assert_eq!(equispaced_weights(2, 1)[0].as_slice(), &[0.5, 0.5]);
        assert_eq!(equispaced_weights(3, 6).len(), 6);
    }
}
