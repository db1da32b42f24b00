//! Points, convex-hull terminals, barycentric weights and vertex assignment.

use nalgebra::{DMatrix, DVector};

use crate::qp::{self, QpError, QpOptions, QpProblem};

/// A point in 2-D or 3-D (meters).
pub type Point = DVector<f64>;

/// Tolerance for hull membership and weight invariants.
pub const HULL_TOL: f64 = 1e-9;

/// Largest vertex count accepted by [`assign_vertices`].
pub const MAX_ASSIGN_VERTICES: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("PointOutsideHull: reconstruction residual {residual:.3e}")]
    PointOutsideHull { residual: f64 },
    #[error("DegenerateTerminal: vertices span {rank} affine dimensions, need {needed}")]
    DegenerateTerminal { rank: usize, needed: usize },
    #[error("SizeMismatch: {0} start vertices vs {1} goal vertices")]
    SizeMismatch(usize, usize),
    #[error("TooManyVertices: {0} exceeds the exhaustive-search bound {MAX_ASSIGN_VERTICES}")]
    TooManyVertices(usize),
    #[error("InvalidWeights: {0}")]
    InvalidWeights(String),
    #[error("InvalidTerminal: {0}")]
    InvalidTerminal(String),
    #[error("DimensionMismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl GeometryError {
    pub fn kind(&self) -> &'static str {
        match self {
            GeometryError::PointOutsideHull { .. } => "PointOutsideHull",
            GeometryError::DegenerateTerminal { .. } => "DegenerateTerminal",
            GeometryError::SizeMismatch(..) => "SizeMismatch",
            GeometryError::TooManyVertices(_) => "TooManyVertices",
            GeometryError::InvalidWeights(_) => "InvalidWeights",
            GeometryError::InvalidTerminal(_) => "InvalidTerminal",
            GeometryError::DimensionMismatch { .. } => "DimensionMismatch",
        }
    }
}

/// Convex terminal given by its extreme points.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    vertices: Vec<Point>,
}

impl Terminal {
    /// Validates dimension, finiteness, uniqueness and extremality of the vertices.
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let Some(first) = vertices.first() else {
            return Err(GeometryError::InvalidTerminal("no vertices".into()));
        };
        let d = first.len();
        if !(2..=3).contains(&d) {
            return Err(GeometryError::InvalidTerminal(format!("dimension {d} not in {{2, 3}}")));
        }
        for v in &vertices {
            if v.len() != d {
                return Err(GeometryError::DimensionMismatch { expected: d, got: v.len() });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::InvalidTerminal("non-finite coordinate".into()));
            }
        }
        for i in 0..vertices.len() {
            for j in (i + 1)..vertices.len() {
                if (&vertices[i] - &vertices[j]).amax() <= HULL_TOL {
                    return Err(GeometryError::InvalidTerminal(format!(
                        "duplicate vertices {i} and {j}"
                    )));
                }
            }
        }
        if vertices.len() > 2 {
            for i in 0..vertices.len() {
                let others: Vec<Point> = vertices
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| v.clone())
                    .collect();
                if hull_distance(&vertices[i], &others) <= HULL_TOL {
                    return Err(GeometryError::InvalidTerminal(format!(
                        "vertex {i} is not an extreme point"
                    )));
                }
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn centroid(&self) -> Point {
        let mut c = Point::zeros(self.dim());
        for v in &self.vertices {
            c += v;
        }
        c / self.len() as f64
    }

    /// `Σ θ_k v_k`.
    pub fn combine(&self, theta: &BarycentricWeights) -> Point {
        combine_points(&self.vertices, theta.as_slice())
    }
}

pub(crate) fn combine_points(points: &[Point], theta: &[f64]) -> Point {
    let mut out = Point::zeros(points[0].len());
    for (p, &w) in points.iter().zip(theta) {
        out.axpy(w, p, 1.0);
    }
    out
}

/// Convex-combination weights over the vertices of a terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricWeights {
    theta: Vec<f64>,
}

impl BarycentricWeights {
    pub fn new(theta: Vec<f64>) -> Result<Self, GeometryError> {
        if theta.is_empty() {
            return Err(GeometryError::InvalidWeights("empty weight vector".into()));
        }
        if let Some((k, w)) = theta
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < -HULL_TOL)
        {
            return Err(GeometryError::InvalidWeights(format!("theta[{k}] = {w}")));
        }
        let sum: f64 = theta.iter().sum();
        if (sum - 1.0).abs() > HULL_TOL {
            return Err(GeometryError::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self { theta })
    }

    /// Unit weight on vertex `k`.
    pub fn vertex(q: usize, k: usize) -> Self {
        let mut theta = vec![0.0; q];
        theta[k] = 1.0;
        Self { theta }
    }

    pub fn uniform(q: usize) -> Self {
        Self { theta: vec![1.0 / q as f64; q] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.theta.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Start terminal, goal terminal and the vertex pairing `k -> pairing[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderPairSet {
    start: Terminal,
    goal: Terminal,
    pairing: Vec<usize>,
}

impl OrderPairSet {
    pub fn new(start: Terminal, goal: Terminal, pairing: Vec<usize>) -> Result<Self, GeometryError> {
        if start.len() != goal.len() {
            return Err(GeometryError::SizeMismatch(start.len(), goal.len()));
        }
        if start.dim() != goal.dim() {
            return Err(GeometryError::DimensionMismatch { expected: start.dim(), got: goal.dim() });
        }
        let q = start.len();
        let mut seen = vec![false; q];
        if pairing.len() != q {
            return Err(GeometryError::InvalidTerminal("pairing length differs from q".into()));
        }
        for &g in &pairing {
            if g >= q || seen[g] {
                return Err(GeometryError::InvalidTerminal("pairing is not a permutation".into()));
            }
            seen[g] = true;
        }
        Ok(Self { start, goal, pairing })
    }

    pub fn start(&self) -> &Terminal {
        &self.start
    }

    pub fn goal(&self) -> &Terminal {
        &self.goal
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    pub fn q(&self) -> usize {
        self.pairing.len()
    }

    pub fn dim(&self) -> usize {
        self.start.dim()
    }

    /// `(q_{0,k}, q_{m,pi(k)})`.
    pub fn pair(&self, k: usize) -> (&Point, &Point) {
        (&self.start.vertices[k], &self.goal.vertices[self.pairing[k]])
    }

    /// Goal vertices reordered so that index `k` is the partner of start vertex `k`.
    pub fn paired_goals(&self) -> Vec<Point> {
        self.pairing.iter().map(|&g| self.goal.vertices[g].clone()).collect()
    }
}

fn vertex_matrix(vertices: &[Point]) -> DMatrix<f64> {
    let d = vertices[0].len();
    DMatrix::from_fn(d, vertices.len(), |r, c| vertices[c][r])
}

/// Barycentric weights of `p` with respect to `term`.
///
/// Unique weights (q <= d+1) come from the affine linear system; otherwise the
/// minimum-Euclidean-norm feasible weights are returned.
pub fn barycentric_weights(p: &Point, term: &Terminal) -> Result<BarycentricWeights, GeometryError> {
    weights_for_points(p, term.vertices())
}

pub(crate) fn weights_for_points(p: &Point, vertices: &[Point]) -> Result<BarycentricWeights, GeometryError> {
    let d = vertices[0].len();
    if p.len() != d {
        return Err(GeometryError::DimensionMismatch { expected: d, got: p.len() });
    }
    let q = vertices.len();
    if q == 1 {
        let residual = (p - &vertices[0]).amax();
        if residual > HULL_TOL {
            return Err(GeometryError::PointOutsideHull { residual });
        }
        return Ok(BarycentricWeights { theta: vec![1.0] });
    }
    let rank = crate::hull::affine_dim(vertices);
    let needed = (q - 1).min(d);
    if rank < needed {
        return Err(GeometryError::DegenerateTerminal { rank, needed });
    }
    let v = vertex_matrix(vertices);
    let mut aug = DMatrix::from_element(d + 1, q, 1.0);
    aug.view_mut((0, 0), (d, q)).copy_from(&v);
    let mut rhs = DVector::from_element(d + 1, 1.0);
    rhs.rows_mut(0, d).copy_from(p);

    let theta = if q <= d + 1 {
        crate::linalg::least_squares(&aug, &rhs)
            .ok_or(GeometryError::DegenerateTerminal { rank, needed })?
    } else {
        let problem = QpProblem::unconstrained(DMatrix::identity(q, q), DVector::zeros(q))
            .with_equalities(aug.clone(), rhs.clone())
            .with_inequalities(-DMatrix::identity(q, q), DVector::zeros(q));
        match qp::solve(&problem, &QpOptions::default()) {
            Ok(sol) => sol.x,
            Err(QpError::Infeasible(_)) => {
                return Err(GeometryError::PointOutsideHull {
                    residual: hull_distance(p, vertices),
                })
            }
            Err(_) => return Err(GeometryError::DegenerateTerminal { rank, needed }),
        }
    };
    let recon = &v * &theta;
    let residual = (&recon - p).amax();
    let worst_neg = theta.iter().copied().fold(0.0, f64::min);
    if residual > HULL_TOL || worst_neg < -HULL_TOL {
        return Err(GeometryError::PointOutsideHull {
            residual: residual.max(hull_distance(p, vertices)),
        });
    }
    Ok(BarycentricWeights { theta: theta.iter().copied().collect() })
}

/// Euclidean distance from `p` to the convex hull of `points`.
pub fn hull_distance(p: &Point, points: &[Point]) -> f64 {
    let q = points.len();
    if q == 1 {
        return (p - &points[0]).norm();
    }
    // min ||V theta - p||^2, theta in the simplex
    let v = vertex_matrix(points);
    let gram = v.tr_mul(&v);
    let hess = 2.0 * (&gram + 1e-12 * DMatrix::identity(q, q));
    let lin = -2.0 * v.tr_mul(p);
    let problem = QpProblem::unconstrained(hess, lin)
        .with_equalities(DMatrix::from_element(1, q, 1.0), DVector::from_element(1, 1.0))
        .with_inequalities(-DMatrix::identity(q, q), DVector::zeros(q));
    match qp::solve(&problem, &QpOptions::default()) {
        Ok(sol) => (&v * &sol.x - p).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// `f(p) = Σ θ_k q_{m,pi(k)}` with `θ` the weights of `p` in the start terminal.
pub fn map_point(pairs: &OrderPairSet, p: &Point) -> Result<Point, GeometryError> {
    let theta = barycentric_weights(p, pairs.start())?;
    Ok(combine_points(&pairs.paired_goals(), theta.as_slice()))
}

fn assignment_cost(dists: &[f64], variance_weight: f64) -> f64 {
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    mean + variance_weight * var
}

/// Pairing minimizing `mean(dist) + variance_weight * var(dist)` over all
/// permutations; ties go to the lexicographically smallest permutation.
pub fn assign_vertices(
    starts: &Terminal,
    goals: &Terminal,
    variance_weight: f64,
) -> Result<OrderPairSet, GeometryError> {
    let q = starts.len();
    if q != goals.len() {
        return Err(GeometryError::SizeMismatch(q, goals.len()));
    }
    if q > MAX_ASSIGN_VERTICES {
        return Err(GeometryError::TooManyVertices(q));
    }
    let dist: Vec<Vec<f64>> = (0..q)
        .map(|i| (0..q).map(|j| (&starts.vertices[i] - &goals.vertices[j]).norm()).collect())
        .collect();
    let row_min: Vec<f64> = dist
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    // suffix sums of row minima give a bound on the remaining mean
    let mut suffix = vec![0.0; q + 1];
    for i in (0..q).rev() {
        suffix[i] = suffix[i + 1] + row_min[i];
    }

    struct Search<'a> {
        dist: &'a [Vec<f64>],
        suffix: &'a [f64],
        w: f64,
        q: usize,
        used: Vec<bool>,
        perm: Vec<usize>,
        picked: Vec<f64>,
        best: f64,
        best_perm: Vec<usize>,
    }
    impl Search<'_> {
        fn tol(&self) -> f64 {
            if self.best.is_finite() {
                1e-12 * self.best.abs()
            } else {
                0.0
            }
        }
        fn run(&mut self, row: usize, partial: f64) {
            if row == self.q {
                let cost = assignment_cost(&self.picked, self.w);
                if cost < self.best - self.tol() {
                    self.best = cost;
                    self.best_perm = self.perm.clone();
                }
                return;
            }
            let bound = (partial + self.suffix[row]) / self.q as f64;
            if bound >= self.best - self.tol() {
                return;
            }
            for col in 0..self.q {
                if self.used[col] {
                    continue;
                }
                self.used[col] = true;
                self.perm.push(col);
                self.picked.push(self.dist[row][col]);
                self.run(row + 1, partial + self.dist[row][col]);
                self.picked.pop();
                self.perm.pop();
                self.used[col] = false;
            }
        }
    }
    let mut s = Search {
        dist: &dist,
        suffix: &suffix,
        w: variance_weight.max(0.0),
        q,
        used: vec![false; q],
        perm: Vec::with_capacity(q),
        picked: Vec::with_capacity(q),
        best: f64::INFINITY,
        best_perm: (0..q).collect(),
    };
    s.run(0, 0.0);
    OrderPairSet::new(starts.clone(), goals.clone(), s.best_perm)
}

/// True when the hulls of `a` and `b` are strictly separated by a hyperplane.
///
/// Solves the hard-margin separation QP `min |w|^2` with `w.a - c <= -1` and
/// `w.b - c >= 1`; infeasibility means the hulls touch or overlap.
pub fn terminals_disjoint(a: &Terminal, b: &Terminal) -> bool {
    let d = a.dim();
    let n = d + 1;
    let mut hess = DMatrix::identity(n, n) * 2.0;
    hess[(d, d)] = 2e-8;
    let rows = a.len() + b.len();
    let mut g = DMatrix::zeros(rows, n);
    for (i, v) in a.vertices().iter().enumerate() {
        for c in 0..d {
            g[(i, c)] = v[c];
        }
        g[(i, d)] = -1.0;
    }
    for (j, v) in b.vertices().iter().enumerate() {
        let r = a.len() + j;
        for c in 0..d {
            g[(r, c)] = -v[c];
        }
        g[(r, d)] = 1.0;
    }
    let problem = QpProblem::unconstrained(hess, DVector::zeros(n))
        .with_inequalities(g, DVector::from_element(rows, -1.0));
    qp::solve(&problem, &QpOptions::default()).is_ok()
}
