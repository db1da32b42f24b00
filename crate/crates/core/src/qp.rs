//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  A x  = b
//!                 G x <= h
//! ```
//!
//! with `P` positive semidefinite and positive definite on the null space of
//! `A`. Equality-only problems are solved directly from the saddle-point
//! system `[P A'; A 0]`. With inequalities the equality constraints are
//! eliminated through an orthonormal null-space basis and the Goldfarb-Idnani
//! dual active-set method runs on the reduced problem; the identified active
//! set is then re-solved as an equality system in the original variables
//! (a "polish") so both paths share the same accuracy.
//!
//! Multiplier convention: `P x + q + A' lambda + G' mu = 0`, `mu >= 0`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::linalg::{self, LinearSolver};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("Infeasible: {0}")]
    Infeasible(String),
    #[error("MaxIterations: active set did not settle after {0} iterations")]
    MaxIterations(usize),
    #[error("RankDeficient: equality constraints are linearly dependent")]
    RankDeficient,
    #[error("NotStrictlyConvex: objective is not positive definite on the feasible subspace")]
    NotStrictlyConvex,
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
}

impl QpError {
    pub fn kind(&self) -> &'static str {
        match self {
            QpError::Infeasible(_) => "Infeasible",
            QpError::MaxIterations(_) => "MaxIterations",
            QpError::RankDeficient => "RankDeficient",
            QpError::NotStrictlyConvex => "NotStrictlyConvex",
            QpError::DimensionMismatch(_) => "DimensionMismatch",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Problem with no constraints at all.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.ineq_matrix = g;
        self.ineq_rhs = h;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let bad = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
        if self.hessian.shape() != (n, n) {
            return bad("hessian");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return bad("equality system");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return bad("inequality system");
        }
        Ok(())
    }
}

/// Slack granted to the final feasibility check over `feasibility_tol`,
/// covering rounding in the polish solve.
const FINAL_FEASIBILITY_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// Iteration cap; `None` means `100 * n`.
    pub max_iterations: Option<usize>,
    /// Allowed violation of `G x <= h` (row-normalized).
    pub feasibility_tol: f64,
    /// Multipliers above `-multiplier_tol` count as nonnegative.
    pub multiplier_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: None,
            feasibility_tol: 1e-9,
            multiplier_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// One entry per inequality row; zero for inactive rows.
    pub ineq_multipliers: DVector<f64>,
    /// Indices of inequality rows in the final working set.
    pub active: Vec<usize>,
    pub iterations: usize,
}

impl QpResult {
    /// `|| P x + q + A' lambda + G' mu ||_inf`.
    pub fn stationarity(&self, problem: &QpProblem) -> f64 {
        let mut g = &problem.hessian * &self.x + &problem.linear;
        if problem.eq_matrix.nrows() > 0 {
            g += problem.eq_matrix.tr_mul(&self.eq_multipliers);
        }
        if problem.ineq_matrix.nrows() > 0 {
            g += problem.ineq_matrix.tr_mul(&self.ineq_multipliers);
        }
        g.amax()
    }

    pub fn eq_residual(&self, problem: &QpProblem) -> f64 {
        if problem.eq_matrix.nrows() == 0 {
            return 0.0;
        }
        linalg::residual2(&problem.eq_matrix, &self.x, &problem.eq_rhs).amax()
    }

    /// Largest `G x - h` (positive means violated).
    pub fn max_violation(&self, problem: &QpProblem) -> f64 {
        if problem.ineq_matrix.nrows() == 0 {
            return f64::NEG_INFINITY;
        }
        (-linalg::residual2(&problem.ineq_matrix, &self.x, &problem.ineq_rhs)).max()
    }
}

/// Solve `problem`. See the module docs for the method.
pub fn solve(problem: &QpProblem, opts: &QpOptions) -> Result<QpResult, QpError> {
    problem.validate()?;
    let n = problem.dim();
    let m_ineq = problem.ineq_matrix.nrows();

    // Constant rows (zero normal) are either trivially satisfied or infeasible.
    let mut rows = Vec::with_capacity(m_ineq);
    for i in 0..m_ineq {
        let norm = problem.ineq_matrix.row(i).norm();
        if norm <= 1e-14 {
            if problem.ineq_rhs[i] < -opts.feasibility_tol {
                return Err(QpError::Infeasible(format!(
                    "constant inequality row {i} has rhs {}",
                    problem.ineq_rhs[i]
                )));
            }
        } else {
            rows.push((i, norm));
        }
    }

    let base = solve_with_working_set(problem, &[])?;
    let mut result = QpResult {
        x: base.0,
        eq_multipliers: base.1,
        ineq_multipliers: DVector::zeros(m_ineq),
        active: Vec::new(),
        iterations: 0,
    };
    if rows.is_empty() {
        let res = result.eq_residual(problem);
        if res > 1e-8 * (1.0 + problem.eq_rhs.amax()) {
            return Err(QpError::Infeasible(format!(
                "equality system inconsistent (residual {res:.3e})"
            )));
        }
        return Ok(result);
    }
    let violated = rows.iter().any(|&(i, norm)| {
        (problem.ineq_matrix.row(i).dot(&result.x.transpose()) - problem.ineq_rhs[i]) / norm
            > opts.feasibility_tol
    });
    if !violated {
        return Ok(result);
    }

    let max_iter = opts.max_iterations.unwrap_or(100 * n.max(1));

    // Reduced problem: x = x0 + Z y.
    let x0 = result.x.clone();
    let z = linalg::null_space(&problem.eq_matrix);
    let hr = z.tr_mul(&problem.hessian) * &z;
    let hr = 0.5 * (&hr + hr.transpose());
    let cr = z.tr_mul(&(&problem.hessian * &x0 + &problem.linear));
    let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let g_sel = DMatrix::from_fn(idx.len(), n, |r, c| problem.ineq_matrix[(idx[r], c)]);
    let gr = &g_sel * &z;
    let h_sel = DVector::from_fn(idx.len(), |r, _| problem.ineq_rhs[idx[r]]);
    let hr_rhs = &h_sel - &g_sel * &x0;

    let (y, active_local, iters) = goldfarb_idnani(&hr, &cr, &gr, &hr_rhs, opts, max_iter)?;
    let mut working: Vec<usize> = active_local.iter().map(|&j| idx[j]).collect();
    result.x = &x0 + &z * &y;
    result.iterations = iters;

    // Polish: re-solve the working set exactly and repair it primal/dual if
    // the reduced solve misjudged a borderline row.
    let mut polished = false;
    for _ in 0..(2 * idx.len() + 10) {
        result.iterations += 1;
        let Ok((x, lam, mu)) = solve_with_working_set(problem, &working) else {
            break;
        };
        if let Some((k, _)) = mu
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < -opts.multiplier_tol)
            .min_by(|a, b| a.1.total_cmp(b.1))
        {
            working.remove(k);
            continue;
        }
        let worst = rows
            .iter()
            .filter(|(i, _)| !working.contains(i))
            .map(|&(i, norm)| {
                let v = (problem.ineq_matrix.row(i).dot(&x.transpose()) - problem.ineq_rhs[i]) / norm;
                (i, v)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, v)) = worst {
            if v > opts.feasibility_tol {
                working.push(i);
                continue;
            }
        }
        result.x = x;
        result.eq_multipliers = lam;
        result.ineq_multipliers = DVector::zeros(m_ineq);
        for (k, &i) in working.iter().enumerate() {
            result.ineq_multipliers[i] = mu[k].max(0.0);
        }
        polished = true;
        break;
    }
    if !polished {
        // Fall back to the reduced-space answer; recover multipliers by least squares.
        let active_rows: Vec<usize> = active_local.iter().map(|&j| idx[j]).collect();
        let mu_full = reduced_multipliers(problem, &result.x, &active_rows);
        result.ineq_multipliers = mu_full;
        result.eq_multipliers = equality_multipliers(problem, &result.x, &result.ineq_multipliers);
        working = active_rows;
    }
    working.sort_unstable();
    result.active = working;
    if result.iterations > max_iter {
        return Err(QpError::MaxIterations(result.iterations));
    }
    // Never hand back a point that violates the constraints it was asked to meet.
    if let Some((i, v)) = rows
        .iter()
        .map(|&(i, norm)| (i, (problem.ineq_matrix.row(i).dot(&result.x.transpose()) - problem.ineq_rhs[i]) / norm))
        .max_by(|a, b| a.1.total_cmp(&b.1))
    {
        if v > FINAL_FEASIBILITY_FACTOR * opts.feasibility_tol {
            return Err(QpError::Infeasible(format!(
                "no feasible point found: row {i} violated by {v:.3e}"
            )));
        }
    }
    Ok(result)
}

/// Solve the equality-constrained QP with rows `working` of `G` treated as equalities.
/// Returns `(x, lambda, mu_working)`.
fn solve_with_working_set(
    problem: &QpProblem,
    working: &[usize],
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
    let n = problem.dim();
    let me = problem.eq_matrix.nrows();
    let mw = working.len();
    let rows = me + mw;
    if rows == 0 {
        let chol = Cholesky::new(problem.hessian.clone()).ok_or(QpError::NotStrictlyConvex)?;
        let x = chol.solve(&(-&problem.linear));
        return Ok((x, DVector::zeros(0), DVector::zeros(0)));
    }
    if rows > n {
        return Err(QpError::RankDeficient);
    }
    let mut k = DMatrix::zeros(n + rows, n + rows);
    k.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    let mut rhs = DVector::zeros(n + rows);
    rhs.rows_mut(0, n).copy_from(&(-&problem.linear));
    for r in 0..me {
        for c in 0..n {
            let v = problem.eq_matrix[(r, c)];
            k[(n + r, c)] = v;
            k[(c, n + r)] = v;
        }
        rhs[n + r] = problem.eq_rhs[r];
    }
    for (w, &i) in working.iter().enumerate() {
        for c in 0..n {
            let v = problem.ineq_matrix[(i, c)];
            k[(n + me + w, c)] = v;
            k[(c, n + me + w)] = v;
        }
        rhs[n + me + w] = problem.ineq_rhs[i];
    }
    let solver = match LinearSolver::new(k) {
        Ok(s) => s,
        Err(_) => {
            if mw == 0 && linalg::rank(&problem.eq_matrix) < me {
                return Err(QpError::RankDeficient);
            }
            if mw == 0 {
                return Err(QpError::NotStrictlyConvex);
            }
            return Err(QpError::RankDeficient);
        }
    };
    let sol = solver.solve(&rhs);
    let x = sol.rows(0, n).into_owned();
    let lam = sol.rows(n, me).into_owned();
    let mu = sol.rows(n + me, mw).into_owned();
    Ok((x, lam, mu))
}

fn reduced_multipliers(problem: &QpProblem, x: &DVector<f64>, active: &[usize]) -> DVector<f64> {
    // Solve [A' G_W'] [lambda; mu] = -(P x + q) in the least-squares sense.
    let n = problem.dim();
    let me = problem.eq_matrix.nrows();
    let cols = me + active.len();
    let mut mat = DMatrix::zeros(n, cols);
    for r in 0..me {
        mat.set_column(r, &problem.eq_matrix.row(r).transpose());
    }
    for (w, &i) in active.iter().enumerate() {
        mat.set_column(me + w, &problem.ineq_matrix.row(i).transpose());
    }
    let grad = -(&problem.hessian * x + &problem.linear);
    let mut mu = DVector::zeros(problem.ineq_matrix.nrows());
    if let Some(sol) = linalg::least_squares(&mat, &grad) {
        for (w, &i) in active.iter().enumerate() {
            mu[i] = sol[me + w].max(0.0);
        }
    }
    mu
}

fn equality_multipliers(problem: &QpProblem, x: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    if problem.eq_matrix.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut grad = -(&problem.hessian * x + &problem.linear);
    if problem.ineq_matrix.nrows() > 0 {
        grad -= problem.ineq_matrix.tr_mul(mu);
    }
    linalg::least_squares(&problem.eq_matrix.transpose(), &grad)
        .unwrap_or_else(|| DVector::zeros(problem.eq_matrix.nrows()))
}

/// Goldfarb-Idnani dual active-set method for `min 1/2 y'Hy + c'y, G y <= h`
/// with `H` positive definite. Returns `(y, active rows, iterations)`.
///
/// Works in `w = L' y` with `H = L L'`, where the Hessian is the identity, so
/// step directions are projections of constraint normals onto the orthogonal
/// complement of the active normals (computed by QR least squares, never by
/// forming `N' H^-1 N`).
fn goldfarb_idnani(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    rhs: &DVector<f64>,
    opts: &QpOptions,
    max_iter: usize,
) -> Result<(DVector<f64>, Vec<usize>, usize), QpError> {
    let n = c.len();
    let chol = Cholesky::new(h.clone()).ok_or(QpError::NotStrictlyConvex)?;
    let l = chol.l();
    // G y = (L^-1 G')' w
    let gw = l
        .solve_lower_triangular(&g.transpose())
        .ok_or(QpError::NotStrictlyConvex)?
        .transpose();
    let cw = l.solve_lower_triangular(c).ok_or(QpError::NotStrictlyConvex)?;
    let norms: Vec<f64> = (0..g.nrows()).map(|i| g.row(i).norm()).collect();
    let normal = |i: usize| -> DVector<f64> { -gw.row(i).transpose() };
    let slack = |i: usize, w: &DVector<f64>| -> f64 { rhs[i] - linalg::dot2(gw.row(i).iter().copied(), w.iter().copied()) };

    let mut w = -cw;
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iter = 0;

    loop {
        iter += 1;
        if iter > max_iter {
            return Err(QpError::MaxIterations(iter));
        }
        let mut pick = None;
        let mut worst = -opts.feasibility_tol;
        for i in 0..g.nrows() {
            if active.contains(&i) {
                continue;
            }
            let s = slack(i, &w) / norms[i];
            if s < worst {
                worst = s;
                pick = Some(i);
            }
        }
        let Some(p) = pick else {
            let y = l
                .transpose()
                .solve_upper_triangular(&w)
                .ok_or(QpError::NotStrictlyConvex)?;
            return Ok((y, active, iter));
        };
        let np = normal(p);
        let mut up = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::MaxIterations(iter));
            }
            let (zdir, r) = if active.is_empty() {
                (np.clone(), DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(n, active.len(), |row, col| -gw[(active[col], row)]);
                let r = linalg::least_squares(&nmat, &np)
                    .ok_or_else(|| QpError::Infeasible("dependent active constraints".into()))?;
                (&np - &nmat * &r, r)
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-14 {
                    let ratio = u[j] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            let zn = zdir.dot(&np);
            let sp = slack(p, &w);
            let t2 = if zdir.norm() > 1e-10 * np.norm() && zn > 0.0 {
                -sp / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible(format!(
                    "inequality row {p} cannot be satisfied"
                )));
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * r[j];
            }
            up += t;
            if t2.is_finite() {
                w += t * &zdir;
            }
            if t2 <= t1 {
                active.push(p);
                u.push(up);
                break;
            }
            let l = drop.expect("partial step without a blocking constraint");
            active.remove(l);
            u.remove(l);
        }
    }
}
