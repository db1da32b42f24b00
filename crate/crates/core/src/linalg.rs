//! Dense linear algebra helpers on top of nalgebra.
//!
//! Trajectory KKT systems mix monomial columns of very different scale with
//! factorial derivative rows, and corridor-heavy or many-segment instances are
//! poorly conditioned. Plain LU can lose several digits there, so
//! [`LinearSolver`] equilibrates with powers of two and refines the LU solution
//! with residuals accumulated in double-double arithmetic. As long as
//! `cond * eps < 1` this recovers the solution of the f64 data to working
//! precision.

use nalgebra::linalg::FullPivLU as FullPivLu;
use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which a matrix is treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Compensated dot product (Ogita, Rump and Oishi's `Dot2`).
pub fn dot2(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for (x, y) in a.into_iter().zip(b) {
        let (p, pe) = two_prod(x, y);
        let (ns, se) = two_sum(s, p);
        s = ns;
        c += pe + se;
    }
    s + c
}

/// Compensated summation of a sequence.
pub fn sum2(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in values {
        let (ns, e) = two_sum(s, v);
        s = ns;
        c += e;
    }
    s + c
}

/// `rhs - m x` with every row accumulated in double-double.
pub fn residual2(m: &DMatrix<f64>, x: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        m.nrows(),
        (0..m.nrows()).map(|i| {
            let row = m.row(i);
            dot2(
                row.iter().copied().chain(std::iter::once(-1.0)),
                x.iter().copied().chain(std::iter::once(rhs[i])),
            ) * -1.0
        }),
    )
}

/// `m x` with compensated row sums.
pub fn matvec2(m: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        m.nrows(),
        (0..m.nrows()).map(|i| dot2(m.row(i).iter().copied(), x.iter().copied())),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is singular to working precision (pivot ratio {ratio:.3e})")]
pub struct Singular {
    pub ratio: f64,
}

/// Full-pivoting LU with mixed-precision iterative refinement.
///
/// The LU factors an equilibrated copy `D_r M D_c` (power-of-two Ruiz scaling,
/// so the scaling itself is exact); residuals are always taken against the
/// original matrix.
pub struct LinearSolver {
    matrix: DMatrix<f64>,
    row_scale: DVector<f64>,
    col_scale: DVector<f64>,
    lu: FullPivLu<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn pow2(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        1.0
    } else {
        2f64.powi(x.log2().round() as i32)
    }
}

/// Ruiz equilibration rounded to powers of two: returns `(D_r, D_c)` so that
/// the rows and columns of `D_r M D_c` have infinity norms close to 1.
/// Iterates in real arithmetic and rounds once at the end, so the scaling is
/// exact without the rounding stalling the iteration.
fn equilibrate(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let (rows, cols) = m.shape();
    let mut dr = DVector::from_element(rows, 1.0);
    let mut dc = DVector::from_element(cols, 1.0);
    for _ in 0..100 {
        let mut spread = 0.0_f64;
        for i in 0..rows {
            let norm = (0..cols).map(|j| (m[(i, j)] * dr[i] * dc[j]).abs()).fold(0.0, f64::max);
            if norm > 0.0 {
                dr[i] /= norm.sqrt();
                spread = spread.max((1.0 - norm).abs());
            }
        }
        for j in 0..cols {
            let norm = (0..rows).map(|i| (m[(i, j)] * dr[i] * dc[j]).abs()).fold(0.0, f64::max);
            if norm > 0.0 {
                dc[j] /= norm.sqrt();
                spread = spread.max((1.0 - norm).abs());
            }
        }
        if spread < 1e-3 {
            break;
        }
    }
    (dr.map(pow2), dc.map(pow2))
}

impl LinearSolver {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, Singular> {
        assert!(matrix.is_square(), "LinearSolver needs a square matrix");
        let (row_scale, col_scale) = equilibrate(&matrix);
        let scaled = DMatrix::from_fn(matrix.nrows(), matrix.ncols(), |i, j| {
            matrix[(i, j)] * row_scale[i] * col_scale[j]
        });
        let lu = FullPivLu::new(scaled);
        let ratio = pivot_ratio(lu.u().diagonal().iter().copied());
        if matrix.nrows() > 0 && ratio < PIVOT_TOL {
            return Err(Singular { ratio });
        }
        Ok(Self {
            matrix,
            row_scale,
            col_scale,
            lu,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn lu_solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let scaled = rhs.component_mul(&self.row_scale);
        self.lu.solve(&scaled).map(|y| y.component_mul(&self.col_scale))
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self
            .lu_solve(rhs)
            .unwrap_or_else(|| DVector::zeros(rhs.len()));
        let mut last = f64::INFINITY;
        for _ in 0..12 {
            let r = residual2(&self.matrix, &x, rhs);
            let Some(dx) = self.lu_solve(&r) else { break };
            let step = dx.amax();
            x += &dx;
            if step <= 4.0 * f64::EPSILON * x.amax() || step >= 0.5 * last {
                break;
            }
            last = step;
        }
        x
    }
}

fn pivot_ratio(diag: impl Iterator<Item = f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for d in diag {
        lo = lo.min(d.abs());
        hi = hi.max(d.abs());
    }
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Numerical rank of `m` from a full-pivoting LU with relative tolerance `PIVOT_TOL`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    // FullPivLu in nalgebra needs a square matrix for `u()` to be meaningful,
    // so pad with zero rows/columns.
    let n = m.nrows().max(m.ncols());
    let mut sq = DMatrix::zeros(n, n);
    sq.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    let lu = FullPivLu::new(sq);
    let diag: Vec<f64> = lu.u().diagonal().iter().map(|d| d.abs()).collect();
    let hi = diag.iter().copied().fold(0.0, f64::max);
    if hi == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > PIVOT_TOL * hi).count()
}

/// Householder QR returning the full orthogonal factor `Q` (rows x rows) and `R`.
pub fn householder_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let mut r = m.clone();
    let mut q = DMatrix::<f64>::identity(rows, rows);
    for k in 0..cols.min(rows.saturating_sub(1)) {
        let x = r.view((k, k), (rows - k, 1)).clone_owned();
        let alpha = x.norm();
        if alpha == 0.0 {
            continue;
        }
        let mut v = x;
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = v.norm();
        if vn == 0.0 {
            continue;
        }
        v /= vn;
        // R <- (I - 2vv') R on the trailing block
        let mut block = r.view_mut((k, 0), (rows - k, cols));
        let w = block.tr_mul(&v);
        block -= 2.0 * &v * w.transpose();
        // Q <- Q (I - 2vv')
        let mut qb = q.view_mut((0, k), (rows, rows - k));
        let u = &qb * &v;
        qb -= 2.0 * u * v.transpose();
    }
    (q, r)
}

/// Orthonormal basis of the null space of a full-row-rank `a` (rows <= cols).
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 {
        return DMatrix::identity(cols, cols);
    }
    let (q, _) = householder_qr(&a.transpose());
    q.columns(rows, cols - rows).into_owned()
}

/// Least-squares solution of `m x ≈ b`. Tall matrices with full column rank
/// go through Householder QR; wide or rank-deficient ones get the minimum-norm
/// solution from an SVD.
pub fn least_squares(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Some(DVector::zeros(0));
    }
    if rows >= cols {
        let (q, r) = householder_qr(m);
        let r_top = r.view((0, 0), (cols, cols)).into_owned();
        let scale = r_top.diagonal().amax();
        if r_top.diagonal().iter().all(|d| d.abs() > PIVOT_TOL * scale) {
            return r_top.solve_upper_triangular(&q.tr_mul(b).rows(0, cols).into_owned());
        }
    }
    let svd = m.clone().svd(true, true);
    let tol = PIVOT_TOL * svd.singular_values.max();
    svd.solve(b, tol).ok()
}
