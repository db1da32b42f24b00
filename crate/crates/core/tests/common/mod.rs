//! Shared helpers for integration tests: fixture loading and an independent
//! equality-constrained QP oracle.

#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use vtube::pathfinder::ObstacleSet;
use vtube::scenario::{self, Scenario};
use vtube::tube::{self, OptimalVirtualTube};
use vtube::par::Parallelism;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn load(name: &str) -> Scenario {
    scenario::load_scenario(&fixture(name)).expect("fixture loads")
}

pub fn plan(sc: &Scenario) -> OptimalVirtualTube {
    let pairs = sc.pairs().unwrap();
    let obstacles: ObstacleSet = sc.obstacles().unwrap();
    tube::build_tube(&pairs, &obstacles, &sc.rrt_config(), &sc.traj_config().unwrap(), Parallelism::Rayon)
        .expect("fixture plans")
}

/// Minimizer of `xᵀ H x` subject to `A x = b` by the null-space method:
/// power-of-two column scaling, SVD pseudo-inverse for a particular solution,
/// projector eigenvectors for the null space, Cholesky on the reduced Hessian,
/// and two refinement sweeps.
pub struct NullSpaceOracle {
    col: DVector<f64>,
    row: DVector<f64>,
    a_s: DMatrix<f64>,
    h_s: DMatrix<f64>,
    pinv: DMatrix<f64>,
    z: DMatrix<f64>,
    reduced: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn pow2(x: f64) -> f64 {
    if x > 0.0 {
        2f64.powi(-(x.log2().round() as i32))
    } else {
        1.0
    }
}

impl NullSpaceOracle {
    pub fn new(h: &DMatrix<f64>, a: &DMatrix<f64>) -> Self {
        let n = a.ncols();
        let col = DVector::from_fn(n, |j, _| pow2(a.column(j).amax()));
        let scaled = a * DMatrix::from_diagonal(&col);
        let row = DVector::from_fn(a.nrows(), |i, _| pow2(scaled.row(i).norm()));
        let a_s = DMatrix::from_diagonal(&row) * scaled;
        let h_s = DMatrix::from_diagonal(&col) * h * DMatrix::from_diagonal(&col);
        let svd = a_s.transpose().svd(true, false);
        let smax = svd.singular_values.max();
        let u = svd.u.unwrap();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
            .collect();
        let range = DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])]);
        let sv = DVector::from_fn(keep.len(), |i, _| svd.singular_values[keep[i]]);
        // A_s = V S Uᵀ with U spanning the row space, so A_s⁺ = U S⁻¹ Vᵀ
        let svd_full = a_s.transpose().svd(true, true);
        let v_t = svd_full.v_t.unwrap();
        let vk = DMatrix::from_fn(a_s.nrows(), keep.len(), |r, c| v_t[(keep[c], r)]);
        let pinv = &range * DMatrix::from_diagonal(&sv.map(|s| 1.0 / s)) * vk.transpose();
        let proj = DMatrix::identity(n, n) - &range * range.transpose();
        let eig = SymmetricEigen::new(proj);
        let null: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
        let z = DMatrix::from_fn(n, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);
        let red = z.transpose() * &h_s * &z;
        let red = 0.5 * (&red + red.transpose());
        let reduced = red.cholesky().expect("reduced Hessian is positive definite");
        Self { col, row, a_s, h_s, pinv, z, reduced }
    }

    pub fn null_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Basis of the null space of `A` in the original variables.
    pub fn null_basis(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.col) * &self.z
    }

    /// Least-squares `λ` with `Aᵀ λ ≈ -g`.
    pub fn multipliers(&self, g: &DVector<f64>) -> DVector<f64> {
        let mu = -(self.pinv.transpose() * g.component_mul(&self.col));
        mu.component_mul(&self.row)
    }

    /// Null-space solve of `[2H Aᵀ; A 0] [y; l] = [r1; r2]` in scaled variables.
    fn correction(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let yp = &self.pinv * r2;
        let rhs = self.z.transpose() * (r1 - 2.0 * (&self.h_s * &yp));
        let dz = self.reduced.solve(&rhs) / 2.0;
        let dy = yp + &self.z * dz;
        let dl = self.pinv.transpose() * (r1 - 2.0 * (&self.h_s * &dy));
        (dy, dl)
    }

    /// KKT refinement with residuals accumulated in double-double.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let b_s = b.component_mul(&self.row);
        let n = self.a_s.ncols();
        let (mut y, mut l) = self.correction(&DVector::zeros(n), &b_s);
        for _ in 0..6 {
            // r1 = -2 H y - Aᵀ l, r2 = b - A y
            let r1 = DVector::from_fn(n, |i, _| {
                let mut acc = Dd::default();
                for j in 0..n {
                    acc.add_prod(-2.0 * self.h_s[(i, j)], y[j]);
                }
                for k in 0..self.a_s.nrows() {
                    acc.add_prod(-self.a_s[(k, i)], l[k]);
                }
                acc.value()
            });
            let r2 = DVector::from_fn(self.a_s.nrows(), |i, _| {
                let mut acc = Dd::default();
                acc.add(b_s[i]);
                for j in 0..n {
                    acc.add_prod(-self.a_s[(i, j)], y[j]);
                }
                acc.value()
            });
            let (dy, dl) = self.correction(&r1, &r2);
            y += dy;
            l += dl;
        }
        y.component_mul(&self.col)
    }
}

/// `Σ a_i b_i` accumulated in double-double.
pub fn dot_dd(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = Dd::default();
    for (x, y) in a.iter().zip(b) {
        acc.add_prod(*x, *y);
    }
    acc.value()
}

/// `m x - rhs` with each row accumulated in double-double.
pub fn residual_dd(m: &DMatrix<f64>, x: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| {
        let mut acc = Dd::default();
        acc.add(-rhs[i]);
        for j in 0..m.ncols() {
            acc.add_prod(m[(i, j)], x[j]);
        }
        acc.value()
    })
}

/// `xᵀ H x` in double-double.
pub fn quad_dd(h: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let hx = residual_dd(h, x, &DVector::zeros(x.len()));
    dot_dd(hx.as_slice(), x.as_slice())
}

/// Double-double accumulator (error-free transformations).
#[derive(Default, Clone, Copy)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    pub fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (x - bb);
        self.hi = s;
        self.lo += err;
    }

    pub fn add_prod(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        self.lo += e;
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}
