use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use vtube::geometry::{self, assign_vertices, barycentric_weights, map_point, GeometryError};
use vtube::{OrderPairSet, Point, Terminal};

fn p(c: &[f64]) -> Point {
    Point::from_column_slice(c)
}

fn term(v: &[&[f64]]) -> Terminal {
    Terminal::new(v.iter().map(|c| p(c)).collect()).unwrap()
}

/// Convex polygon with `q` vertices on a circle, angles jittered inside equal sectors.
fn polygon(q: usize, center: (f64, f64), radius: f64, jitter: &[f64]) -> Terminal {
    let pts = (0..q)
        .map(|k| {
            let a = (k as f64 + 0.1 + 0.8 * jitter[k]) * std::f64::consts::TAU / q as f64;
            p(&[center.0 + radius * a.cos(), center.1 + radius * a.sin()])
        })
        .collect();
    Terminal::new(pts).unwrap()
}

fn combo(t: &Terminal, w: &[f64]) -> Point {
    let s: f64 = w.iter().sum();
    t.vertices().iter().zip(w).map(|(v, &wi)| v * (wi / s)).fold(DVector::zeros(t.dim()), |a, b| a + b)
}

/// Solve the (d+1)x(d+1) barycentric system for a simplex terminal.
fn simplex_oracle(t: &Terminal, x: &Point) -> DVector<f64> {
    let q = t.len();
    let d = t.dim();
    let mut m = DMatrix::zeros(d + 1, q);
    for (k, v) in t.vertices().iter().enumerate() {
        m.view_mut((0, k), (d, 1)).copy_from(v);
        m[(d, k)] = 1.0;
    }
    let mut rhs = DVector::zeros(d + 1);
    rhs.rows_mut(0, d).copy_from(x);
    rhs[d] = 1.0;
    m.lu().solve(&rhs).unwrap()
}

fn cost(t0: &Terminal, t1: &Terminal, perm: &[usize], w: f64) -> f64 {
    let d: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| (&t0.vertices()[i] - &t1.vertices()[j]).norm()).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    mean + w * d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// All permutations of 0..q in lexicographic order.
fn permutations(q: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; q], &mut out);
    out
}

#[test]
fn triangle_weight_example() {
    let t = term(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let x = p(&[0.25, 0.10]);
    let th = barycentric_weights(&x, &t).unwrap();
    let oracle = simplex_oracle(&t, &x);
    assert_relative_eq!(DVector::from_column_slice(th.as_slice()), oracle, epsilon = 1e-12);
    assert_relative_eq!(oracle, DVector::from_column_slice(&[0.65, 0.25, 0.10]), epsilon = 1e-12);
    assert_relative_eq!(t.combine(&th), x, epsilon = 1e-12);
}

#[test]
fn map_point_examples() {
    let s = term(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let g = term(&[&[10.0, 0.0], &[12.0, 0.0], &[10.0, 3.0]]);
    let pairs = OrderPairSet::new(s.clone(), g.clone(), vec![2, 0, 1]).unwrap();
    for k in 0..3 {
        assert_relative_eq!(map_point(&pairs, &s.vertices()[k]).unwrap(), g.vertices()[pairs.pairing()[k]], epsilon = 1e-12);
    }
    assert_relative_eq!(map_point(&pairs, &s.centroid()).unwrap(), g.centroid(), epsilon = 1e-12);
    let th = [0.65, 0.25, 0.10];
    let expect = (0..3).fold(DVector::zeros(2), |a, k| a + &g.vertices()[pairs.pairing()[k]] * th[k]);
    assert_relative_eq!(map_point(&pairs, &p(&[0.25, 0.10])).unwrap(), expect, epsilon = 1e-12);
}

#[test]
fn assignment_error_cases() {
    let a = term(&[&[0.0, 0.0], &[1.0, 0.0]]);
    let b = term(&[&[0.0, 5.0], &[1.0, 5.0], &[0.0, 6.0]]);
    assert!(matches!(assign_vertices(&a, &b, 1.0), Err(GeometryError::SizeMismatch(2, 3))));
    let big = polygon(13, (0.0, 0.0), 5.0, &[0.5; 13]);
    let big2 = polygon(13, (30.0, 0.0), 5.0, &[0.5; 13]);
    assert!(matches!(assign_vertices(&big, &big2, 1.0), Err(GeometryError::TooManyVertices(13))));
    let single = term(&[&[0.0, 0.0]]);
    let single2 = term(&[&[3.0, 0.0]]);
    assert_eq!(assign_vertices(&single, &single2, 1.0).unwrap().pairing(), &[0]);
}

#[test]
fn outside_point_reports_residual() {
    let t = term(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let e = barycentric_weights(&p(&[1.0, 1.0]), &t).unwrap_err();
    assert_eq!(e.kind(), "PointOutsideHull");
    assert!(geometry::hull_distance(&p(&[1.0, 1.0]), t.vertices()) > 0.7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn weights_round_trip(
        q in 3usize..=6,
        jitter in prop::collection::vec(0.0f64..1.0, 6),
        w in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let t = polygon(q, (3.0, -2.0), 4.0, &jitter);
        prop_assume!(w[..q].iter().sum::<f64>() > 1e-3);
        let x = combo(&t, &w[..q]);
        let th = barycentric_weights(&x, &t).unwrap();
        prop_assert!(th.min() >= -1e-9);
        prop_assert!((th.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!((t.combine(&th) - &x).amax() <= 1e-9);
    }

    #[test]
    fn tetra_weights_match_linear_solve(w in prop::collection::vec(0.0f64..1.0, 4)) {
        prop_assume!(w.iter().sum::<f64>() > 1e-3);
        let t = term(&[&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0], &[0.0, 3.0, 0.0], &[0.5, 0.5, 1.5]]);
        let x = combo(&t, &w);
        let th = barycentric_weights(&x, &t).unwrap();
        let oracle = simplex_oracle(&t, &x);
        prop_assert!((DVector::from_column_slice(th.as_slice()) - oracle).amax() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn map_point_is_linear(
        wa in prop::collection::vec(0.0f64..1.0, 3),
        wb in prop::collection::vec(0.0f64..1.0, 3),
        lam in 0.0f64..=1.0,
    ) {
        prop_assume!(wa.iter().sum::<f64>() > 1e-3 && wb.iter().sum::<f64>() > 1e-3);
        let s = term(&[&[0.0, -2.0], &[0.0, 6.0], &[-5.0, 2.0]]);
        let g = term(&[&[32.0, 1.0], &[32.0, 9.0], &[27.0, 5.0]]);
        let pairs = OrderPairSet::new(s.clone(), g, vec![0, 1, 2]).unwrap();
        let (a, b) = (combo(&s, &wa), combo(&s, &wb));
        let mixed = map_point(&pairs, &(&a * lam + &b * (1.0 - lam))).unwrap();
        let expect = map_point(&pairs, &a).unwrap() * lam + map_point(&pairs, &b).unwrap() * (1.0 - lam);
        prop_assert!((mixed - expect).amax() <= 1e-9);
    }

    #[test]
    fn assignment_is_brute_force_argmin(
        q in 1usize..=6,
        js in prop::collection::vec(0.0f64..1.0, 6),
        jg in prop::collection::vec(0.0f64..1.0, 6),
        gx in 5.0f64..30.0,
        gy in -10.0f64..10.0,
        radius in 1.0f64..6.0,
        w in 0.0f64..3.0,
    ) {
        let (s, g) = if q == 1 {
            (term(&[&[0.0, 0.0]]), term(&[&[gx, gy]]))
        } else if q == 2 {
            (term(&[&[0.0, 0.0], &[js[0], 2.0]]), term(&[&[gx, gy], &[gx + jg[0], gy + radius]]))
        } else {
            (polygon(q, (0.0, 0.0), 3.0, &js), polygon(q, (gx, gy), radius, &jg))
        };
        let got = assign_vertices(&s, &g, w).unwrap();
        let c_got = cost(&s, &g, got.pairing(), w);
        let all = permutations(q);
        let best = all.iter().map(|pm| cost(&s, &g, pm, w)).fold(f64::INFINITY, f64::min);
        prop_assert!(c_got <= best * (1.0 + 1e-12));
        let first = all.iter().find(|pm| cost(&s, &g, pm, w) <= best * (1.0 + 1e-12)).unwrap();
        prop_assert_eq!(got.pairing(), first.as_slice());
    }
}
