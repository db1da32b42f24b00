//! Half-space form of small convex hulls in 2-D and 3-D.
//!
//! Point counts here are tiny (tube cross-sections, a dozen points at most),
//! so 2-D uses Andrew's monotone chain and 3-D checks every point triple.

use nalgebra::{DVector, Vector3};

/// Affine inequality `normal . p <= offset` with a unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl HalfSpace {
    /// Signed distance, positive outside.
    pub fn signed_distance(&self, p: &DVector<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Affine dimension of a point set (tolerance relative to its extent).
pub fn affine_dim(points: &[DVector<f64>]) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let d = points[0].len();
    let diffs = nalgebra::DMatrix::from_fn(d, points.len() - 1, |r, c| points[c + 1][r] - points[0][r]);
    let scale = diffs.amax();
    if scale == 0.0 {
        return 0;
    }
    diffs
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-9 * scale)
        .count()
}

/// Facets of the convex hull of `points`, or `None` when the hull is not
/// full-dimensional (fewer than `d + 1` affinely independent points).
pub fn halfspaces(points: &[DVector<f64>]) -> Option<Vec<HalfSpace>> {
    let d = points.first()?.len();
    if affine_dim(points) < d {
        return None;
    }
    match d {
        2 => Some(halfspaces_2d(points)),
        3 => Some(halfspaces_3d(points)),
        _ => None,
    }
}

fn halfspaces_2d(points: &[DVector<f64>]) -> Vec<HalfSpace> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    // Counter-clockwise hull: outward normal of edge a->b is (dy, -dx).
    let k = hull.len();
    (0..k)
        .map(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % k];
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = dx.hypot(dy);
            let normal = DVector::from_vec(vec![dy / len, -dx / len]);
            let offset = normal[0] * a.0 + normal[1] * a.1;
            HalfSpace { normal, offset }
        })
        .collect()
}

fn halfspaces_3d(points: &[DVector<f64>]) -> Vec<HalfSpace> {
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
    let scale = pts
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(1.0, f64::max);
    let tol = 1e-10 * scale;
    let mut out: Vec<HalfSpace> = Vec::new();
    let n = pts.len();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let normal = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
                let len = normal.norm();
                if len <= 1e-12 * scale * scale {
                    continue;
                }
                let normal = normal / len;
                let offset = normal.dot(&pts[i]);
                let below = pts.iter().all(|p| normal.dot(p) <= offset + tol);
                let above = pts.iter().all(|p| normal.dot(p) >= offset - tol);
                let facet = if below {
                    Some((normal, offset))
                } else if above {
                    Some((-normal, -offset))
                } else {
                    None
                };
                if let Some((nrm, off)) = facet {
                    let dup = out.iter().any(|h| {
                        (h.offset - off).abs() <= tol
                            && (0..3).all(|c| (h.normal[c] - nrm[c]).abs() <= 1e-9)
                    });
                    if !dup {
                        out.push(HalfSpace {
                            normal: DVector::from_column_slice(nrm.as_slice()),
                            offset: off,
                        });
                    }
                }
            }
        }
    }
    out
}
