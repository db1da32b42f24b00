//! Chord-length, public and normalized knot vectors.

use crate::pathfinder::WaypointPath;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KnotError {
    #[error("ZeroChord: waypoints {0} and {1} coincide")]
    ZeroChord(usize, usize),
    #[error("LengthMismatch: knot vectors of lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("ZeroLength: total knot span is zero")]
    ZeroLength,
    #[error("InvalidKnots: {0}")]
    InvalidKnots(String),
}

impl KnotError {
    pub fn kind(&self) -> &'static str {
        match self {
            KnotError::ZeroChord(..) => "ZeroChord",
            KnotError::LengthMismatch(..) => "LengthMismatch",
            KnotError::ZeroLength => "ZeroLength",
            KnotError::InvalidKnots(_) => "InvalidKnots",
        }
    }
}

/// Strictly increasing knots starting at 0; normalized vectors end at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    u: Vec<f64>,
    normalized: bool,
}

impl KnotVector {
    pub fn new(u: Vec<f64>, normalized: bool) -> Result<Self, KnotError> {
        if u.len() < 2 {
            return Err(KnotError::InvalidKnots("need at least two knots".into()));
        }
        if u[0] != 0.0 {
            return Err(KnotError::InvalidKnots(format!("first knot is {}", u[0])));
        }
        if u.iter().any(|v| !v.is_finite()) || u.windows(2).any(|w| w[1] <= w[0]) {
            return Err(KnotError::InvalidKnots("knots must be finite and strictly increasing".into()));
        }
        if normalized && u[u.len() - 1] != 1.0 {
            return Err(KnotError::InvalidKnots("normalized knots must end at 1".into()));
        }
        Ok(Self { u, normalized })
    }

    /// Uniform normalized knots for `m` segments.
    pub fn uniform(m: usize) -> Self {
        let mut u: Vec<f64> = (0..=m).map(|i| i as f64 / m as f64).collect();
        u[m] = 1.0;
        Self { u, normalized: true }
    }

    pub fn values(&self) -> &[f64] {
        &self.u
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Number of segments `m`.
    pub fn segments(&self) -> usize {
        self.u.len() - 1
    }

    pub fn last(&self) -> f64 {
        self.u[self.u.len() - 1]
    }

    /// Segment containing `t`: right-open intervals, last one closed.
    pub fn segment_of(&self, t: f64) -> usize {
        let m = self.segments();
        match self.u[1..m].iter().position(|&k| t < k) {
            Some(i) => i,
            None => m - 1,
        }
    }
}

/// `u_0 = 0`, `u_i = u_{i-1} + |q_i - q_{i-1}|`.
pub fn chord_length_knots(path: &WaypointPath) -> Result<KnotVector, KnotError> {
    let pts = path.points();
    let mut u = Vec::with_capacity(pts.len());
    u.push(0.0);
    for i in 1..pts.len() {
        let chord = (&pts[i] - &pts[i - 1]).norm();
        if chord == 0.0 {
            return Err(KnotError::ZeroChord(i - 1, i));
        }
        u.push(u[i - 1] + chord);
    }
    KnotVector::new(u, false)
}

/// Componentwise mean of unnormalized knot vectors.
pub fn public_knots(all: &[KnotVector]) -> Result<KnotVector, KnotError> {
    let first = all
        .first()
        .ok_or_else(|| KnotError::InvalidKnots("no knot vectors".into()))?;
    let len = first.u.len();
    let mut sum = vec![0.0; len];
    for kv in all {
        if kv.u.len() != len {
            return Err(KnotError::LengthMismatch(len, kv.u.len()));
        }
        if kv.normalized {
            return Err(KnotError::InvalidKnots("public knots take unnormalized input".into()));
        }
        for (s, v) in sum.iter_mut().zip(&kv.u) {
            *s += v;
        }
    }
    let q = all.len() as f64;
    KnotVector::new(sum.into_iter().map(|s| s / q).collect(), false)
}

/// `t_i = u_i / u_m`.
pub fn normalize_knots(u: &KnotVector) -> Result<KnotVector, KnotError> {
    let total = u.last();
    if total <= 0.0 {
        return Err(KnotError::ZeroLength);
    }
    let mut t: Vec<f64> = u.u.iter().map(|v| v / total).collect();
    let m = t.len() - 1;
    t[m] = 1.0;
    KnotVector::new(t, true)
}
