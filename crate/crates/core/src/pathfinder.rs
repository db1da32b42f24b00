//! RRT* waypoints between paired terminal vertices.
//!
//! The first pair is planned freely. Later pairs sample only inside a union of
//! balls around a guide polyline, the first path blended linearly onto their
//! own endpoints, so every path threads the same gaps. Paths are then
//! shortcut, checked for homotopy, and resampled to a common waypoint count.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{OrderPairSet, Point};
use crate::par::{self, Parallelism};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("NoPathFound: pair {pair} not connected after {iterations} iterations")]
    NoPathFound { pair: usize, iterations: usize },
    #[error("InvalidEndpoints: {0}")]
    InvalidEndpoints(String),
    #[error("HomotopyCheckFailed: paths {0} and {1} are separated by an obstacle")]
    HomotopyCheckFailed(usize, usize),
    #[error("TooFewSegments: path {path} needs at least {needed} segments, target is {target}")]
    TooFewSegments { path: usize, needed: usize, target: usize },
    #[error("InvalidObstacles: {0}")]
    InvalidObstacles(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

impl PathError {
    pub fn kind(&self) -> &'static str {
        match self {
            PathError::NoPathFound { .. } => "NoPathFound",
            PathError::InvalidEndpoints(_) => "InvalidEndpoints",
            PathError::HomotopyCheckFailed(..) => "HomotopyCheckFailed",
            PathError::TooFewSegments { .. } => "TooFewSegments",
            PathError::InvalidObstacles(_) => "InvalidObstacles",
            PathError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn new(min: Point, max: Point) -> Result<Self, PathError> {
        if min.len() != max.len() {
            return Err(PathError::InvalidObstacles("corner dimensions differ".into()));
        }
        if min.iter().zip(max.iter()).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(PathError::InvalidObstacles(
                "box min corner must be below max corner in every coordinate".into(),
            ));
        }
        Ok(Self { min, max })
    }

    fn contains(&self, p: &Point, r: f64) -> bool {
        (0..p.len()).all(|c| p[c] >= self.min[c] - r && p[c] <= self.max[c] + r)
    }

    /// Closed slab test of the segment `a -> b` against the box inflated by `r`.
    fn hits_segment(&self, a: &Point, b: &Point, r: f64) -> bool {
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        for c in 0..a.len() {
            let lo = self.min[c] - r;
            let hi = self.max[c] + r;
            let d = b[c] - a[c];
            if d == 0.0 {
                if a[c] < lo || a[c] > hi {
                    return false;
                }
                continue;
            }
            let mut ta = (lo - a[c]) / d;
            let mut tb = (hi - a[c]) / d;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

/// Boxes inflated by the robot radius.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSet {
    boxes: Vec<Aabb>,
    inflation: f64,
}

impl ObstacleSet {
    pub fn new(boxes: Vec<Aabb>, inflation: f64) -> Result<Self, PathError> {
        if !(inflation >= 0.0) || !inflation.is_finite() {
            return Err(PathError::InvalidObstacles(format!("inflation {inflation}")));
        }
        if let Some(first) = boxes.first() {
            let d = first.min.len();
            if boxes.iter().any(|b| b.min.len() != d) {
                return Err(PathError::InvalidObstacles("mixed box dimensions".into()));
            }
        }
        Ok(Self { boxes, inflation })
    }

    pub fn empty() -> Self {
        Self {
            boxes: Vec::new(),
            inflation: 0.0,
        }
    }

    pub fn boxes(&self) -> &[Aabb] {
        &self.boxes
    }

    pub fn inflation(&self) -> f64 {
        self.inflation
    }

    pub fn point_free(&self, p: &Point) -> bool {
        !self.boxes.iter().any(|b| b.contains(p, self.inflation))
    }

    pub fn segment_free(&self, a: &Point, b: &Point) -> bool {
        !self.boxes.iter().any(|bx| bx.hits_segment(a, b, self.inflation))
    }
}

/// Polyline `q_0 .. q_m` for order pair `pair_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPath {
    points: Vec<Point>,
    pair_index: usize,
}

impl WaypointPath {
    pub fn new(points: Vec<Point>, pair_index: usize) -> Result<Self, PathError> {
        if points.len() < 2 {
            return Err(PathError::InvalidEndpoints("a path needs at least two points".into()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(PathError::InvalidEndpoints("inconsistent or non-finite points".into()));
        }
        Ok(Self { points, pair_index })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn pair_index(&self) -> usize {
        self.pair_index
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Number of segments `m`.
    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    pub fn is_collision_free(&self, obs: &ObstacleSet) -> bool {
        self.points.iter().all(|p| obs.point_free(p))
            && self.points.windows(2).all(|w| obs.segment_free(&w[0], &w[1]))
    }

    /// Point at arc-length fraction `s` in `[0, 1]`.
    pub fn point_at_fraction(&self, s: f64) -> Point {
        let total = self.length();
        if total == 0.0 {
            return self.points[0].clone();
        }
        let mut target = s.clamp(0.0, 1.0) * total;
        for w in self.points.windows(2) {
            let len = (&w[1] - &w[0]).norm();
            if target <= len && len > 0.0 {
                return &w[0] + (target / len) * (&w[1] - &w[0]);
            }
            target -= len;
        }
        self.points[self.points.len() - 1].clone()
    }
}

/// RRT* parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RrtConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    pub goal_bias: f64,
    pub rewire_radius: f64,
    pub rng_seed: u64,
    pub corridor_shrink_radius: f64,
    /// Padding around the bounding box of endpoints and obstacles used as sampling region.
    pub sampling_margin: f64,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4000,
            step_size: 1.0,
            goal_bias: 0.1,
            rewire_radius: 3.0,
            rng_seed: 0,
            corridor_shrink_radius: 3.0,
            sampling_margin: 2.0,
        }
    }
}

impl RrtConfig {
    pub fn validate(&self) -> Result<(), PathError> {
        if !(self.step_size > 0.0) {
            return Err(PathError::InvalidConfig("step_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.goal_bias) {
            return Err(PathError::InvalidConfig("goal_bias must lie in [0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(PathError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.rewire_radius > 0.0) || !(self.corridor_shrink_radius > 0.0) {
            return Err(PathError::InvalidConfig("radii must be positive".into()));
        }
        if !(self.sampling_margin >= 0.0) {
            return Err(PathError::InvalidConfig("sampling_margin must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Sampling region: a box, optionally restricted to a tube of balls around a guide polyline.
struct Sampler {
    lo: Point,
    hi: Point,
    guide: Option<(Vec<Point>, Vec<f64>, f64)>,
}

impl Sampler {
    fn new(start: &Point, goal: &Point, obs: &ObstacleSet, margin: f64) -> Self {
        let mut lo = start.inf(goal);
        let mut hi = start.sup(goal);
        for b in obs.boxes() {
            lo = lo.inf(&b.min);
            hi = hi.sup(&b.max);
        }
        lo.add_scalar_mut(-margin);
        hi.add_scalar_mut(margin);
        Self { lo, hi, guide: None }
    }

    fn restrict(&mut self, guide: Vec<Point>, radius: f64) {
        let mut cum = vec![0.0];
        for w in guide.windows(2) {
            cum.push(cum[cum.len() - 1] + (&w[1] - &w[0]).norm());
        }
        self.guide = Some((guide, cum, radius));
    }

    fn inside(&self, p: &Point) -> bool {
        match &self.guide {
            None => true,
            Some((g, _, r)) => polyline_distance(p, g) <= *r,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        let d = self.lo.len();
        match &self.guide {
            None => DVector::from_fn(d, |c, _| rng.random_range(self.lo[c]..=self.hi[c])),
            Some((g, cum, r)) => {
                // a point along the guide by arc length, plus a uniform offset in the ball
                let total = cum[cum.len() - 1];
                let s = rng.random::<f64>() * total;
                let k = cum.windows(2).position(|w| s <= w[1]).unwrap_or(g.len() - 2);
                let seg = cum[k + 1] - cum[k];
                let f = if seg > 0.0 { (s - cum[k]) / seg } else { 0.0 };
                let base = &g[k] + f * (&g[k + 1] - &g[k]);
                loop {
                    let off = DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));
                    if off.norm() <= 1.0 {
                        return base + *r * off;
                    }
                }
            }
        }
    }
}

fn polyline_distance(p: &Point, poly: &[Point]) -> f64 {
    poly.windows(2)
        .map(|w| {
            let ab = &w[1] - &w[0];
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((p - &w[0]).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (p - (&w[0] + t * ab)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

fn check_endpoints(start: &Point, goal: &Point, obs: &ObstacleSet) -> Result<(), PathError> {
    if start.len() != goal.len() {
        return Err(PathError::InvalidEndpoints("start and goal dimensions differ".into()));
    }
    if let Some(b) = obs.boxes().first() {
        if b.min.len() != start.len() {
            return Err(PathError::InvalidEndpoints("obstacle dimension differs from endpoints".into()));
        }
    }
    if (start - goal).norm() == 0.0 {
        return Err(PathError::InvalidEndpoints("start equals goal".into()));
    }
    if !obs.point_free(start) || !obs.point_free(goal) {
        return Err(PathError::InvalidEndpoints("endpoint inside an inflated obstacle".into()));
    }
    Ok(())
}

/// RRT* with fixed-radius rewiring. Deterministic for a fixed seed.
pub fn find_path(
    start: &Point,
    goal: &Point,
    obs: &ObstacleSet,
    cfg: &RrtConfig,
) -> Result<WaypointPath, PathError> {
    cfg.validate()?;
    check_endpoints(start, goal, obs)?;
    let sampler = Sampler::new(start, goal, obs, cfg.sampling_margin);
    rrt_star(start, goal, obs, cfg, &sampler, cfg.rng_seed, 0)
}

fn rrt_star(
    start: &Point,
    goal: &Point,
    obs: &ObstacleSet,
    cfg: &RrtConfig,
    sampler: &Sampler,
    seed: u64,
    pair: usize,
) -> Result<WaypointPath, PathError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<Point> = vec![start.clone()];
    let mut parent: Vec<usize> = vec![0];
    let mut cost: Vec<f64> = vec![0.0];
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];

    for _ in 0..cfg.max_iterations {
        let target = if rng.random::<f64>() < cfg.goal_bias {
            goal.clone()
        } else {
            sampler.sample(&mut rng)
        };
        let (nearest, dist) = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, (n - &target).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("tree is never empty");
        if dist == 0.0 {
            continue;
        }
        let new = if dist <= cfg.step_size {
            target
        } else {
            &nodes[nearest] + (cfg.step_size / dist) * (&target - &nodes[nearest])
        };
        if !sampler.inside(&new) || !obs.point_free(&new) || !obs.segment_free(&nodes[nearest], &new) {
            continue;
        }
        let near: Vec<usize> = (0..nodes.len())
            .filter(|&i| (&nodes[i] - &new).norm() <= cfg.rewire_radius)
            .collect();
        let mut best_parent = nearest;
        let mut best_cost = cost[nearest] + (&nodes[nearest] - &new).norm();
        for &i in &near {
            let c = cost[i] + (&nodes[i] - &new).norm();
            if c < best_cost && obs.segment_free(&nodes[i], &new) {
                best_parent = i;
                best_cost = c;
            }
        }
        let id = nodes.len();
        nodes.push(new);
        parent.push(best_parent);
        cost.push(best_cost);
        children.push(Vec::new());
        children[best_parent].push(id);
        for &i in &near {
            if i == best_parent || i == 0 {
                continue;
            }
            let c = best_cost + (&nodes[i] - &nodes[id]).norm();
            if c + 1e-12 < cost[i] && obs.segment_free(&nodes[id], &nodes[i]) {
                let old = parent[i];
                children[old].retain(|&ch| ch != i);
                parent[i] = id;
                children[id].push(i);
                let delta = cost[i] - c;
                // propagate the improvement down the subtree
                let mut stack = vec![i];
                while let Some(v) = stack.pop() {
                    cost[v] -= delta;
                    stack.extend(children[v].iter().copied());
                }
            }
        }
    }

    let best = (0..nodes.len())
        .filter(|&i| (&nodes[i] - goal).norm() <= cfg.step_size && obs.segment_free(&nodes[i], goal))
        .map(|i| (i, cost[i] + (&nodes[i] - goal).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((last, _)) = best else {
        return Err(PathError::NoPathFound {
            pair,
            iterations: cfg.max_iterations,
        });
    };
    let mut chain = vec![goal.clone()];
    let mut v = last;
    loop {
        if (&nodes[v] - &chain[chain.len() - 1]).norm() > 0.0 {
            chain.push(nodes[v].clone());
        }
        if v == 0 {
            break;
        }
        v = parent[v];
    }
    chain.reverse();
    WaypointPath::new(chain, pair)
}

/// Greedy line-of-sight shortcutting: from each kept vertex jump to the
/// farthest later vertex that is directly visible.
pub fn shortcut(path: &WaypointPath, obs: &ObstacleSet) -> WaypointPath {
    let pts = path.points();
    let mut out = vec![pts[0].clone()];
    let mut i = 0;
    while i < pts.len() - 1 {
        let mut j = pts.len() - 1;
        while j > i + 1 && !obs.segment_free(&pts[i], &pts[j]) {
            j -= 1;
        }
        out.push(pts[j].clone());
        i = j;
    }
    WaypointPath {
        points: out,
        pair_index: path.pair_index,
    }
}

/// Number of arc-length fractions used by [`homotopy_check`].
pub const HOMOTOPY_SAMPLES: usize = 64;

/// First pair of paths whose same-fraction points cannot see each other.
pub fn homotopy_violation(paths: &[WaypointPath], obs: &ObstacleSet) -> Option<(usize, usize)> {
    let samples: Vec<Vec<Point>> = paths
        .iter()
        .map(|p| {
            (0..=HOMOTOPY_SAMPLES)
                .map(|s| p.point_at_fraction(s as f64 / HOMOTOPY_SAMPLES as f64))
                .collect()
        })
        .collect();
    for a in 0..paths.len() {
        for b in (a + 1)..paths.len() {
            if (0..=HOMOTOPY_SAMPLES).any(|s| !obs.segment_free(&samples[a][s], &samples[b][s])) {
                return Some((a, b));
            }
        }
    }
    None
}

/// Same-index waypoint segments of equalized paths are collision-free.
pub fn same_index_violation(paths: &[WaypointPath], obs: &ObstacleSet) -> Option<(usize, usize)> {
    for a in 0..paths.len() {
        for b in (a + 1)..paths.len() {
            let pa = paths[a].points();
            let pb = paths[b].points();
            if pa.len() != pb.len() || pa.iter().zip(pb).any(|(x, y)| !obs.segment_free(x, y)) {
                return Some((a, b));
            }
        }
    }
    None
}

pub fn homotopy_check(paths: &[WaypointPath], obs: &ObstacleSet) -> Result<(), PathError> {
    match homotopy_violation(paths, obs) {
        Some((a, b)) => Err(PathError::HomotopyCheckFailed(a, b)),
        None => Ok(()),
    }
}

/// The first path's polyline blended onto new endpoints.
fn guide_for(reference: &WaypointPath, start: &Point, goal: &Point) -> Vec<Point> {
    let pts = reference.points();
    let ds = start - &pts[0];
    let dg = goal - &pts[pts.len() - 1];
    let total = reference.length();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            acc += (p - &pts[i - 1]).norm();
        }
        let s = if total > 0.0 { acc / total } else { 0.0 };
        out.push(p + (1.0 - s) * &ds + s * &dg);
    }
    out
}

/// One path per order pair; pairs after the first sample around the first path.
pub fn find_homotopic_paths(
    pairs: &OrderPairSet,
    obs: &ObstacleSet,
    cfg: &RrtConfig,
    mode: Parallelism,
) -> Result<Vec<WaypointPath>, PathError> {
    cfg.validate()?;
    let q = pairs.q();
    for k in 0..q {
        let (s, g) = pairs.pair(k);
        check_endpoints(s, g, obs)?;
    }
    let (s0, g0) = pairs.pair(0);
    let sampler = Sampler::new(s0, g0, obs, cfg.sampling_margin);
    let first = rrt_star(s0, g0, obs, cfg, &sampler, cfg.rng_seed, 0)?;
    let first = shortcut(&first, obs);
    let rest = par::try_map_indexed(q - 1, mode, |i| {
        let k = i + 1;
        let (s, g) = pairs.pair(k);
        let mut sampler = Sampler::new(s, g, obs, cfg.sampling_margin);
        sampler.restrict(guide_for(&first, s, g), cfg.corridor_shrink_radius);
        let seed = cfg.rng_seed.wrapping_add(k as u64);
        rrt_star(s, g, obs, cfg, &sampler, seed, k).map(|p| shortcut(&p, obs))
    })?;
    let mut paths = Vec::with_capacity(q);
    paths.push(first);
    paths.extend(rest);
    homotopy_check(&paths, obs)?;
    Ok(paths)
}

/// Resample every path to exactly `m_target + 1` points.
///
/// Original vertices are kept; each input edge receives at least one output
/// segment and the remaining segments go to the edge with the longest current
/// sub-segment (lowest index on ties). Each edge is then split uniformly.
pub fn equalize_waypoints(paths: &[WaypointPath], m_target: usize) -> Result<Vec<WaypointPath>, PathError> {
    paths
        .iter()
        .enumerate()
        .map(|(idx, path)| {
            let mut pts: Vec<Point> = Vec::with_capacity(path.points.len());
            for p in &path.points {
                if pts.last().is_none_or(|l: &Point| (l - p).norm() > 0.0) {
                    pts.push(p.clone());
                }
            }
            if pts.len() < 2 {
                return Err(PathError::InvalidEndpoints("path has zero length".into()));
            }
            let edges = pts.len() - 1;
            if m_target < edges {
                return Err(PathError::TooFewSegments {
                    path: idx,
                    needed: edges,
                    target: m_target,
                });
            }
            let lens: Vec<f64> = pts.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
            let mut counts = vec![1usize; edges];
            for _ in edges..m_target {
                let mut best = 0;
                for e in 1..edges {
                    if lens[e] / counts[e] as f64 > lens[best] / counts[best] as f64 {
                        best = e;
                    }
                }
                counts[best] += 1;
            }
            let mut out = Vec::with_capacity(m_target + 1);
            for e in 0..edges {
                for j in 0..counts[e] {
                    let f = j as f64 / counts[e] as f64;
                    out.push(&pts[e] + f * (&pts[e + 1] - &pts[e]));
                }
            }
            out.push(pts[edges].clone());
            WaypointPath::new(out, path.pair_index)
        })
        .collect()
}
