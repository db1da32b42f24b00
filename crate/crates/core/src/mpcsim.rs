//! Swarm simulation: discrete double integrators tracking tube members with
//! per-robot MPC, ellipse avoidance half-spaces and tube feasible sets.
//!
//! Every tick, all robots read the same snapshot, solve their MPC problems
//! (concurrently when the `parallel` feature is on) and apply the first input
//! simultaneously. Neighbor futures are the neighbors' previous plans shifted
//! by one step; on the first tick they are constant-velocity extrapolations.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{self, BarycentricWeights, Point};
use crate::hull::{self, HalfSpace};
use crate::par::{self, Parallelism};
use crate::qp::{self, QpOptions, QpProblem};
use crate::trajopt::PiecewisePolynomial;
use crate::tube::OptimalVirtualTube;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("StartOutsideTerminal: robot {robot} ({detail})")]
    StartOutsideTerminal { robot: usize, detail: String },
    #[error("Infeasible: MPC solve failed for robot {robot}: {detail}")]
    Infeasible { robot: usize, detail: String },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

impl SimError {
    pub fn kind(&self) -> &'static str {
        match self {
            SimError::StartOutsideTerminal { .. } => "StartOutsideTerminal",
            SimError::Infeasible { .. } => "Infeasible",
            SimError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub id: usize,
    pub p: Point,
    pub v: DVector<f64>,
}

impl RobotState {
    pub fn at_rest(id: usize, p: Point) -> Self {
        let d = p.len();
        Self { id, p, v: DVector::zeros(d) }
    }
}

/// Transition matrices of the sampled robot model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DynamicsModel {
    /// `p+ = p + Ts v`, `v+ = v + Ts u`.
    #[default]
    DoubleIntegrator,
    /// `A = [I, Ts I; 0, 0]`, `B = [0; Ts I]`: velocity is replaced by `Ts u` each step.
    ZeroVelocityBlock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteDynamics {
    pub ts: f64,
    pub model: DynamicsModel,
}

impl DiscreteDynamics {
    pub fn new(ts: f64, model: DynamicsModel) -> Self {
        Self { ts, model }
    }

    /// `A` for state `[p; v]` in `d` dimensions.
    pub fn a(&self, d: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            a[(i, i)] = 1.0;
            a[(i, d + i)] = self.ts;
            if self.model == DynamicsModel::DoubleIntegrator {
                a[(d + i, d + i)] = 1.0;
            }
        }
        a
    }

    pub fn b(&self, d: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(2 * d, d);
        for i in 0..d {
            b[(d + i, i)] = self.ts;
        }
        b
    }

    pub fn step(&self, s: &RobotState, u: &DVector<f64>) -> RobotState {
        let p = &s.p + self.ts * &s.v;
        let v = match self.model {
            DynamicsModel::DoubleIntegrator => &s.v + self.ts * u,
            DynamicsModel::ZeroVelocityBlock => self.ts * u,
        };
        RobotState { id: s.id, p, v }
    }
}

/// Ellipse `{ p : |E (p - c)| <= 1 }` around a neighbor center `c`; this is
/// the Minkowski sum of two robot bodies, so its radius is the full safety
/// distance (times `inflation`).
#[derive(Debug, Clone, PartialEq)]
pub struct AvoidanceModel {
    pub e_diag: DVector<f64>,
    pub safety_distance: f64,
}

impl AvoidanceModel {
    /// Sphere of radius `safety_distance * inflation`.
    pub fn spherical(d: usize, safety_distance: f64, inflation: f64) -> Self {
        Self {
            e_diag: DVector::from_element(d, 1.0 / (safety_distance * inflation)),
            safety_distance,
        }
    }

    fn scaled(&self, w: &DVector<f64>) -> DVector<f64> {
        w.component_mul(&self.e_diag)
    }
}

/// Half-space `normal . p >= offset` (robot `i` stays on the far side).
#[derive(Debug, Clone, PartialEq)]
pub struct AvoidancePlane {
    pub neighbor: usize,
    pub step: usize,
    pub normal: DVector<f64>,
    pub offset: f64,
}

/// Tangent half-spaces to each neighbor's ellipse where the segment from the
/// neighbor's predicted center to robot `i`'s predicted position exits it.
///
/// `prev_normals[j]` is the normal used against neighbor `j` last tick; it is
/// reused when centers coincide, with the first coordinate axis as a last resort.
pub fn avoidance_halfspaces(
    self_pred: &[Point],
    neighbors_pred: &[(usize, Vec<Point>)],
    model: &AvoidanceModel,
    prev_normals: &dyn Fn(usize) -> Option<DVector<f64>>,
) -> Vec<AvoidancePlane> {
    let mut out = Vec::new();
    for (j, pred) in neighbors_pred {
        for (k, (pi, pj)) in self_pred.iter().zip(pred).enumerate() {
            let w = pi - pj;
            let ew = model.scaled(&w);
            let en = ew.norm();
            let normal = if w.norm() <= 1e-9 || en == 0.0 {
                prev_normals(*j).unwrap_or_else(|| {
                    let mut e = DVector::zeros(pi.len());
                    e[0] = 1.0;
                    e
                })
            } else {
                // gradient of |E(z - c)|^2 / 2 at the exit point z = c + w / |E w|
                let g = model.scaled(&model.scaled(&w)) / en;
                g.normalize()
            };
            let exit = if w.norm() <= 1e-9 || en == 0.0 {
                // boundary point along the chosen normal
                let en2 = model.scaled(&normal).norm();
                pj + &normal / en2
            } else {
                pj + &w / en
            };
            out.push(AvoidancePlane {
                neighbor: *j,
                step: k,
                offset: normal.dot(&exit),
                normal,
            });
        }
    }
    out
}

/// Controller configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub ts: f64,
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_u: f64,
    pub q_slack: f64,
    /// `Q_{x,N} = terminal_factor * Q_x`.
    pub terminal_factor: f64,
    /// Infinity-norm input bound; `None` leaves inputs free.
    pub u_max: Option<f64>,
    /// Tracking tolerance for robots on the tube boundary.
    pub eps_c: f64,
    /// Reference speed `v_R` of the time scaling.
    pub v_ref: f64,
    pub dynamics: DynamicsModel,
    /// Half-width (seconds) of the time window whose cross-sections form the tube feasible set.
    pub tube_window: f64,
    /// Neighbors farther than this are ignored by avoidance.
    pub sensing_radius: f64,
    pub boundary_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            ts: 0.1,
            q_pos: 10.0,
            q_vel: 1.0,
            q_u: 0.1,
            q_slack: 1000.0,
            terminal_factor: 10.0,
            u_max: Some(10.0),
            eps_c: 0.5,
            v_ref: 1.0,
            dynamics: DynamicsModel::DoubleIntegrator,
            tube_window: 0.5,
            sensing_radius: 5.0,
            boundary_tol: 1e-6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.ts > 0.0) {
            return bad("ts must be positive");
        }
        if !(self.q_pos > 0.0 && self.q_vel > 0.0 && self.q_u > 0.0 && self.q_slack > 0.0) {
            return bad("weights must be positive");
        }
        if !(self.terminal_factor > 0.0) {
            return bad("terminal_factor must be positive");
        }
        if !(self.eps_c > 0.0) {
            return bad("eps_c must be positive");
        }
        if !(self.v_ref > 0.0) {
            return bad("v_ref must be positive");
        }
        if self.u_max.is_some_and(|u| !(u > 0.0)) {
            return bad("u_max must be positive");
        }
        Ok(())
    }

    pub fn dynamics(&self) -> DiscreteDynamics {
        DiscreteDynamics::new(self.ts, self.dynamics)
    }
}

/// `t(s) = (v_R / u_m) s`, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScaling {
    pub rate: f64,
}

impl TimeScaling {
    pub fn new(u_m: f64, v_ref: f64) -> Self {
        Self { rate: v_ref / u_m }
    }

    pub fn t(&self, s: f64) -> f64 {
        (self.rate * s).clamp(0.0, 1.0)
    }

    /// Wall-clock duration of the whole trajectory, `u_m / v_R`.
    pub fn duration(&self) -> f64 {
        1.0 / self.rate
    }
}

pub fn time_scaling(u_m: f64, v_ref: f64) -> TimeScaling {
    TimeScaling::new(u_m, v_ref)
}

/// Desired states and inputs over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RefWindow {
    pub p: Vec<Point>,
    pub v: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Normalized time of each entry.
    pub t: Vec<f64>,
}

/// `N + 1` desired states `(h(t), h'(t) dt/ds)` and inputs `h''(t) (dt/ds)^2`
/// starting at `s_now`; past the end the goal is held at rest.
pub fn reference_window(
    traj: &PiecewisePolynomial,
    scaling: &TimeScaling,
    s_now: f64,
    horizon: usize,
    ts: f64,
) -> RefWindow {
    let mut w = RefWindow {
        p: Vec::with_capacity(horizon + 1),
        v: Vec::with_capacity(horizon + 1),
        u: Vec::with_capacity(horizon + 1),
        t: Vec::with_capacity(horizon + 1),
    };
    let d = traj.dim();
    for k in 0..=horizon {
        let s = s_now + k as f64 * ts;
        let raw = scaling.rate * s;
        if raw >= 1.0 {
            w.p.push(traj.end());
            w.v.push(DVector::zeros(d));
            w.u.push(DVector::zeros(d));
            w.t.push(1.0);
        } else {
            let t = raw.max(0.0);
            let r = scaling.rate;
            w.p.push(traj.evaluate(t, 0).expect("t is clamped to the domain"));
            w.v.push(traj.evaluate(t, 1).expect("t is clamped to the domain") * r);
            w.u.push(traj.evaluate(t, 2).expect("t is clamped to the domain") * (r * r));
            w.t.push(t);
        }
    }
    w
}

/// Tube constraint applied to one robot.
#[derive(Debug, Clone, PartialEq)]
pub enum TubeSet {
    /// Per horizon step: facets of the local cross-section hull (empty when degenerate).
    Interior(Vec<Vec<HalfSpace>>),
    /// Infinity-norm ball of radius `eps_c` around the reference.
    Boundary,
    Unconstrained,
}

/// Result of one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutput {
    pub u0: DVector<f64>,
    /// Predicted positions for steps `0..=N` (step 0 is the current position).
    pub predicted: Vec<Point>,
    pub max_slack: f64,
}

/// Solve the condensed horizon QP. Variables: inputs `u_0..u_{N-1}`, an
/// avoidance slack and a tube slack per step.
pub fn mpc_step(
    state: &RobotState,
    reference: &RefWindow,
    planes: &[AvoidancePlane],
    tube: &TubeSet,
    cfg: &MpcConfig,
) -> Result<MpcOutput, SimError> {
    let d = state.p.len();
    let n = cfg.horizon;
    let dynamics = cfg.dynamics();
    if n == 0 {
        return Ok(MpcOutput {
            u0: reference.u.first().cloned().unwrap_or_else(|| DVector::zeros(d)),
            predicted: vec![state.p.clone()],
            max_slack: 0.0,
        });
    }
    let a = dynamics.a(d);
    let b = dynamics.b(d);
    let sx = 2 * d;
    let nu = n * d;
    let nvar = nu + 2 * n;
    let slack_a = |k: usize| nu + (k - 1);
    let slack_t = |k: usize| nu + n + (k - 1);

    // x_k = A^k x0 + sum_{j<k} A^{k-1-j} B u_j, k = 1..N
    let mut x0 = DVector::zeros(sx);
    x0.rows_mut(0, d).copy_from(&state.p);
    x0.rows_mut(d, d).copy_from(&state.v);
    let mut pows = vec![DMatrix::identity(sx, sx)];
    for k in 1..=n {
        pows.push(&a * &pows[k - 1]);
    }
    let free: Vec<DVector<f64>> = (0..=n).map(|k| &pows[k] * &x0).collect();
    let gain = |k: usize| -> DMatrix<f64> {
        let mut g = DMatrix::zeros(sx, nvar);
        for j in 0..k {
            let blk = &pows[k - 1 - j] * &b;
            g.view_mut((0, j * d), (sx, d)).copy_from(&blk);
        }
        g
    };
    let gains: Vec<DMatrix<f64>> = (0..=n).map(gain).collect();

    let mut hess = DMatrix::zeros(nvar, nvar);
    let mut lin = DVector::zeros(nvar);
    for k in 1..=n {
        let scale = if k == n { cfg.terminal_factor } else { 1.0 };
        let mut qdiag = DVector::zeros(sx);
        for c in 0..d {
            qdiag[c] = cfg.q_pos * scale;
            qdiag[d + c] = cfg.q_vel * scale;
        }
        let mut xd = DVector::zeros(sx);
        xd.rows_mut(0, d).copy_from(&reference.p[k]);
        xd.rows_mut(d, d).copy_from(&reference.v[k]);
        let g = &gains[k];
        let resid = &free[k] - xd;
        let qg = DMatrix::from_fn(sx, nvar, |r, c| qdiag[r] * g[(r, c)]);
        hess += 2.0 * g.transpose() * &qg;
        lin += 2.0 * qg.transpose() * resid;
    }
    for k in 0..n {
        for c in 0..d {
            let i = k * d + c;
            hess[(i, i)] += 2.0 * cfg.q_u;
            lin[i] -= 2.0 * cfg.q_u * reference.u[k][c];
        }
    }
    for k in 1..=n {
        hess[(slack_a(k), slack_a(k))] += 2.0 * cfg.q_slack;
        hess[(slack_t(k), slack_t(k))] += 2.0 * cfg.q_slack;
    }

    // inequality rows: (row, rhs)
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let pos_row = |k: usize, dir: &DVector<f64>| -> (DVector<f64>, f64) {
        // dir . p_k = dir . free_p + dir . G_p u
        let g = &gains[k];
        let row = DVector::from_fn(nvar, |c, _| (0..d).map(|r| dir[r] * g[(r, c)]).sum());
        let constant: f64 = (0..d).map(|r| dir[r] * free[k][r]).sum();
        (row, constant)
    };
    for pl in planes {
        let k = pl.step;
        if k == 0 || k > n {
            continue;
        }
        // normal . p_k >= offset - s_k  ->  -normal . p_k - s_k <= -offset
        let neg = -&pl.normal;
        let (mut row, constant) = pos_row(k, &neg);
        row[slack_a(k)] = -1.0;
        rows.push((row, -pl.offset - constant));
    }
    match tube {
        TubeSet::Interior(facets) => {
            for k in 1..=n {
                for h in facets.get(k).map(|v| v.as_slice()).unwrap_or(&[]) {
                    let (mut row, constant) = pos_row(k, &h.normal);
                    row[slack_t(k)] = -1.0;
                    rows.push((row, h.offset - constant));
                }
            }
        }
        TubeSet::Boundary => {
            for k in 1..=n {
                for c in 0..d {
                    for sign in [1.0, -1.0] {
                        let mut e = DVector::zeros(d);
                        e[c] = sign;
                        let (mut row, constant) = pos_row(k, &e);
                        row[slack_t(k)] = -1.0;
                        rows.push((row, cfg.eps_c + sign * reference.p[k][c] - constant));
                    }
                }
            }
        }
        TubeSet::Unconstrained => {}
    }
    for k in 1..=n {
        for idx in [slack_a(k), slack_t(k)] {
            let mut row = DVector::zeros(nvar);
            row[idx] = -1.0;
            rows.push((row, 0.0));
        }
    }
    if let Some(umax) = cfg.u_max {
        for i in 0..nu {
            for sign in [1.0, -1.0] {
                let mut row = DVector::zeros(nvar);
                row[i] = sign;
                rows.push((row, umax));
            }
        }
    }
    let mut g = DMatrix::zeros(rows.len(), nvar);
    let mut h = DVector::zeros(rows.len());
    for (r, (row, rhs)) in rows.into_iter().enumerate() {
        g.set_row(r, &row.transpose());
        h[r] = rhs;
    }
    let hess = 0.5 * (&hess + hess.transpose());
    let problem = QpProblem::unconstrained(hess, lin).with_inequalities(g, h);
    let sol = qp::solve(&problem, &QpOptions::default()).map_err(|e| SimError::Infeasible {
        robot: state.id,
        detail: e.to_string(),
    })?;
    let z = sol.x;
    let predicted = (0..=n)
        .map(|k| {
            let xk = &free[k] + &gains[k] * &z;
            xk.rows(0, d).into_owned()
        })
        .collect();
    let max_slack = (nu..nvar).map(|i| z[i]).fold(0.0, f64::max);
    Ok(MpcOutput {
        u0: z.rows(0, d).into_owned(),
        predicted,
        max_slack,
    })
}

/// Everything the simulator needs besides the tube.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mpc: MpcConfig,
    pub avoidance: AvoidanceModel,
    pub arrival_radius: f64,
    /// Seconds; `None` means three times the nominal traversal time.
    pub time_limit: Option<f64>,
}

impl SimConfig {
    pub fn new(d: usize, safety_distance: f64) -> Self {
        Self {
            mpc: MpcConfig::default(),
            avoidance: AvoidanceModel::spherical(d, safety_distance, 1.1),
            arrival_radius: 0.2,
            time_limit: None,
        }
    }
}

/// One logged row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub tick: usize,
    pub robot: usize,
    pub p: Point,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub ts: f64,
    pub robots: usize,
    pub goals: Vec<Point>,
    pub rows: Vec<LogRow>,
    pub max_slack: f64,
}

impl SimLog {
    pub fn ticks(&self) -> usize {
        self.rows.len().checked_div(self.robots).unwrap_or(0)
    }

    /// Rows of tick `k` (robots in id order).
    pub fn tick(&self, k: usize) -> &[LogRow] {
        &self.rows[k * self.robots..(k + 1) * self.robots]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub average_time: f64,
    pub arrival_rate: f64,
    pub average_speed: f64,
    pub min_pairwise_distance: f64,
}

/// Tube-boundary test for a start point: on a simplex terminal, a vanishing
/// weight; otherwise distance to a terminal facet.
fn on_boundary(tube: &OptimalVirtualTube, p: &Point, theta: &BarycentricWeights, tol: f64) -> bool {
    let start = tube.pairs().start();
    let d = start.dim();
    if start.len() <= d + 1 {
        return theta.min() <= tol;
    }
    match hull::halfspaces(start.vertices()) {
        Some(facets) => facets.iter().any(|h| -h.signed_distance(p) <= tol),
        None => theta.min() <= tol,
    }
}

fn cross_section_facets(tube: &OptimalVirtualTube, scaling: &TimeScaling, s: f64, window: f64) -> Vec<HalfSpace> {
    let mut pts = Vec::new();
    for ds in [-window, 0.0, window] {
        let t = scaling.t(s + ds);
        if let Ok(cs) = tube.cross_section(t) {
            pts.extend(cs.points);
        }
    }
    hull::halfspaces(&pts).unwrap_or_default()
}

fn shift_plan(plan: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = plan[1..].to_vec();
    out.push(plan[plan.len() - 1].clone());
    out
}

fn constant_velocity(s: &RobotState, n: usize, ts: f64) -> Vec<Point> {
    (0..=n).map(|k| &s.p + (k as f64 * ts) * &s.v).collect()
}

/// Run the swarm until every robot is within `arrival_radius` of its goal or
/// the time limit passes.
pub fn simulate(
    tube: &OptimalVirtualTube,
    starts: &[Point],
    cfg: &SimConfig,
    mode: Parallelism,
) -> Result<SimLog, SimError> {
    cfg.mpc.validate()?;
    let d = tube.config().poly.dim;
    let scaling = TimeScaling::new(tube.public_knots().last(), cfg.mpc.v_ref);
    let time_limit = cfg.time_limit.unwrap_or(3.0 * scaling.duration());
    let n = cfg.mpc.horizon;
    let ts = cfg.mpc.ts;

    let mut members = Vec::with_capacity(starts.len());
    let mut boundary = Vec::with_capacity(starts.len());
    for (i, p) in starts.iter().enumerate() {
        if p.len() != d {
            return Err(SimError::StartOutsideTerminal {
                robot: i,
                detail: "dimension mismatch".into(),
            });
        }
        let theta = geometry::barycentric_weights(p, tube.pairs().start()).map_err(|e| {
            SimError::StartOutsideTerminal {
                robot: i,
                detail: e.to_string(),
            }
        })?;
        boundary.push(on_boundary(tube, p, &theta, cfg.mpc.boundary_tol));
        members.push(tube.member_trajectory(&theta).expect("weights come from the start terminal"));
    }
    let goals: Vec<Point> = members.iter().map(|m| m.end()).collect();
    let robots = starts.len();
    let mut states: Vec<RobotState> = starts
        .iter()
        .enumerate()
        .map(|(i, p)| RobotState::at_rest(i, p.clone()))
        .collect();
    let mut plans: Vec<Option<Vec<Point>>> = vec![None; robots];
    let mut normals: Vec<Vec<Option<DVector<f64>>>> = vec![vec![None; robots]; robots];
    let mut log = SimLog {
        ts,
        robots,
        goals: goals.clone(),
        rows: Vec::new(),
        max_slack: 0.0,
    };
    let dynamics = cfg.mpc.dynamics();
    let max_ticks = (time_limit / ts).floor() as usize;

    for tick in 0.. {
        let s_now = tick as f64 * ts;
        let all_arrived = states
            .iter()
            .zip(&goals)
            .all(|(st, g)| (&st.p - g).norm() <= cfg.arrival_radius);
        if all_arrived || tick >= max_ticks || robots == 0 {
            for st in &states {
                log.rows.push(LogRow {
                    tick,
                    robot: st.id,
                    p: st.p.clone(),
                    v: st.v.clone(),
                    u: DVector::zeros(d),
                });
            }
            break;
        }
        let preds: Vec<Vec<Point>> = (0..robots)
            .map(|i| match &plans[i] {
                Some(plan) => shift_plan(plan),
                None => constant_velocity(&states[i], n, ts),
            })
            .collect();
        let facets: Vec<Vec<HalfSpace>> = if boundary.iter().all(|&b| b) {
            Vec::new()
        } else {
            (0..=n)
                .map(|k| cross_section_facets(tube, &scaling, s_now + k as f64 * ts, cfg.mpc.tube_window))
                .collect()
        };
        let results = par::try_map_indexed(robots, mode, |i| {
            let reference = reference_window(&members[i], &scaling, s_now, n, ts);
            let neighbors: Vec<(usize, Vec<Point>)> = (0..robots)
                .filter(|&j| j != i && (&states[j].p - &states[i].p).norm() <= cfg.mpc.sensing_radius)
                .map(|j| (j, preds[j].clone()))
                .collect();
            let prev = |j: usize| normals[i][j].clone();
            let planes = avoidance_halfspaces(&preds[i], &neighbors, &cfg.avoidance, &prev);
            let tube_set = if boundary[i] {
                TubeSet::Boundary
            } else {
                TubeSet::Interior(facets.clone())
            };
            mpc_step(&states[i], &reference, &planes, &tube_set, &cfg.mpc).map(|out| (out, planes))
        })?;
        let mut next = Vec::with_capacity(robots);
        for (i, (out, planes)) in results.into_iter().enumerate() {
            log.rows.push(LogRow {
                tick,
                robot: i,
                p: states[i].p.clone(),
                v: states[i].v.clone(),
                u: out.u0.clone(),
            });
            log.max_slack = log.max_slack.max(out.max_slack);
            for pl in planes.iter().filter(|pl| pl.step == 1) {
                normals[i][pl.neighbor] = Some(pl.normal.clone());
            }
            next.push(dynamics.step(&states[i], &out.u0));
            plans[i] = Some(out.predicted);
        }
        states = next;
    }
    Ok(log)
}

/// Average arrival time (+∞ if anyone misses), arrival rate, average speed of
/// arrived robots and the minimum pairwise distance over all ticks.
///
/// An empty swarm has arrival rate 1, average time and speed 0 and an
/// infinite minimum distance.
pub fn compute_metrics(log: &SimLog, time_limit: f64, goal_radius: f64) -> Metrics {
    let r = log.robots;
    if r == 0 {
        return Metrics {
            average_time: 0.0,
            arrival_rate: 1.0,
            average_speed: 0.0,
            min_pairwise_distance: f64::INFINITY,
        };
    }
    let ticks = log.ticks();
    let mut arrival: Vec<Option<f64>> = vec![None; r];
    let mut traveled = vec![0.0; r];
    let mut at_arrival = vec![0.0; r];
    let mut min_dist = f64::INFINITY;
    for k in 0..ticks {
        let rows = log.tick(k);
        let s = k as f64 * log.ts;
        for (i, row) in rows.iter().enumerate() {
            if k > 0 {
                traveled[i] += (&row.p - &log.tick(k - 1)[i].p).norm();
            }
            if arrival[i].is_none() && s <= time_limit && (&row.p - &log.goals[i]).norm() <= goal_radius {
                arrival[i] = Some(s);
                at_arrival[i] = traveled[i];
            }
        }
        for a in 0..r {
            for b in (a + 1)..r {
                min_dist = min_dist.min((&rows[a].p - &rows[b].p).norm());
            }
        }
    }
    let arrived: Vec<usize> = (0..r).filter(|&i| arrival[i].is_some()).collect();
    let arrival_rate = arrived.len() as f64 / r as f64;
    let average_time = if arrived.len() == r {
        arrived.iter().map(|&i| arrival[i].unwrap()).sum::<f64>() / r as f64
    } else {
        f64::INFINITY
    };
    let speeds: Vec<f64> = arrived
        .iter()
        .filter_map(|&i| {
            let t = arrival[i].unwrap();
            (t > 0.0).then(|| at_arrival[i] / t)
        })
        .collect();
    let average_speed = if speeds.is_empty() {
        0.0
    } else {
        speeds.iter().sum::<f64>() / speeds.len() as f64
    };
    Metrics {
        average_time,
        arrival_rate,
        average_speed,
        min_pairwise_distance: min_dist,
    }
}
