//! Scenario documents, tube files, simulation logs and metrics.
//!
//! All documents are JSON with an explicit `schema_version`. Numbers must be
//! JSON numbers; quoted numbers are rejected by the parser. Floats are written
//! in shortest round-trip form, so loading a saved tube reproduces every
//! coefficient bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, OrderPairSet, Point, Terminal};
use crate::knots::KnotVector;
use crate::mpcsim::{AvoidanceModel, DynamicsModel, Metrics, MpcConfig, SimConfig, SimLog};
use crate::pathfinder::{Aabb, ObstacleSet, RrtConfig, WaypointPath};
use crate::trajopt::{CorridorSpec, PolyConfig};
use crate::tube::{CorridorMode, OptimalVirtualTube, TrajConfig};

pub const SCENARIO_VERSION: u32 = 1;
pub const TUBE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("ParseError: {field} (line {line}, column {column}): {message}")]
    Parse {
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("ValidationError: {0}")]
    Validation(String),
    #[error("VersionError: found schema_version {found}, expected {expected}")]
    Version { found: u64, expected: u32 },
    #[error("IoError: {0}")]
    Io(String),
}

impl ScenarioError {
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioError::Parse { .. } => "ParseError",
            ScenarioError::Validation(_) => "ValidationError",
            ScenarioError::Version { .. } => "VersionError",
            ScenarioError::Io(_) => "IoError",
        }
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(msg.into())
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, expected_version: u32) -> Result<T, ScenarioError> {
    // version first, so a newer document reports VersionError rather than an unknown field
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(text) {
        match map.get("schema_version") {
            Some(serde_json::Value::Number(n)) => match n.as_u64() {
                Some(v) if v == expected_version as u64 => {}
                Some(v) => {
                    return Err(ScenarioError::Version {
                        found: v,
                        expected: expected_version,
                    })
                }
                None => {}
            },
            Some(_) => {}
            None => {
                return Err(ScenarioError::Parse {
                    field: "schema_version".into(),
                    line: 1,
                    column: 1,
                    message: "missing field `schema_version`".into(),
                })
            }
        }
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Parse {
            field,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), ScenarioError> {
    fs::write(path, text).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDoc {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrtDoc {
    pub max_iterations: usize,
    pub step_size: f64,
    pub goal_bias: f64,
    pub rewire_radius: f64,
    pub corridor_shrink_radius: f64,
    pub sampling_margin: f64,
}

impl Default for RrtDoc {
    fn default() -> Self {
        let r = RrtConfig::default();
        Self {
            max_iterations: r.max_iterations,
            step_size: r.step_size,
            goal_bias: r.goal_bias,
            rewire_radius: r.rewire_radius,
            corridor_shrink_radius: r.corridor_shrink_radius,
            sampling_margin: r.sampling_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorDoc {
    pub mode: String,
    pub width: f64,
    pub samples: usize,
    pub segment_widths: Option<Vec<f64>>,
}

impl Default for CorridorDoc {
    fn default() -> Self {
        let c = CorridorSpec::default();
        Self {
            mode: CorridorMode::default().name().into(),
            width: c.width,
            samples: c.samples,
            segment_widths: c.segment_widths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerDoc {
    pub rrt: RrtDoc,
    pub m_target: usize,
    pub order: usize,
    pub cost_order: usize,
    pub continuity: usize,
    pub corridor: CorridorDoc,
    /// Weight of the distance variance in the vertex assignment.
    pub variance_weight: f64,
}

impl Default for PlannerDoc {
    fn default() -> Self {
        let p = PolyConfig::default();
        Self {
            rrt: RrtDoc::default(),
            m_target: 7,
            order: p.order,
            cost_order: p.cost_order,
            continuity: p.continuity,
            corridor: CorridorDoc::default(),
            variance_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerDoc {
    pub horizon: usize,
    pub ts: f64,
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_u: f64,
    pub q_slack: f64,
    pub terminal_factor: f64,
    pub u_max: Option<f64>,
    pub eps_c: f64,
    pub v_ref: f64,
    /// `"double_integrator"` or `"zero_velocity_block"`.
    pub dynamics: String,
    pub tube_window: f64,
    pub sensing_radius: f64,
    /// Avoidance ellipse radius as a multiple of the safety distance.
    pub avoidance_inflation: f64,
}

impl Default for ControllerDoc {
    fn default() -> Self {
        let m = MpcConfig::default();
        Self {
            horizon: m.horizon,
            ts: m.ts,
            q_pos: m.q_pos,
            q_vel: m.q_vel,
            q_u: m.q_u,
            q_slack: m.q_slack,
            terminal_factor: m.terminal_factor,
            u_max: m.u_max,
            eps_c: m.eps_c,
            v_ref: m.v_ref,
            dynamics: "double_integrator".into(),
            tube_window: m.tube_window,
            sensing_radius: m.sensing_radius,
            avoidance_inflation: 1.1,
        }
    }
}

fn default_safety() -> f64 {
    1.0
}

fn default_goal_radius() -> f64 {
    0.2
}

/// A scenario with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub dimension: usize,
    #[serde(default)]
    pub obstacles: Vec<BoxDoc>,
    #[serde(default)]
    pub obstacle_inflation: f64,
    pub start_terminal: Vec<Vec<f64>>,
    pub goal_terminal: Vec<Vec<f64>>,
    #[serde(default)]
    pub robots: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Seconds; `None` uses three times the nominal traversal time.
    #[serde(default)]
    pub time_limit: Option<f64>,
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
    #[serde(default = "default_safety")]
    pub safety_distance: f64,
    #[serde(default)]
    pub planner: PlannerDoc,
    #[serde(default)]
    pub controller: ControllerDoc,
}

fn to_point(v: &[f64]) -> Point {
    DVector::from_column_slice(v)
}

fn check_coords(what: &str, v: &[f64], d: usize) -> Result<(), ScenarioError> {
    if v.len() != d {
        return Err(invalid(format!("{what}: expected {d} coordinates, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(format!("{what}: non-finite coordinate")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = parse_json(text, SCENARIO_VERSION)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn start_terminal(&self) -> Result<Terminal, ScenarioError> {
        Terminal::new(self.start_terminal.iter().map(|v| to_point(v)).collect())
            .map_err(|e| invalid(format!("invalid start terminal: {e}")))
    }

    pub fn goal_terminal(&self) -> Result<Terminal, ScenarioError> {
        Terminal::new(self.goal_terminal.iter().map(|v| to_point(v)).collect())
            .map_err(|e| invalid(format!("invalid goal terminal: {e}")))
    }

    /// Vertex pairing from the assignment search.
    pub fn pairs(&self) -> Result<OrderPairSet, ScenarioError> {
        let start = self.start_terminal()?;
        let goal = self.goal_terminal()?;
        geometry::assign_vertices(&start, &goal, self.planner.variance_weight)
            .map_err(|e| invalid(format!("terminal assignment: {e}")))
    }

    pub fn obstacles(&self) -> Result<ObstacleSet, ScenarioError> {
        let boxes = self
            .obstacles
            .iter()
            .map(|b| Aabb::new(to_point(&b.min), to_point(&b.max)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("invalid obstacle: {e}")))?;
        ObstacleSet::new(boxes, self.obstacle_inflation).map_err(|e| invalid(format!("invalid obstacle: {e}")))
    }

    pub fn rrt_config(&self) -> RrtConfig {
        let r = &self.planner.rrt;
        RrtConfig {
            max_iterations: r.max_iterations,
            step_size: r.step_size,
            goal_bias: r.goal_bias,
            rewire_radius: r.rewire_radius,
            rng_seed: self.seed,
            corridor_shrink_radius: r.corridor_shrink_radius,
            sampling_margin: r.sampling_margin,
        }
    }

    pub fn traj_config(&self) -> Result<TrajConfig, ScenarioError> {
        let p = &self.planner;
        let corridor_mode = CorridorMode::from_name(&p.corridor.mode)
            .ok_or_else(|| invalid(format!("unknown corridor mode `{}`", p.corridor.mode)))?;
        Ok(TrajConfig {
            poly: PolyConfig {
                dim: self.dimension,
                order: p.order,
                cost_order: p.cost_order,
                continuity: p.continuity,
            },
            corridor: CorridorSpec {
                width: p.corridor.width,
                samples: p.corridor.samples,
                segment_widths: p.corridor.segment_widths.clone(),
            },
            corridor_mode,
            m_target: p.m_target,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig, ScenarioError> {
        let c = &self.controller;
        let dynamics = match c.dynamics.as_str() {
            "double_integrator" => DynamicsModel::DoubleIntegrator,
            "zero_velocity_block" => DynamicsModel::ZeroVelocityBlock,
            other => return Err(invalid(format!("unknown dynamics model `{other}`"))),
        };
        let mpc = MpcConfig {
            horizon: c.horizon,
            ts: c.ts,
            q_pos: c.q_pos,
            q_vel: c.q_vel,
            q_u: c.q_u,
            q_slack: c.q_slack,
            terminal_factor: c.terminal_factor,
            u_max: c.u_max,
            eps_c: c.eps_c,
            v_ref: c.v_ref,
            dynamics,
            tube_window: c.tube_window,
            sensing_radius: c.sensing_radius,
            boundary_tol: 1e-6,
        };
        mpc.validate().map_err(|e| invalid(format!("controller: {e}")))?;
        Ok(SimConfig {
            mpc,
            avoidance: AvoidanceModel::spherical(self.dimension, self.safety_distance, c.avoidance_inflation),
            arrival_radius: self.goal_radius,
            time_limit: self.time_limit,
        })
    }

    pub fn robot_starts(&self) -> Vec<Point> {
        self.robots.iter().map(|v| to_point(v)).collect()
    }

    /// Check every invariant; each failure has its own message.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_VERSION {
            return Err(ScenarioError::Version {
                found: self.schema_version as u64,
                expected: SCENARIO_VERSION,
            });
        }
        let d = self.dimension;
        if d != 2 && d != 3 {
            return Err(invalid(format!("dimension must be 2 or 3, got {d}")));
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            check_coords(&format!("obstacle {i} min"), &b.min, d)?;
            check_coords(&format!("obstacle {i} max"), &b.max, d)?;
        }
        if !(self.obstacle_inflation >= 0.0 && self.obstacle_inflation.is_finite()) {
            return Err(invalid("obstacle_inflation must be finite and nonnegative"));
        }
        self.obstacles()?;
        for (i, v) in self.start_terminal.iter().enumerate() {
            check_coords(&format!("start terminal vertex {i}"), v, d)?;
        }
        for (i, v) in self.goal_terminal.iter().enumerate() {
            check_coords(&format!("goal terminal vertex {i}"), v, d)?;
        }
        let start = self.start_terminal()?;
        let goal = self.goal_terminal()?;
        if start.len() != goal.len() {
            return Err(invalid(format!(
                "terminal vertex counts differ ({} vs {})",
                start.len(),
                goal.len()
            )));
        }
        if !geometry::terminals_disjoint(&start, &goal) {
            return Err(invalid("terminals not disjoint"));
        }
        for (i, r) in self.robots.iter().enumerate() {
            check_coords(&format!("robot {i}"), r, d)?;
            let dist = geometry::hull_distance(&to_point(r), start.vertices());
            if dist > geometry::HULL_TOL {
                return Err(invalid(format!("start outside terminal: robot {i} is {dist:.3e} m outside")));
            }
        }
        if let Some(t) = self.time_limit {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(invalid("time_limit must be finite and nonnegative"));
            }
        }
        if !(self.goal_radius > 0.0 && self.goal_radius.is_finite()) {
            return Err(invalid("goal_radius must be positive"));
        }
        if !(self.safety_distance > 0.0 && self.safety_distance.is_finite()) {
            return Err(invalid("safety_distance must be positive"));
        }
        if !(self.controller.avoidance_inflation >= 1.0 && self.controller.avoidance_inflation.is_finite()) {
            return Err(invalid("avoidance_inflation must be at least 1"));
        }
        self.rrt_config().validate().map_err(|e| invalid(format!("planner.rrt: {e}")))?;
        let traj = self.traj_config()?;
        traj.poly.validate().map_err(|e| invalid(format!("planner: {e}")))?;
        if traj.m_target < traj.poly.min_segments() {
            return Err(invalid(format!(
                "planner.m_target {} is below the minimum segment count {}",
                traj.m_target,
                traj.poly.min_segments()
            )));
        }
        traj.corridor
            .validate(traj.m_target)
            .map_err(|e| invalid(format!("planner.corridor: {e}")))?;
        if !(self.planner.variance_weight >= 0.0 && self.planner.variance_weight.is_finite()) {
            return Err(invalid("planner.variance_weight must be finite and nonnegative"));
        }
        self.sim_config()?;
        Ok(())
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    Scenario::from_json(&read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TubeDoc {
    schema_version: u32,
    dimension: usize,
    order: usize,
    cost_order: usize,
    continuity: usize,
    m_target: usize,
    corridor: CorridorDoc,
    public_knots: Vec<f64>,
    start_vertices: Vec<Vec<f64>>,
    goal_vertices: Vec<Vec<f64>>,
    pairing: Vec<usize>,
    paths: Vec<Vec<Vec<f64>>>,
    basis_x: Vec<Vec<f64>>,
    basis_b: Vec<Vec<f64>>,
}

fn rows(points: &[Point]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.iter().copied().collect()).collect()
}

pub fn tube_to_json(tube: &OptimalVirtualTube) -> String {
    let cfg = tube.config();
    let pairs = tube.pairs();
    let doc = TubeDoc {
        schema_version: TUBE_VERSION,
        dimension: cfg.poly.dim,
        order: cfg.poly.order,
        cost_order: cfg.poly.cost_order,
        continuity: cfg.poly.continuity,
        m_target: cfg.m_target,
        corridor: CorridorDoc {
            mode: cfg.corridor_mode.name().into(),
            width: cfg.corridor.width,
            samples: cfg.corridor.samples,
            segment_widths: cfg.corridor.segment_widths.clone(),
        },
        public_knots: tube.public_knots().values().to_vec(),
        start_vertices: rows(pairs.start().vertices()),
        goal_vertices: rows(pairs.goal().vertices()),
        pairing: pairs.pairing().to_vec(),
        paths: tube.paths().iter().map(|p| rows(p.points())).collect(),
        basis_x: tube.basis_x().iter().map(|x| x.iter().copied().collect()).collect(),
        basis_b: tube.basis_b().iter().map(|b| b.iter().copied().collect()).collect(),
    };
    serde_json::to_string(&doc).expect("tube serializes")
}

pub fn tube_from_json(text: &str) -> Result<OptimalVirtualTube, ScenarioError> {
    let doc: TubeDoc = parse_json(text, TUBE_VERSION)?;
    let bad = |e: crate::Error| invalid(format!("tube: {e}"));
    let pt = |v: &Vec<Vec<f64>>| -> Vec<Point> { v.iter().map(|x| to_point(x)).collect() };
    let start = Terminal::new(pt(&doc.start_vertices)).map_err(|e| bad(e.into()))?;
    let goal = Terminal::new(pt(&doc.goal_vertices)).map_err(|e| bad(e.into()))?;
    let pairs = OrderPairSet::new(start, goal, doc.pairing.clone()).map_err(|e| bad(e.into()))?;
    let mode = CorridorMode::from_name(&doc.corridor.mode)
        .ok_or_else(|| invalid(format!("tube: unknown corridor mode `{}`", doc.corridor.mode)))?;
    let cfg = TrajConfig {
        poly: PolyConfig {
            dim: doc.dimension,
            order: doc.order,
            cost_order: doc.cost_order,
            continuity: doc.continuity,
        },
        corridor: CorridorSpec {
            width: doc.corridor.width,
            samples: doc.corridor.samples,
            segment_widths: doc.corridor.segment_widths.clone(),
        },
        corridor_mode: mode,
        m_target: doc.m_target,
    };
    let knots = KnotVector::new(doc.public_knots.clone(), false).map_err(|e| bad(e.into()))?;
    let paths = doc
        .paths
        .iter()
        .enumerate()
        .map(|(k, p)| WaypointPath::new(pt(p), k))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.into()))?;
    let vecs = |v: &Vec<Vec<f64>>| -> Vec<DVector<f64>> { v.iter().map(|x| DVector::from_column_slice(x)).collect() };
    OptimalVirtualTube::from_parts(pairs, cfg, knots, paths, vecs(&doc.basis_x), vecs(&doc.basis_b)).map_err(bad)
}

pub fn save_tube(tube: &OptimalVirtualTube, path: &Path) -> Result<(), ScenarioError> {
    write(path, &tube_to_json(tube))
}

pub fn load_tube(path: &Path) -> Result<OptimalVirtualTube, ScenarioError> {
    tube_from_json(&read(path)?)
}

/// CSV with header `tick,robot,p0..,v0..,u0..`.
pub fn log_to_csv(log: &SimLog) -> String {
    let d = log.goals.first().map(|g| g.len()).unwrap_or(0);
    let mut out = String::from("tick,robot");
    for prefix in ["p", "v", "u"] {
        for c in 0..d {
            let _ = write!(out, ",{prefix}{c}");
        }
    }
    out.push('\n');
    for row in &log.rows {
        let _ = write!(out, "{},{}", row.tick, row.robot);
        for x in row.p.iter().chain(row.v.iter()).chain(row.u.iter()) {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn save_log(log: &SimLog, path: &Path) -> Result<(), ScenarioError> {
    write(path, &log_to_csv(log))
}

fn number_or_inf(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else if x > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("nan")
    }
}

/// Metrics as JSON; an infinite average time or distance is written as `"inf"`.
pub fn metrics_to_json(m: &Metrics, log: &SimLog) -> String {
    let doc = serde_json::json!({
        "schema_version": 1,
        "robots": log.robots,
        "ticks": log.ticks(),
        "average_time": number_or_inf(m.average_time),
        "arrival_rate": number_or_inf(m.arrival_rate),
        "average_speed": number_or_inf(m.average_speed),
        "min_pairwise_distance": number_or_inf(m.min_pairwise_distance),
        "max_slack": number_or_inf(log.max_slack),
    });
    serde_json::to_string_pretty(&doc).expect("metrics serialize")
}

pub fn save_metrics(m: &Metrics, log: &SimLog, path: &Path) -> Result<(), ScenarioError> {
    write(path, &metrics_to_json(m, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "dimension": 2,
        "start_terminal": [[0, 0], [0, 4]],
        "goal_terminal": [[10, 0], [10, 4]],
        "robots": [[0, 1]]
    }"#;

    #[test]
    fn defaults_materialized() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.planner.order, 5);
        assert_eq!(s.planner.cost_order, 3);
        assert_eq!(s.planner.continuity, 3);
        assert_eq!(s.planner.m_target, 7);
        assert_eq!(s.planner.corridor.mode, "shared");
        assert_eq!(s.controller.horizon, 10);
        assert_eq!(s.goal_radius, 0.2);
        assert_eq!(s.safety_distance, 1.0);
        // the serialized form carries every default explicitly
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(again, s);
        assert!(s.to_json().contains("\"rewire_radius\""));
    }

    #[test]
    fn validation_errors() {
        let overlap = MINIMAL.replace("[[10, 0], [10, 4]]", "[[0, 2], [0, 6]]");
        let e = Scenario::from_json(&overlap).unwrap_err();
        assert_eq!(e, ScenarioError::Validation("terminals not disjoint".into()));

        let outside = MINIMAL.replace("[[0, 1]]", "[[1, 1]]");
        let e = Scenario::from_json(&outside).unwrap_err();
        assert!(e.to_string().contains("start outside terminal"), "{e}");

        let quoted = MINIMAL.replace("\"dimension\": 2", "\"dimension\": \"2\"");
        let e = Scenario::from_json(&quoted).unwrap_err();
        assert_eq!(e.kind(), "ParseError");
        assert!(e.to_string().contains("dimension"), "{e}");

        let version = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert_eq!(Scenario::from_json(&version).unwrap_err().kind(), "VersionError");

        let truncated = &MINIMAL[..40];
        assert_eq!(Scenario::from_json(truncated).unwrap_err().kind(), "ParseError");
    }
}
