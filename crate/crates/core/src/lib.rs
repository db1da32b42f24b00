//! Optimal virtual tube planning for robot swarms.
//!
//! A tube is spanned by `q` minimum-energy piecewise-polynomial trajectories
//! ("basis" trajectories) connecting the vertices of a convex start terminal to
//! the vertices of a convex goal terminal. Any robot starting inside the start
//! terminal receives its own optimal trajectory as the convex combination of the
//! basis coefficient vectors, which costs `O(n_t)` arithmetic instead of a fresh
//! QP solve.
//!
//! The pipeline is:
//!
//! 1. [`geometry`]: terminals, barycentric weights and the vertex assignment.
//! 2. [`pathfinder`]: RRT* waypoints for every vertex pair, homotopic by construction.
//! 3. [`knots`]: chord-length, public and normalized knot vectors.
//! 4. [`trajopt`]: QP assembly (cost, equality system, corridor) and solving.
//! 5. [`tube`]: the tube itself, member generation and optimality audits.
//! 6. [`mpcsim`]: a discrete double-integrator swarm tracked by per-robot MPC.
//! 7. [`scenario`]: JSON/CSV documents tying the above together.
//!
//! Data-parallel loops (per-pair planning, member batches, per-robot MPC solves)
//! go through [`par`], which uses rayon when the `parallel` feature is enabled.

pub mod geometry;
pub mod hull;
pub mod knots;
pub mod linalg;
pub mod mpcsim;
pub mod par;
pub mod pathfinder;
pub mod qp;
pub mod scenario;
pub mod trajopt;
pub mod tube;

pub use geometry::{BarycentricWeights, GeometryError, OrderPairSet, Point, Terminal};
pub use knots::{KnotError, KnotVector};
pub use pathfinder::{ObstacleSet, PathError, RrtConfig, WaypointPath};
pub use qp::{QpError, QpOptions};
pub use scenario::{Scenario, ScenarioError};
pub use trajopt::{PiecewisePolynomial, PolyConfig, TrajError};
pub use tube::{OptimalVirtualTube, TubeError};

/// Crate-level error, one variant per stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Knot(#[from] KnotError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Tube(#[from] TubeError),
    #[error(transparent)]
    Sim(#[from] mpcsim::SimError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

impl Error {
    /// Short machine-readable name of the underlying failure, e.g. `NoPathFound`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Geometry(e) => e.kind(),
            Error::Path(e) => e.kind(),
            Error::Knot(e) => e.kind(),
            Error::Qp(e) => e.kind(),
            Error::Traj(e) => e.kind(),
            Error::Tube(e) => e.kind(),
            Error::Sim(e) => e.kind(),
            Error::Scenario(e) => e.kind(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
