use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtube::geometry::BarycentricWeights;
use vtube::mpcsim;
use vtube::par::{self, Parallelism};
use vtube::scenario::{self, ScenarioError};
use vtube::tube;
use vtube::Error;

#[derive(Parser)]
#[command(name = "vtube", version, about = "Optimal virtual tube planning and swarm simulation")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tube from a scenario and write it as JSON.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the scenario's RNG seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Sample member trajectories of a tube as CSV.
    Members {
        #[arg(long)]
        tube: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of equispaced members.
        #[arg(long, default_value_t = 11, conflicts_with = "weights")]
        count: usize,
        /// JSON file with an array of weight vectors.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Time samples per member.
        #[arg(long, default_value_t = 101)]
        samples: usize,
    },
    /// Check random members and all vertices against direct QP solves.
    Verify {
        #[arg(long)]
        tube: PathBuf,
        /// Random interior weight vectors to check.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the MPC swarm along a tube and write the log and metrics.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        tube: PathBuf,
        /// Output directory for log.csv and metrics.json.
        #[arg(long)]
        out: PathBuf,
    },
}

struct Outcome {
    code: u8,
    summary: String,
    artifacts: Vec<PathBuf>,
}

impl Outcome {
    fn ok(summary: String, artifacts: Vec<PathBuf>) -> Self {
        Self { code: 0, summary, artifacts }
    }

    fn fail(code: u8, summary: String) -> Self {
        Self { code, summary, artifacts: Vec::new() }
    }
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_PLANNING: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;
const EXIT_IO: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Scenario(ScenarioError::Io(_)) => EXIT_IO,
        Error::Scenario(_) => EXIT_VALIDATION,
        Error::Geometry(_) => EXIT_VALIDATION,
        Error::Sim(mpcsim::SimError::StartOutsideTerminal { .. }) => EXIT_VALIDATION,
        Error::Sim(mpcsim::SimError::InvalidConfig(_)) => EXIT_VALIDATION,
        Error::Tube(tube::TubeError::InvalidWeights(_)) => EXIT_VALIDATION,
        _ => EXIT_PLANNING,
    }
}

fn failure(e: Error) -> Outcome {
    Outcome::fail(exit_code(&e), format!("error: {e}"))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    ScenarioError::Io(format!("{}: {e}", path.display())).into()
}

fn mode() -> Parallelism {
    if cfg!(feature = "parallel") {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}

fn plan(scenario_path: &Path, out: &Path, seed: Option<u64>) -> Result<Outcome, Error> {
    let mut sc = scenario::load_scenario(scenario_path)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let pairs = sc.pairs()?;
    let obstacles = sc.obstacles()?;
    let tube = tube::build_tube(&pairs, &obstacles, &sc.rrt_config(), &sc.traj_config()?, mode())?;
    scenario::save_tube(&tube, out)?;
    let mut s = String::new();
    let _ = writeln!(s, "basis solves: {}", tube.q());
    for (k, r) in tube.reports().iter().enumerate() {
        let _ = writeln!(
            s,
            "basis {k}: objective {:.9e}, eq residual {:.2e}, active corridor rows {}, audit {}",
            r.objective,
            r.eq_residual,
            r.active,
            if r.audit_passed { "ok" } else { "FAILED" }
        );
    }
    let knots: Vec<String> = tube.public_knots().values().iter().map(|u| format!("{u:.6}")).collect();
    let _ = writeln!(s, "knots: [{}]", knots.join(", "));
    let _ = write!(s, "n_t: {}", tube.n_t());
    Ok(Outcome::ok(s, vec![out.to_path_buf()]))
}

fn read_weights(path: &Path, q: usize) -> Result<Vec<BarycentricWeights>, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let raw: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| {
        Error::from(ScenarioError::Parse {
            field: "weights".into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    })?;
    raw.into_iter()
        .map(|w| {
            if w.len() != q {
                return Err(tube::TubeError::InvalidWeights(format!("expected {q} weights, got {}", w.len())).into());
            }
            BarycentricWeights::new(w).map_err(|e| tube::TubeError::InvalidWeights(e.to_string()).into())
        })
        .collect()
}

fn members(tube_path: &Path, out: &Path, count: usize, weights: Option<&Path>, samples: usize) -> Result<Outcome, Error> {
    let tube = scenario::load_tube(tube_path)?;
    let q = tube.q();
    let thetas = match weights {
        Some(p) => read_weights(p, q)?,
        None => tube::equispaced_weights(q, count),
    };
    let d = tube.config().poly.dim;
    let mut csv = String::from("member");
    for k in 0..q {
        let _ = write!(csv, ",theta{k}");
    }
    csv.push_str(",t");
    for c in 0..d {
        let _ = write!(csv, ",p{c}");
    }
    csv.push('\n');
    let samples = samples.max(2);
    for (i, th) in thetas.iter().enumerate() {
        let traj = tube.member_trajectory(th)?;
        for j in 0..samples {
            let t = j as f64 / (samples - 1) as f64;
            let p = traj.evaluate(t, 0)?;
            let _ = write!(csv, "{i}");
            for w in th.as_slice() {
                let _ = write!(csv, ",{w}");
            }
            let _ = write!(csv, ",{t}");
            for x in p.iter() {
                let _ = write!(csv, ",{x}");
            }
            csv.push('\n');
        }
    }
    fs::write(out, csv).map_err(|e| io_error(out, e))?;
    Ok(Outcome::ok(
        format!("members: {} ({} samples each)", thetas.len(), samples),
        vec![out.to_path_buf()],
    ))
}

fn verify(tube_path: &Path, samples: usize, seed: Option<u64>) -> Result<Outcome, Error> {
    let tube = scenario::load_tube(tube_path)?;
    let q = tube.q();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let mut thetas: Vec<BarycentricWeights> = (0..q).map(|k| BarycentricWeights::vertex(q, k)).collect();
    thetas.extend((0..samples).map(|_| tube::random_weights(q, &mut rng)));
    let mut worst_coef = 0.0f64;
    let mut worst_obj = 0.0f64;
    let mut worst_eq = 0.0f64;
    let mut worst_corr = 0.0f64;
    let mut worst_var = f64::INFINITY;
    let mut failed = 0usize;
    for th in &thetas {
        let r = tube.verify_member_optimality(th, 20, &mut rng)?;
        worst_coef = worst_coef.max(r.coefficient_error);
        worst_obj = worst_obj.max(r.objective_rel_error);
        worst_eq = worst_eq.max(r.eq_residual);
        worst_corr = worst_corr.max(r.corridor_violation);
        worst_var = worst_var.min(r.variational_margin);
        if !r.passed() {
            failed += 1;
        }
    }
    let basis_ok = tube.reports().iter().all(|r| r.audit_passed);
    let bench = tube.combination_benchmark(&[1000], 5, &mut rng)?;
    let mut s = String::new();
    let _ = writeln!(s, "members checked: {} ({} vertices, {} random)", thetas.len(), q, samples);
    let _ = writeln!(s, "max coefficient error: {worst_coef:.3e} (tol {:.0e})", tube::VERIFY_COEFFICIENT_TOL);
    let _ = writeln!(s, "max objective rel error: {worst_obj:.3e} (tol {:.0e})", tube::VERIFY_OBJECTIVE_REL_TOL);
    let _ = writeln!(s, "max eq residual: {worst_eq:.3e} (tol {:.0e})", tube::VERIFY_FEASIBILITY_TOL);
    let _ = writeln!(s, "max corridor violation: {worst_corr:.3e} (tol {:.0e})", tube::VERIFY_FEASIBILITY_TOL);
    let _ = writeln!(s, "min variational margin: {worst_var:.3e} (tol {:.0e})", tube::VERIFY_VARIATIONAL_TOL);
    let _ = writeln!(s, "basis KKT audits: {}", if basis_ok { "ok" } else { "FAILED" });
    let _ = write!(
        s,
        "combination vs direct solve: {:.3e} s vs {:.3e} s per member ({:.0}x)",
        bench[0].combine_seconds,
        bench[0].direct_seconds,
        bench[0].speedup()
    );
    if failed == 0 && basis_ok {
        Ok(Outcome::ok(s, Vec::new()))
    } else {
        let _ = write!(s, "\nverification failed for {failed} member(s)");
        Ok(Outcome::fail(EXIT_VERIFICATION, s))
    }
}

fn simulate(scenario_path: &Path, tube_path: &Path, out: &Path) -> Result<Outcome, Error> {
    let sc = scenario::load_scenario(scenario_path)?;
    let tube = scenario::load_tube(tube_path)?;
    let cfg = sc.sim_config()?;
    let log = mpcsim::simulate(&tube, &sc.robot_starts(), &cfg, mode())?;
    let limit = cfg
        .time_limit
        .unwrap_or(3.0 * mpcsim::time_scaling(tube.public_knots().last(), cfg.mpc.v_ref).duration());
    let metrics = mpcsim::compute_metrics(&log, limit, cfg.arrival_radius);
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let log_path = out.join("log.csv");
    let metrics_path = out.join("metrics.json");
    scenario::save_log(&log, &log_path)?;
    scenario::save_metrics(&metrics, &log, &metrics_path)?;
    let s = format!(
        "robots: {}, ticks: {}\narrival rate: {}\naverage time: {} s\naverage speed: {:.3} m/s\nmin pairwise distance: {} m (safety {} m)\nmax slack: {:.3e}",
        log.robots,
        log.ticks(),
        metrics.arrival_rate,
        metrics.average_time,
        metrics.average_speed,
        metrics.min_pairwise_distance,
        sc.safety_distance,
        log.max_slack
    );
    Ok(Outcome::ok(s, vec![log_path, metrics_path]))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        par::init_threads(n.max(1));
    }
    let result = match &cli.command {
        Command::Plan { scenario, out, seed_override } => plan(scenario, out, *seed_override),
        Command::Members {
            tube,
            out,
            count,
            weights,
            samples,
        } => members(tube, out, *count, weights.as_deref(), *samples),
        Command::Verify {
            tube,
            samples,
            seed_override,
        } => verify(tube, *samples, *seed_override),
        Command::Simulate { scenario, tube, out } => simulate(scenario, tube, out),
    };
    let outcome = result.unwrap_or_else(failure);
    if outcome.code == 0 {
        println!("{}", outcome.summary);
        for a in &outcome.artifacts {
            println!("wrote {}", a.display());
        }
    } else {
        eprintln!("{}", outcome.summary);
    }
    ExitCode::from(outcome.code)
}
