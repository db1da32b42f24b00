//! Acceptance run: one line per criterion with its pinned tolerances.
//!
//! Members are compared against `common::NullSpaceOracle`, which shares no
//! code with the production KKT solver. Exits non-zero if any criterion fails,
//! except for derivative-continuity misses that stay under the f64 rounding
//! floor of the stored coefficients (reported as FAIL, not hidden).

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::NullSpaceOracle;
use vtube::geometry::{self, BarycentricWeights, OrderPairSet, Terminal};
use vtube::mpcsim;
use vtube::par::Parallelism;
use vtube::pathfinder::{self, WaypointPath};
use vtube::trajopt::{CorridorSpec, PolyConfig, QpSolution};
use vtube::tube::{self, CorridorMode, OptimalVirtualTube, TrajConfig};

const COEF_TOL: f64 = 1e-6;
const OBJ_REL_TOL: f64 = 1e-8;
const FEAS_TOL: f64 = 1e-8;
const VARIATIONAL_TOL: f64 = -1e-8;
const GROWTH_LIMIT: f64 = 10.0;
const SPEEDUP_MIN: f64 = 50.0;
const SCALING_MAX: f64 = 2.5;
const CONTINUITY_TOL: f64 = 1e-9;
const FD_REL_TOL: f64 = 1e-5;
// Balances truncation |h''''|δ²/6 against rounding eps|h'|/δ in normalized time,
// where |h''''| reaches 1e6 near rest-to-rest endpoints.
const FD_STEP: f64 = 2e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn report(id: &str, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id} {name}: {}", o.detail);
}

#[derive(Default)]
struct MemberStats {
    coef: f64,
    obj: f64,
    oracle_violation: f64,
    count: usize,
}

impl MemberStats {
    fn ok(&self) -> bool {
        self.coef <= COEF_TOL && self.obj <= OBJ_REL_TOL && self.oracle_violation <= FEAS_TOL
    }

    fn merge(&mut self, o: &MemberStats) {
        self.coef = self.coef.max(o.coef);
        self.obj = self.obj.max(o.obj);
        self.oracle_violation = self.oracle_violation.max(o.oracle_violation);
        self.count += o.count;
    }

    fn describe(&self) -> String {
        format!(
            "max coef err {:.2e} <= {COEF_TOL:.0e}, max rel obj err {:.2e} <= {OBJ_REL_TOL:.0e} over {} members",
            self.coef, self.obj, self.count
        )
    }
}

/// Combined members against the oracle; the oracle's equality-only optimum
/// must also satisfy the corridor for the comparison to be valid.
fn check_members(t: &OptimalVirtualTube, oracle: &NullSpaceOracle, thetas: &[BarycentricWeights]) -> MemberStats {
    let h = &t.cost().hessian;
    let mut s = MemberStats::default();
    for th in thetas {
        let x = t.member_x(th).unwrap();
        let xo = oracle.solve(&t.member_b(th).unwrap());
        let corridor = t.member_corridor(th).unwrap();
        s.coef = s.coef.max((&x - &xo).amax());
        let fo = common::quad_dd(h, &xo);
        let fx = common::quad_dd(h, &x);
        s.obj = s.obj.max((fx - fo).abs() / fo.abs());
        s.oracle_violation = s.oracle_violation.max(corridor.max_violation(&xo).max(0.0));
        s.count += 1;
    }
    s
}

fn interior_weights(count: usize) -> Vec<BarycentricWeights> {
    (1..=count)
        .map(|i| {
            let s = i as f64 / (count + 1) as f64;
            BarycentricWeights::new(vec![1.0 - s, s]).unwrap()
        })
        .collect()
}

fn oracle_for(t: &OptimalVirtualTube) -> NullSpaceOracle {
    NullSpaceOracle::new(&t.cost().hessian, t.eq_matrix())
}

/// Feasibility residual and worst per-unit-step variational value over
/// `trials` random feasible `y` around member `θ`.
struct Variational {
    feasibility: f64,
    min_value: f64,
    infeasible_steps: usize,
    active_rows: usize,
}

fn variational(t: &OptimalVirtualTube, oracle: &NullSpaceOracle, th: &BarycentricWeights, trials: usize, rng: &mut ChaCha8Rng) -> Variational {
    let a = t.eq_matrix();
    let h = &t.cost().hessian;
    let x = t.member_x(th).unwrap();
    let b = t.member_b(th).unwrap();
    let corridor = t.member_corridor(th).unwrap();
    let eq_res = common::residual_dd(a, &x, &b).amax();
    let slack = if corridor.is_empty() {
        DVector::zeros(0)
    } else {
        -common::residual_dd(&corridor.g, &x, &corridor.h)
    };
    let feasibility = eq_res.max(slack.iter().fold(0.0f64, |m, s| m.max(-s)));

    // gradient of xᵀHx plus the least-squares equality term; equals 2Hx on null(A)
    let g = 2.0 * common::residual_dd(h, &x, &DVector::zeros(x.len()));
    let lambda = oracle.multipliers(&g);
    let n = x.len();
    let r = DVector::from_fn(n, |i, _| {
        let mut acc = common::Dd::default();
        acc.add(g[i]);
        for k in 0..a.nrows() {
            acc.add_prod(a[(k, i)], lambda[k]);
        }
        acc.value()
    });

    let nb = oracle.null_basis();
    let active: Vec<usize> = (0..slack.len()).filter(|&i| slack[i] <= 1e-7 * (1.0 + corridor.h[i].abs())).collect();
    let ga_n = DMatrix::from_fn(active.len(), nb.ncols(), |r_, c| {
        (0..n).map(|j| corridor.g[(active[r_], j)] * nb[(j, c)]).sum::<f64>()
    });
    let pinv = if active.is_empty() {
        DMatrix::zeros(nb.ncols(), 0)
    } else {
        ga_n.clone().pseudo_inverse(1e-12).unwrap()
    };

    let mut min_value = f64::INFINITY;
    let mut infeasible_steps = 0;
    for _ in 0..trials {
        let w_rand = DVector::from_fn(nb.ncols(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let w = if active.is_empty() {
            w_rand
        } else {
            let e = DVector::from_fn(active.len(), |_, _| -(0.5 + 0.5 * rng.random::<f64>()));
            let free = &w_rand - &pinv * (&ga_n * &w_rand);
            free + &pinv * e
        };
        let mut d = &nb * w;
        d /= d.norm();
        let mut alpha: f64 = 1.0;
        if !corridor.is_empty() {
            let gd = &corridor.g * &d;
            for i in 0..gd.len() {
                if gd[i] > 0.0 {
                    alpha = alpha.min(slack[i].max(0.0) / gd[i]);
                }
            }
        }
        let alpha = alpha * (0.1 + 0.9 * rng.random::<f64>());
        let y = &x + alpha * &d;
        let y_eq = common::residual_dd(a, &y, &b).amax();
        let y_corr = if corridor.is_empty() { f64::NEG_INFINITY } else { corridor.max_violation(&y) };
        if y_eq > FEAS_TOL || y_corr > FEAS_TOL || alpha == 0.0 {
            infeasible_steps += 1;
            continue;
        }
        let step = &y - &x;
        let value = common::dot_dd(r.as_slice(), step.as_slice()) / step.norm();
        min_value = min_value.min(value);
    }
    Variational {
        feasibility,
        min_value,
        infeasible_steps,
        active_rows: active.len(),
    }
}

/// Best per-member combination time for each tube, rounds interleaved so both
/// tubes see the same machine state.
fn time_combination(tubes: [&OptimalVirtualTube; 2], thetas: &[BarycentricWeights]) -> [f64; 2] {
    let mut best = [f64::INFINITY; 2];
    for _ in 0..101 {
        for (b, t) in best.iter_mut().zip(tubes) {
            let start = Instant::now();
            let mut sink = 0.0;
            for th in thetas {
                sink += t.member_x(th).unwrap()[0];
            }
            std::hint::black_box(sink);
            *b = b.min(start.elapsed().as_secs_f64() / thetas.len() as f64);
        }
    }
    best
}

/// Continuity at interior knots, orders `0..=p`: worst absolute jump and
/// worst jump relative to the per-row rounding floor `Σ |a_k| (|c_k^L| + |c_k^R|) u`.
fn continuity(t: &OptimalVirtualTube, x: &DVector<f64>) -> (f64, f64) {
    let cfg = &t.config().poly;
    let traj = vtube::trajopt::PiecewisePolynomial::new(*cfg, t.knots().clone(), x.clone()).unwrap();
    let knots = t.knots().values();
    let u = f64::EPSILON / 2.0;
    let mut worst = 0.0f64;
    let mut worst_over_floor = 0.0f64;
    for i in 1..knots.len() - 1 {
        for o in 0..=cfg.continuity {
            let l = traj.evaluate_segment(i - 1, knots[i], o);
            let r = traj.evaluate_segment(i, knots[i], o);
            let kv = traj.knots();
            let lrow = vtube::trajopt::segment_row(kv, i - 1, knots[i], o, cfg.order);
            let rrow = vtube::trajopt::segment_row(kv, i, knots[i], o, cfg.order);
            for c in 0..cfg.dim {
                let jump = (l[c] - r[c]).abs();
                let floor: f64 = (0..=cfg.order)
                    .map(|k| ((lrow[k] * x[cfg.index(i - 1, k, c)]).abs() + (rrow[k] * x[cfg.index(i, k, c)]).abs()) * u)
                    .sum();
                worst = worst.max(jump);
                worst_over_floor = worst_over_floor.max(jump / floor.max(f64::MIN_POSITIVE));
            }
        }
    }
    (worst, worst_over_floor)
}

fn finite_difference(t: &OptimalVirtualTube, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let traj = vtube::trajopt::PiecewisePolynomial::new(t.config().poly, t.knots().clone(), x.clone()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = FD_STEP + (1.0 - 2.0 * FD_STEP) * rng.random::<f64>();
        let fd = (traj.evaluate(s + FD_STEP, 1).unwrap() - traj.evaluate(s - FD_STEP, 1).unwrap()) / (2.0 * FD_STEP);
        let an = traj.evaluate(s, 2).unwrap();
        worst = worst.max((&fd - &an).amax() / an.amax().max(1.0));
    }
    worst
}

/// Planar zig-zag in the xy-plane, pairs offset along z: both basis problems
/// bind the same corridor rows.
fn zigzag_tube() -> OptimalVirtualTube {
    let v = |x: f64, y: f64, z: f64| DVector::from_column_slice(&[x, y, z]);
    let low: Vec<DVector<f64>> = (0..8).map(|i| v(3.0 * i as f64, if i % 2 == 1 { 2.0 } else { 0.0 }, 0.0)).collect();
    let high: Vec<DVector<f64>> = low.iter().map(|p| p + v(0.0, 0.0, 5.0)).collect();
    let start = Terminal::new(vec![low[0].clone(), high[0].clone()]).unwrap();
    let goal = Terminal::new(vec![low[7].clone(), high[7].clone()]).unwrap();
    let pairs = OrderPairSet::new(start, goal, vec![0, 1]).unwrap();
    let paths = vec![WaypointPath::new(low, 0).unwrap(), WaypointPath::new(high, 1).unwrap()];
    let cfg = TrajConfig {
        poly: PolyConfig::with_dim(3),
        corridor: CorridorSpec::default(),
        corridor_mode: CorridorMode::Shared,
        m_target: 7,
    };
    OptimalVirtualTube::from_paths(pairs, paths, cfg, Parallelism::Rayon).unwrap()
}

fn retimed(t: &OptimalVirtualTube, m: usize, mode: CorridorMode) -> OptimalVirtualTube {
    let paths = pathfinder::equalize_waypoints(t.paths(), m).unwrap();
    let mut cfg = t.config().clone();
    cfg.m_target = m;
    cfg.corridor_mode = mode;
    OptimalVirtualTube::from_paths(t.pairs().clone(), paths, cfg, Parallelism::Rayon).unwrap()
}

fn main() -> ExitCode {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut audits: Vec<(String, bool)> = Vec::new();
    let mut tubes: Vec<(String, OptimalVirtualTube)> = Vec::new();
    let audit_solution = |label: String, s: &QpSolution, audits: &mut Vec<(String, bool)>| {
        audits.push((label, s.audit_passes()));
    };

    // 1
    let clock = Instant::now();
    let gate_sc = common::load("gate_2d.json");
    let gate = common::plan(&gate_sc);
    let gate_oracle = oracle_for(&gate);
    let mut c1 = MemberStats::default();
    for count in [9, 99] {
        let thetas = interior_weights(count);
        c1.merge(&check_members(&gate, &gate_oracle, &thetas));
        if count == 9 {
            for (i, th) in thetas.iter().enumerate() {
                let sol = gate.direct_solve(th).unwrap();
                audit_solution(format!("gate direct {i}"), &sol, &mut audits);
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let cfg = &gate.config().poly;
    let shape_ok = cfg.order == 5 && gate.knots().segments() >= 5 && cfg.dim == 2 && gate.q() == 2;
    results.push((
        "C1",
        "convex-combination optimality",
        Outcome::new(
            c1.ok() && shape_ok && secs < 10.0,
            format!(
                "{}; n={}, m={}, d={}, q={}; {secs:.2} s < 10 s",
                c1.describe(),
                cfg.order,
                gate.knots().segments(),
                cfg.dim,
                gate.q()
            ),
        ),
    ));

    // 2
    let clock = Instant::now();
    let e10 = check_members(&gate, &gate_oracle, &interior_weights(10));
    let e1000 = check_members(&gate, &gate_oracle, &interior_weights(1000));
    let secs = clock.elapsed().as_secs_f64();
    results.push((
        "C2",
        "member-count independence",
        Outcome::new(
            e1000.coef <= GROWTH_LIMIT * e10.coef && e1000.ok() && secs < 60.0,
            format!(
                "max coef err {:.2e} (10 members) -> {:.2e} (1000 members), growth {:.2} <= {GROWTH_LIMIT}; {secs:.2} s < 60 s",
                e10.coef,
                e1000.coef,
                e1000.coef / e10.coef
            ),
        ),
    ));

    // 3
    let clock = Instant::now();
    let eq_only = retimed(&gate, gate.knots().segments(), CorridorMode::Off);
    let eq_oracle = oracle_for(&eq_only);
    let zig = zigzag_tube();
    let zig_oracle = oracle_for(&zig);
    let mut oracles = Vec::new();
    for (label, t, o) in [("equality-only", &eq_only, &eq_oracle), ("shared corridor", &zig, &zig_oracle)] {
        let mut feas = 0.0f64;
        let mut worst = f64::INFINITY;
        let mut skipped = 0;
        let mut active = usize::MAX;
        for _ in 0..100 {
            let th = tube::random_weights(t.q(), &mut rng);
            let v = variational(t, o, &th, 100, &mut rng);
            feas = feas.max(v.feasibility);
            worst = worst.min(v.min_value);
            skipped += v.infeasible_steps;
            active = active.min(v.active_rows);
        }
        oracles.push((label, feas, worst, skipped, active));
    }
    let secs = clock.elapsed().as_secs_f64();
    let c3_ok = oracles.iter().all(|(_, f, w, s, _)| *f <= FEAS_TOL && *w >= VARIATIONAL_TOL && *s == 0)
        && oracles[1].4 > 0
        && secs < 30.0;
    let detail = oracles
        .iter()
        .map(|(l, f, w, s, a)| {
            format!("{l}: feas {f:.2e} <= {FEAS_TOL:.0e}, min 2xᵀH(y-x)/|y-x| {w:.2e} >= {VARIATIONAL_TOL:.0e}, {s} rejected y, >= {a} active rows")
        })
        .collect::<Vec<_>>()
        .join("; ");
    results.push((
        "C3",
        "combination optimality oracles (100 θ x 100 y each)",
        Outcome::new(c3_ok, format!("{detail}; {secs:.2} s < 30 s")),
    ));

    // 4
    let tri_sc = common::load("triangle_q3.json");
    let tri = common::plan(&tri_sc);
    let tri_oracle = oracle_for(&tri);
    let fourth = BarycentricWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
    let c4 = check_members(&tri, &tri_oracle, std::slice::from_ref(&fourth));
    let solves = tri.reports().len();
    results.push((
        "C4",
        "pipeline fidelity (q=3)",
        Outcome::new(
            solves == 3 && tri.q() == 3 && tri.knots().segments() == 7 && c4.ok(),
            format!(
                "{solves} basis QP solves, m={}; fourth member θ=(0.2,0.3,0.5): {}",
                tri.knots().segments(),
                c4.describe()
            ),
        ),
    ));

    // 5
    let doubled = retimed(&gate, 2 * gate.knots().segments(), gate.config().corridor_mode);
    let thetas: Vec<BarycentricWeights> = (0..2000).map(|_| tube::random_weights(2, &mut rng)).collect();
    let [comb, comb2] = time_combination([&gate, &doubled], &thetas);
    let mut direct = f64::INFINITY;
    for _ in 0..3 {
        let start = Instant::now();
        for (i, th) in thetas.iter().take(5).enumerate() {
            let sol = gate.direct_solve(th).unwrap();
            audit_solution(format!("timing direct {i}"), &sol, &mut audits);
        }
        direct = direct.min(start.elapsed().as_secs_f64() / 5.0);
    }
    let speedup = direct / comb;
    let scaling = comb2 / comb;
    results.push((
        "C5",
        "complexity separation",
        Outcome::new(
            speedup >= SPEEDUP_MIN && scaling <= SCALING_MAX,
            format!(
                "n_t={}: combine {comb:.2e} s vs direct {direct:.2e} s, speedup {speedup:.0} >= {SPEEDUP_MIN}; n_t={}: combine {comb2:.2e} s, ratio {scaling:.2} <= {SCALING_MAX}",
                gate.n_t(),
                doubled.n_t()
            ),
        ),
    ));

    // 6
    let clock = Instant::now();
    let sim_cfg = gate_sc.sim_config().unwrap();
    let starts = gate_sc.robot_starts();
    let log = mpcsim::simulate(&gate, &starts, &sim_cfg, Parallelism::Rayon).unwrap();
    let limit = sim_cfg
        .time_limit
        .unwrap_or(3.0 * mpcsim::time_scaling(gate.public_knots().last(), sim_cfg.mpc.v_ref).duration());
    let m = mpcsim::compute_metrics(&log, limit, sim_cfg.arrival_radius);
    let secs = clock.elapsed().as_secs_f64();
    results.push((
        "C6",
        "swarm safety (11 robots, 2-D)",
        Outcome::new(
            starts.len() == 11 && m.min_pairwise_distance >= 1.0 && m.arrival_rate == 1.0 && secs < 120.0,
            format!(
                "{} robots, min pairwise distance {:.4} m >= 1.0 m, arrival rate {} (limit {limit:.1} s), average time {:.1} s; {secs:.2} s < 120 s",
                starts.len(),
                m.min_pairwise_distance,
                m.arrival_rate,
                m.average_time
            ),
        ),
    ));

    // 7
    let tet_sc = common::load("tetra_3d.json");
    let tet = common::plan(&tet_sc);
    let tet_cfg = tet_sc.sim_config().unwrap();
    let tet_starts = tet_sc.robot_starts();
    let tet_log = mpcsim::simulate(&tet, &tet_starts, &tet_cfg, Parallelism::Rayon).unwrap();
    let tet_limit = tet_cfg
        .time_limit
        .unwrap_or(3.0 * mpcsim::time_scaling(tet.public_knots().last(), tet_cfg.mpc.v_ref).duration());
    let tm = mpcsim::compute_metrics(&tet_log, tet_limit, tet_cfg.arrival_radius);
    let tet_oracle = oracle_for(&tet);
    let mut tet_thetas: Vec<BarycentricWeights> = tet_starts
        .iter()
        .map(|p| geometry::barycentric_weights(p, tet.pairs().start()).unwrap())
        .collect();
    tet_thetas.extend((0..20).map(|_| tube::random_weights(4, &mut rng)));
    let c7 = check_members(&tet, &tet_oracle, &tet_thetas);
    results.push((
        "C7",
        "3-D desk-scale run (q=4)",
        Outcome::new(
            tet.q() == 4
                && tet_starts.len() == 20
                && tm.arrival_rate == 1.0
                && tm.min_pairwise_distance >= tet_sc.safety_distance
                && c7.ok(),
            format!(
                "{} robots, arrival rate {}, min pairwise distance {:.4} m >= {} m; members: {}",
                tet_starts.len(),
                tm.arrival_rate,
                tm.min_pairwise_distance,
                tet_sc.safety_distance,
                c7.describe()
            ),
        ),
    ));

    // 8
    tubes.push(("gate".into(), gate));
    tubes.push(("gate equality-only".into(), eq_only));
    tubes.push(("gate doubled".into(), doubled));
    tubes.push(("zigzag".into(), zig));
    tubes.push(("triangle".into(), tri));
    tubes.push(("tetra".into(), tet));
    let mut worst_jump = 0.0f64;
    let mut worst_floor_ratio = 0.0f64;
    let mut worst_fd = 0.0f64;
    for (label, t) in &tubes {
        for (k, r) in t.reports().iter().enumerate() {
            audits.push((format!("{label} basis {k}"), r.audit_passed));
        }
        let mut xs: Vec<DVector<f64>> = t.basis_x().to_vec();
        xs.push(t.member_x(&BarycentricWeights::uniform(t.q())).unwrap());
        for x in &xs {
            let (jump, ratio) = continuity(t, x);
            worst_jump = worst_jump.max(jump);
            worst_floor_ratio = worst_floor_ratio.max(ratio);
            worst_fd = worst_fd.max(finite_difference(t, x, &mut rng));
        }
    }
    let failed_audits: Vec<&String> = audits.iter().filter(|(_, ok)| !ok).map(|(l, _)| l).collect();
    let audits_ok = failed_audits.is_empty();
    let continuity_ok = worst_jump <= CONTINUITY_TOL;
    let fd_ok = worst_fd <= FD_REL_TOL;
    let mut c8 = Outcome::new(
        audits_ok && continuity_ok && fd_ok,
        format!(
            "KKT audits {}/{} passed; max knot jump (orders 0..=p) {worst_jump:.2e} <= {CONTINUITY_TOL:.0e} ({:.2} of coefficient rounding floor); max FD rel err of h'' {worst_fd:.2e} <= {FD_REL_TOL:.0e}",
            audits.len() - failed_audits.len(),
            audits.len(),
            worst_floor_ratio
        ),
    );
    if !failed_audits.is_empty() {
        c8.detail.push_str(&format!("; failed: {failed_audits:?}"));
    }
    results.push(("C8", "numerical hygiene", c8));

    let mut fatal = false;
    for (id, name, o) in &results {
        report(id, name, o);
        fatal |= !o.pass;
    }
    let passed = results.iter().filter(|(_, _, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
