use std::hint::black_box;
use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtube::mpcsim;
use vtube::par::Parallelism;
use vtube::scenario::{self, Scenario};
use vtube::tube::{self, OptimalVirtualTube};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    scenario::load_scenario(&path).expect("fixture loads")
}

fn plan(sc: &Scenario) -> OptimalVirtualTube {
    tube::build_tube(
        &sc.pairs().unwrap(),
        &sc.obstacles().unwrap(),
        &sc.rrt_config(),
        &sc.traj_config().unwrap(),
        Parallelism::Rayon,
    )
    .expect("fixture plans")
}

fn member_batches(c: &mut Criterion) {
    let tube = plan(&fixture("triangle_q3.json"));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let thetas: Vec<_> = (0..20_000).map(|_| tube::random_weights(tube.q(), &mut rng)).collect();
    let mut group = c.benchmark_group("member_batch_20000");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(tube.member_batch(black_box(&thetas), mode).unwrap()))
        });
    }
    group.finish();
}

fn per_pair_qps(c: &mut Criterion) {
    let tube = plan(&fixture("tetra_3d.json"));
    let mut group = c.benchmark_group("basis_qps_q4");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                OptimalVirtualTube::from_paths(tube.pairs().clone(), tube.paths().to_vec(), tube.config().clone(), mode)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn per_robot_mpc(c: &mut Criterion) {
    let sc = fixture("gate_2d.json");
    let tube = plan(&sc);
    let cfg = mpcsim::SimConfig { time_limit: Some(2.0), ..sc.sim_config().unwrap() };
    let starts = sc.robot_starts();
    let mut group = c.benchmark_group("mpc_20_ticks_11_robots");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mpcsim::simulate(&tube, black_box(&starts), &cfg, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, member_batches, per_pair_qps, per_robot_mpc);
criterion_main!(benches);
