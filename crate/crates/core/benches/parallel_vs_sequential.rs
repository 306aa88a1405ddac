use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use reachtrack::exec::Execution;
use reachtrack::ik::IkParams;
use reachtrack::kinematics::KinematicChain;
use reachtrack::planner::{PlannerParams, TermMask};
use reachtrack::reachability::{build_map, MapBuildParams};
use reachtrack::sim::{run, ScenarioSpec, SimContext};
use reachtrack::world::GridParams;

fn paths() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    if Execution::parallel_available() {
        v.push(("parallel", Execution::Parallel));
    }
    v
}

fn map_build(c: &mut Criterion) {
    let chain = KinematicChain::default_7r();
    let params = MapBuildParams {
        box_min: [-1.4, 0.0, 0.9],
        box_max: [-0.6, 0.8, 1.7],
        resolution: 0.2,
        orientations: 4,
        restarts: 2,
        seed: 7,
    };
    let ik = IkParams::default();
    let mut g = c.benchmark_group("map_build_64_cells");
    g.sample_size(10);
    for (name, exec) in paths() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| build_map(&chain, &params, &ik, exec).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let chain = KinematicChain::default_7r();
    let ctx = SimContext {
        chain: &chain,
        grid: GridParams::default_workspace(),
        planner: PlannerParams::paper_table1(),
        ik: IkParams::default(),
        map: None,
    };
    let spec = ScenarioSpec {
        runs: 8,
        horizon: 20,
        ..ScenarioSpec::scenario1(2)
    }
    .with_terms(TermMask { reach: false, ..TermMask::ALL });
    let mut g = c.benchmark_group("runs_8x20_ticks");
    g.sample_size(10);
    for (name, exec) in paths() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run(&ctx, &spec, exec, false).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, map_build, monte_carlo);
criterion_main!(benches);
