use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use levy_bsde::generator::{families, TerminalSpec};
use levy_bsde::levy::{sample_paths_with, Atom, LevyTriplet, TimeGrid};
use levy_bsde::pdie::{solve_pdie, PdieSettings};
use levy_bsde::solver::{solve_markov_dp, solve_picard_regression, DpSettings, ForwardSpec, PicardSettings};
use levy_bsde::Execution;

const MODES: [(&str, Execution); 2] = [("serial", Execution::Serial), ("parallel", Execution::Parallel)];

fn model() -> LevyTriplet {
    LevyTriplet::new(0.0, 0.5, vec![Atom::new(0.5, 1.0), Atom::new(-0.3, 2.0)]).unwrap()
}

fn tanh_terminal() -> TerminalSpec {
    TerminalSpec::of_terminal_state("tanh", Arc::new(f64::tanh), Arc::new(|x: f64| 1.0 - x.tanh().powi(2)), 1.0, 1.0, 0.5)
}

fn lattice(n: usize) -> Vec<f64> {
    (0..n).map(|k| -5.0 + 10.0 * k as f64 / (n - 1) as f64).collect()
}

fn bench_sampling(c: &mut Criterion) {
    let m = model();
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let mut g = c.benchmark_group("sample_paths");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 50_000), |b| {
            b.iter(|| sample_paths_with(&m, &grid, 50_000, 1, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_picard(c: &mut Criterion) {
    let m = model();
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let bundle = sample_paths_with(&m, &grid, 20_000, 1, Execution::Parallel).unwrap();
    let spec = families::subquadratic(0.5, 0.3, 0.2);
    let term = tanh_terminal();
    let mut g = c.benchmark_group("picard");
    g.sample_size(10);
    for (name, exec) in MODES {
        let settings = PicardSettings { exec, ..Default::default() };
        g.bench_function(BenchmarkId::new(name, 20_000), |b| {
            b.iter(|| solve_picard_regression(&m, &spec, &term, &bundle, &settings).unwrap())
        });
    }
    g.finish();
}

fn bench_dp(c: &mut Criterion) {
    let m = model();
    let fwd = ForwardSpec::levy(&m);
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let states = lattice(201);
    let spec = families::subquadratic(0.5, 0.3, 0.2);
    let mut g = c.benchmark_group("markov_dp");
    g.sample_size(10);
    for (name, exec) in MODES {
        let settings = DpSettings { exec, ..Default::default() };
        g.bench_function(BenchmarkId::new(name, 201), |b| {
            b.iter(|| solve_markov_dp(&fwd, &spec, f64::tanh, m.atoms(), &states, &grid, &settings).unwrap())
        });
    }
    g.finish();
}

fn bench_pdie(c: &mut Criterion) {
    let m = model();
    let fwd = ForwardSpec::levy(&m);
    let grid = TimeGrid::uniform(1.0, 400).unwrap();
    let space = lattice(401);
    let spec = families::linear(-0.5, 0.1, 0.2, 0.0);
    let mut g = c.benchmark_group("pdie");
    g.sample_size(10);
    for (name, exec) in MODES {
        let settings = PdieSettings { exec };
        g.bench_function(BenchmarkId::new(name, 401), |b| {
            b.iter(|| solve_pdie(&fwd, &spec, f64::tanh, m.atoms(), &space, &grid, &settings).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sampling, bench_picard, bench_dp, bench_pdie);
criterion_main!(benches);
