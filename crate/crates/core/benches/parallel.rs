use std::hint::black_box;
use std::sync::Arc;

use boxsqp::elliptic::EllipticProblem;
use boxsqp::exec;
use boxsqp::fem::{P1Space, SimplexMesh};
use boxsqp::measure::{weighted_inner, GridFunction, MeasureSpace};
use boxsqp::qp::{FrozenHessian, QpInstance};
use boxsqp::verification::{brute_force_qp, make_synthetic, Spectrum};
use boxsqp::ProblemOracle;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn brute_force(c: &mut Criterion) {
    let mut group = c.benchmark_group("brute_force_qp_n10");
    group.sample_size(10);
    let mut p = make_synthetic(7, 10, Spectrum::new(0.1, 4.0), 0.0).unwrap();
    let u = GridFunction::zeros(p.control_space());
    let phi = p.phi(&u).unwrap();
    let bounds = p.bounds();
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(on);
            b.iter(|| {
                let h = FrozenHessian::new(&mut p, u.clone());
                let mut q = QpInstance::new(h, u.clone(), 0.5, bounds, &phi).unwrap();
                black_box(brute_force_qp(&mut q).unwrap())
            })
        });
    }
    group.finish();
}

fn assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_mass_3d_n4");
    let fe = P1Space::new(Arc::new(SimplexMesh::unit_cube(3, 4).unwrap()));
    let coef: Vec<f64> = (0..fe.qp_count()).map(|i| 1.0 + (i % 7) as f64).collect();
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(on);
            b.iter(|| black_box(fe.weighted_mass(&coef)))
        });
    }
    group.finish();
}

fn inner_products(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_inner_1e6");
    let n = 1_000_000;
    let space = MeasureSpace::new((0..n).map(|i| 1.0 + (i % 3) as f64).collect()).unwrap();
    let v = GridFunction::from_fn(&space, |i| (i as f64).sin());
    let w = GridFunction::from_fn(&space, |i| (i as f64).cos());
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(on);
            b.iter(|| black_box(weighted_inner(&v, &w).unwrap()))
        });
    }
    group.finish();
}

fn reduced_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("elliptic_phi_3d_n3");
    group.sample_size(10);
    let (p, d) = EllipticProblem::exponential_benchmark(3, 3).unwrap();
    let u = GridFunction::constant(p.control_space(), d.initial_control);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(on);
            b.iter(|| {
                // fresh oracle so the state cache does not short-circuit
                let mut q = p.clone();
                black_box(q.phi(&u).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, brute_force, assembly, inner_products, reduced_gradient);
criterion_main!(benches);
