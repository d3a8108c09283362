//! Benchmarks of the hot kernels: residual/Jacobian assembly, ILU
//! factorization, AMG setup and V-cycle, and full two-stage
//! preconditioner applications.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use thermoflow::amg::{amg_setup, amg_vcycle, AmgParams};
use thermoflow::discretization::{assemble_jacobian, assemble_residual, EqRow, Unknown};
use thermoflow::precond::{build_preconditioner, TwoStageSpec};
use thermoflow::sparse::gmres::Preconditioner;
use thermoflow::sparse::ilu::ilu_factor;
use thermoflow_bench::{fixture, jacobian};

fn bench_assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("assembly");
    for n in [20usize, 40] {
        let (model, state, prev) = fixture(n);
        group.bench_with_input(BenchmarkId::new("residual", n), &n, |b, _| {
            b.iter(|| assemble_residual(&model, &state, &prev).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("jacobian", n), &n, |b, _| {
            b.iter(|| assemble_jacobian(&model, &state, &prev).unwrap())
        });
    }
    group.finish();
}

fn bench_ilu(c: &mut Criterion) {
    let mut group = c.benchmark_group("ilu");
    for n in [20usize, 40] {
        let sys = jacobian(n);
        for level in [0usize, 1] {
            group.bench_with_input(
                BenchmarkId::new(format!("factor-ilu{level}"), n),
                &n,
                |b, _| b.iter(|| ilu_factor(&sys.matrix, level).unwrap()),
            );
        }
        let factors = ilu_factor(&sys.matrix, 0).unwrap();
        let rhs = vec![1.0; sys.matrix.n_rows];
        group.bench_with_input(BenchmarkId::new("solve-ilu0", n), &n, |b, _| {
            b.iter(|| factors.apply(&rhs).unwrap())
        });
    }
    group.finish();
}

fn bench_amg(c: &mut Criterion) {
    let mut group = c.benchmark_group("amg");
    for n in [40usize, 80] {
        let sys = jacobian(n);
        let a_pp = sys.block(&[EqRow::Pressure], &[Unknown::P]);
        let params = AmgParams::default();
        group.bench_with_input(BenchmarkId::new("setup", n), &n, |b, _| {
            b.iter(|| amg_setup(&a_pp, &params).unwrap())
        });
        let hierarchy = amg_setup(&a_pp, &params).unwrap();
        let rhs = vec![1.0; a_pp.n_rows];
        group.bench_with_input(BenchmarkId::new("vcycle", n), &n, |b, _| {
            b.iter(|| amg_vcycle(&hierarchy, &rhs).unwrap())
        });
    }
    group.finish();
}

fn bench_precond_apply(c: &mut Criterion) {
    let mut group = c.benchmark_group("precond-apply");
    let n = 40;
    let sys = jacobian(n);
    let rhs = vec![1.0; sys.matrix.n_rows];
    for variant in ["cpr-amg", "cptr-block-amg", "cptr-uamg", "cptr-bd-amg"] {
        let spec = TwoStageSpec::from_variant(variant).unwrap();
        let schur = thermoflow::discretization::assemble_schur_approx(
            &fixture(n).0,
            &fixture(n).1,
        )
        .unwrap();
        let stack = build_preconditioner(&spec, &sys, Some(&schur)).unwrap();
        group.bench_function(variant, |b| b.iter(|| stack.apply(&rhs).unwrap()));
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_assembly,
    bench_ilu,
    bench_amg,
    bench_precond_apply
);
criterion_main!(benches);
