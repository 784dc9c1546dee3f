use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cryocov_core::estimators::solve_mean;
use cryocov_core::geometry::sample_rotations_uniform;
use cryocov_core::imaging::{backproject, project};
use cryocov_core::kernel::{apply_an, apply_ln, covar_kernel, mean_kernel};
use cryocov_core::simulate::{operators_round_robin, standard_ctf_table};
use cryocov_core::{BasisKind, BasisSpec, Precision, SolverOptions};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(n: usize, images: usize) -> (BasisSpec, Vec<cryocov_core::ImagingOperator>) {
    let basis = BasisSpec::new(BasisKind::TruncFourier, n).unwrap();
    let ops = operators_round_robin(basis.grid(), &sample_rotations_uniform(images, 1), &standard_ctf_table()).unwrap();
    (basis, ops)
}

fn projection(c: &mut Criterion) {
    let mut g = c.benchmark_group("projection");
    for n in [8, 16] {
        let (basis, ops) = fixture(n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..basis.p()).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
        g.bench_with_input(BenchmarkId::new("project", n), &n, |b, _| b.iter(|| project(&basis, &x, &ops[0]).unwrap()));
        g.bench_with_input(BenchmarkId::new("backproject", n), &n, |b, _| {
            b.iter(|| backproject(&basis, &y, &ops[0]).unwrap())
        });
    }
    g.finish();
}

fn operators(c: &mut Criterion) {
    let mut g = c.benchmark_group("normal_operators");
    for n in [8, 16] {
        let (basis, ops) = fixture(n, 64);
        let f = mean_kernel(&basis, &ops).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DVector::from_fn(basis.p(), |_, _| rng.random::<f64>());
        g.bench_with_input(BenchmarkId::new("apply_an", n), &n, |b, _| b.iter(|| apply_an(&basis, &f, 0.0, &x).unwrap()));
    }
    let (basis, ops) = fixture(8, 64);
    let big = covar_kernel(&basis, &ops, Precision::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DMatrix::from_fn(basis.p(), basis.p(), |_, _| rng.random::<f64>());
    let s = &a + a.transpose();
    g.sample_size(10);
    g.bench_function("apply_ln/8", |b| b.iter(|| apply_ln(&basis, &big, 0.0, &s).unwrap()));
    g.finish();
}

fn pcg(c: &mut Criterion) {
    let (basis, ops) = fixture(8, 512);
    let f = mean_kernel(&basis, &ops).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bn = DVector::from_fn(basis.p(), |_, _| rng.random::<f64>());
    let mut g = c.benchmark_group("pcg_mean");
    for precondition in [false, true] {
        let opts = SolverOptions {
            tol: 1e-6,
            maxiter: 500,
            precondition,
        };
        g.bench_function(if precondition { "preconditioned" } else { "plain" }, |b| {
            b.iter(|| solve_mean(&basis, &f, 0.0, &bn, &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, projection, operators, pcg);
criterion_main!(benches);
