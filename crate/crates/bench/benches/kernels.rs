use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tfdw_bench::gaussian;
use tfdw_core::coulomb::hartree_potential;
use tfdw_core::energy::energy_and_gradient;
use tfdw_core::minimizer::Preconditioner;
use tfdw_core::potentials::{sample_potential, PotentialSpec};
use tfdw_core::{CoulombKernel, ModelParams};

fn hartree(c: &mut Criterion) {
    let mut group = c.benchmark_group("hartree_potential");
    group.sample_size(10);
    for n in [32, 48, 64] {
        let u = gaussian(n);
        let k = CoulombKernel::shared(u.grid()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| hartree_potential(black_box(&u), &k).unwrap())
        });
    }
    group.finish();
}

fn energy(c: &mut Criterion) {
    let mut group = c.benchmark_group("energy_and_gradient");
    group.sample_size(10);
    let p = ModelParams::default();
    for n in [32, 48, 64] {
        let u = gaussian(n);
        let k = CoulombKernel::shared(u.grid()).unwrap();
        let v = sample_potential(&PotentialSpec::single_site(1.0), u.grid()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| energy_and_gradient(black_box(&u), &v, &p, &k).unwrap())
        });
    }
    group.finish();
}

fn precondition(c: &mut Criterion) {
    let u = gaussian(48);
    let k = CoulombKernel::shared(u.grid()).unwrap();
    let pre = Preconditioner::new(&k, 1.0);
    c.bench_function("preconditioner/48", |b| b.iter(|| pre.apply(black_box(&u))));
}

criterion_group!(benches, hartree, energy, precondition);
criterion_main!(benches);
