use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use difftherm::fpe::{assemble_operator, stationary_density};
use difftherm::helmholtz::{boltzmann_entropy, SamplerBox};
use difftherm::model::{make_klein_kramers, make_ou, PotentialSpec};
use difftherm::numerics::matrix_from_rows;
use difftherm::sde::{simulate, EnsembleSpec, InitialCondition};
use difftherm::{Grid, Matrix};
use std::hint::black_box;

fn rotating() -> difftherm::DiffusionModel {
    let b = matrix_from_rows(&[vec![1.0, 2.0], vec![-2.0, 1.0]]).unwrap();
    make_ou(b, Matrix::identity(2, 2), 1.0).unwrap()
}

fn operator(c: &mut Criterion) {
    let ou = rotating();
    let kk = make_klein_kramers(1.0, PotentialSpec::isotropic(1), |_| 1.0, 1.0).unwrap();
    let mut g = c.benchmark_group("assemble_operator");
    for cells in [81usize, 161] {
        let grid = Grid::cube(2, -5.0, 5.0, cells).unwrap();
        g.bench_with_input(BenchmarkId::new("rotating_ou", cells), &grid, |b, grid| b.iter(|| assemble_operator(&ou, grid).unwrap()));
        g.bench_with_input(BenchmarkId::new("klein_kramers", cells), &grid, |b, grid| b.iter(|| assemble_operator(&kk, grid).unwrap()));
    }
    g.finish();
}

fn stationary(c: &mut Criterion) {
    let ou = rotating();
    let mut g = c.benchmark_group("stationary_density");
    g.sample_size(10);
    for cells in [81usize, 161] {
        let op = assemble_operator(&ou, &Grid::cube(2, -5.0, 5.0, cells).unwrap()).unwrap();
        g.bench_with_input(BenchmarkId::new("rotating_ou", cells), &op, |b, op| b.iter(|| stationary_density(op).unwrap()));
    }
    g.finish();
}

fn sde(c: &mut Criterion) {
    let ou = rotating();
    let spec = EnsembleSpec::new(10_000, 1e-3, 0.1, InitialCondition::Point(vec![1.0, 0.0]), 1);
    let mut g = c.benchmark_group("sde");
    g.sample_size(10);
    g.bench_function("rotating_ou_10k_paths_100_steps", |b| b.iter(|| simulate(&ou, black_box(&spec)).unwrap()));
    g.finish();
}

fn monte_carlo_sigma(c: &mut Criterion) {
    let phi = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
    let h: Vec<f64> = (1..=10).map(|k| 0.1 * k as f64).collect();
    let mut g = c.benchmark_group("boltzmann_entropy");
    g.sample_size(10);
    for n in [2usize, 4] {
        let bx = SamplerBox::cube(n, 1.5).unwrap();
        g.bench_with_input(BenchmarkId::new("gaussian_1e5", n), &bx, |b, bx| {
            b.iter(|| boltzmann_entropy(&phi, &h, bx, 100_000, 7).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, operator, stationary, sde, monte_carlo_sigma);
criterion_main!(benches);
