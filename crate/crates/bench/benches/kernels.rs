use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fbp_core::div_inverse::{rinv_spatial, BoxSpec};
use fbp_core::pde::{evolve, neumann_poisson};
use fbp_core::rankone::solve_rank_one;
use fbp_core::{modify_profile, Grid, Profile, WindowParams};
use nalgebra::DVector;
use ndarray::{ArrayD, IxDyn};

fn pm() -> Profile {
    Profile::perona_malik_rational(1.0).unwrap()
}

fn solver(c: &mut Criterion) {
    let mp = modify_profile(&pm(), 0.3, 0.4).unwrap();
    let g1 = Grid::new_1d(256, 0.0, 1.0, 32, 0.0125).unwrap();
    let u1 = g1.sample(|x| 1.5 * (PI * x[0]).cos() / PI);
    c.bench_function("evolve 1d 256x32", |b| b.iter(|| evolve(&mp, black_box(&u1), &g1).unwrap()));
    let g2 = Grid::new_2d([48, 48], [0.0, 0.0], [1.0, 1.0], 8, 0.002).unwrap();
    let u2 = g2.sample(|x| (PI * x[0]).cos() / PI + 0.5 * (PI * x[1]).cos() / PI);
    c.bench_function("evolve 2d 48x48x8", |b| b.iter(|| evolve(&mp, black_box(&u2), &g2).unwrap()));
    let f: Vec<f64> = g2.sample(|x| (PI * x[0]).cos() * (2.0 * PI * x[1]).cos());
    c.bench_function("neumann poisson 48x48", |b| b.iter(|| neumann_poisson(&g2, black_box(&f)).unwrap()));
}

fn div_inverse(c: &mut Criterion) {
    let spec = BoxSpec::unit(2);
    let u = ArrayD::from_shape_fn(IxDyn(&[128, 128]), |ix| {
        ((ix[0] as f64 + 0.5) / 128.0 * PI).cos() + 0.3 * ((ix[1] as f64) / 20.0).sin()
    });
    c.bench_function("right inverse 128x128", |b| b.iter(|| rinv_spatial(black_box(&u), &spec)));
}

fn rank_one(c: &mut Criterion) {
    let prof = pm();
    let mp = modify_profile(&prof, 0.3, 0.4).unwrap();
    let w = WindowParams::new(&prof, 0.3, 0.4).unwrap();
    let zeta = DVector::from_vec(vec![0.6, 0.8]);
    let p = &zeta * 1.2 + DVector::from_vec(vec![1e-3, -5e-4]);
    let beta = DVector::from_vec(fbp_core::profiles::eval_flux(&mp, (&zeta * 1.2).as_slice()))
        + DVector::from_vec(vec![-4e-4, 7e-4]);
    c.bench_function("rank-one solve 2d", |b| {
        b.iter(|| solve_rank_one(black_box(&p), black_box(&beta), &w, None).unwrap())
    });
}

criterion_group!(benches, solver, div_inverse, rank_one);
criterion_main!(benches);
