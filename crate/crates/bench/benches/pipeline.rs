use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use slabpen::nn::{score_slice, score_volume};
use slabpen::phantom::training_slices;
use slabpen::tv::tv_denoise_volume;
use slabpen::{
    adjoint_pen, fit_tensor, forward_pen, lsq_pen, make_tensor_field, synth_dwi, train_dsm, Architecture,
    DiffusionProtocol, DsmConfig, EnergyModel, TvConfig, Volume,
};
use slabpen_bench::problem;

fn operators(c: &mut Criterion) {
    let (truth, meas, profiles) = problem(64, 8);
    let mask = meas.mask().to_vec();
    c.bench_function("forward_pen 64^3", |b| b.iter(|| forward_pen(black_box(&truth), &profiles, &mask).unwrap()));
    c.bench_function("adjoint_pen 64^3", |b| b.iter(|| adjoint_pen(black_box(&meas), &profiles).unwrap()));
    c.bench_function("lsq_pen 64^3", |b| b.iter(|| lsq_pen(black_box(&meas), &profiles).unwrap()));
}

fn tv(c: &mut Criterion) {
    let (truth, _, _) = problem(64, 8);
    let cfg = TvConfig::new(0.05);
    let mut g = c.benchmark_group("tv");
    g.sample_size(10);
    g.bench_function("tv_denoise_volume 64^3", |b| b.iter(|| tv_denoise_volume(black_box(&truth), &cfg).unwrap()));
    g.finish();
}

fn prior(c: &mut Criterion) {
    let model = EnergyModel::init(&Architecture::default(), 0).unwrap();
    let (truth, _, _) = problem(32, 4);
    let slice = slabpen::extract_slices(&truth, slabpen::Axis::Z).swap_remove(16);
    let small = Volume::from_fn([16, 16, 16], |x, y, z| truth.get(2 * x, 2 * y, 2 * z));
    let mut g = c.benchmark_group("prior");
    g.sample_size(10);
    g.bench_function("score_slice 32^2", |b| b.iter(|| score_slice(black_box(&slice), &model).unwrap()));
    g.bench_function("score_volume 16^3", |b| b.iter(|| score_volume(black_box(&small), &model).unwrap()));
    let data = training_slices([32, 32, 32], 1, 0, 8).unwrap();
    let cfg = DsmConfig {
        steps: 1,
        ..DsmConfig::default()
    };
    g.bench_function("dsm step, batch 4", |b| b.iter(|| train_dsm(black_box(&data), &cfg).unwrap()));
    g.finish();
}

fn dti(c: &mut Criterion) {
    let (truth, _, _) = problem(32, 4);
    let proto = DiffusionProtocol::default();
    let dwis = synth_dwi(&truth, &make_tensor_field([32, 32, 32], 0), &proto).unwrap();
    c.bench_function("fit_tensor 32^3", |b| b.iter(|| fit_tensor(black_box(&dwis), &proto, 0.05).unwrap()));
}

criterion_group!(benches, operators, tv, prior, dti);
criterion_main!(benches);
