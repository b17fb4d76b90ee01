use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use trackhijack::attackopt::{generate_patch, AttackConfig, AttackFrame};
use trackhijack::geometry::BBox;
use trackhijack::harness::run_benign;
use trackhijack::harness::RunOptions;
use trackhijack::imaging::EotParams;
use trackhijack::mot::{hungarian, Mot, MotConfig};
use trackhijack_bench::{detector, scenario};

fn detector_passes(c: &mut Criterion) {
    let det = detector();
    let sc = scenario();
    let x = &sc.frames[0];
    c.bench_function("detector_forward", |b| b.iter(|| det.forward(black_box(x)).unwrap()));
    let trace = det.trace(x).unwrap();
    let cfg = &det.config;
    let head_grad = vec![1e-3; cfg.head_channels() * cfg.grid_height() * cfg.grid_width()];
    c.bench_function("detector_backward_input", |b| {
        b.iter(|| det.backward_input(black_box(&trace), black_box(&head_grad), None))
    });
}

fn attack_iterations(c: &mut Criterion) {
    let det = detector();
    let sc = scenario();
    let t = sc.t_start;
    let b = sc.targets[t];
    let frames = vec![AttackFrame {
        image: sc.frames[t].clone(),
        b_o: b,
        location: (b.x1.round() as i64, sc.regions[t].y0),
    }];
    let dir = sc.attack_direction();
    let cfg = AttackConfig { iterations: 10, patch_size: sc.patch_size, eot: EotParams::default(), ..AttackConfig::default() };
    let mut group = c.benchmark_group("attack");
    group.sample_size(10);
    group.bench_function("conditional_10_iterations_eot4", |bch| {
        bch.iter(|| generate_patch(&det, black_box(&frames), &dir, &cfg).unwrap())
    });
    group.finish();
}

fn tracking(c: &mut Criterion) {
    let det = detector();
    let sc = scenario();
    c.bench_function("benign_run", |b| {
        b.iter(|| run_benign(black_box(&sc), &det, &MotConfig::default(), &RunOptions::default()).unwrap())
    });
    let boxes: Vec<(BBox, f64)> = (0..12)
        .map(|i| (BBox::new(10.0 * i as f64, 5.0, 10.0 * i as f64 + 14.0, 20.0).unwrap(), 0.9))
        .collect();
    c.bench_function("mot_step_12_objects", |b| {
        b.iter_batched(
            || {
                let mut m = Mot::new(MotConfig::default()).unwrap();
                m.step(&boxes);
                m
            },
            |mut m| m.step(black_box(&boxes)),
            BatchSize::SmallInput,
        )
    });
    let cost: Vec<Vec<f64>> = (0..20).map(|i| (0..20).map(|j| ((i * 7 + j * 13) % 17) as f64).collect()).collect();
    c.bench_function("hungarian_20x20", |b| b.iter(|| hungarian(black_box(&cost))));
}

criterion_group!(benches, detector_passes, attack_iterations, tracking);
criterion_main!(benches);
