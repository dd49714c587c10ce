use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kae::autodiff::Tape;
use kae::data::{synth_generate, PointCloud, ShapeClass};
use kae::detection::{fps_select, nms_select, point_scores, NmsConfig};
use kae::model::graph::build_forward;
use kae::model::{KaeConfig, ModelParams};

fn cloud(n: usize, seed: u64) -> PointCloud {
    synth_generate(ShapeClass::Torus, n, seed, 0.01).unwrap()
}

fn chamfer(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [64, 256, 1024] {
        let (a, b) = (cloud(n, 1).to_tensor(), cloud(n, 2).to_tensor());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let y = tape.param(b.clone());
                let loss = tape.chamfer_loss(x, y).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.value(loss).item())
            })
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("kae_step");
    group.sample_size(20);
    for (name, config) in [
        ("plain", KaeConfig::new(256, 8)),
        ("aux", KaeConfig::new(256, 8).with_aux(3)),
    ] {
        let params = ModelParams::init(&config, 0).unwrap();
        let x = cloud(256, 3).to_tensor();
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let net = params.bind(&mut tape);
                let xv = tape.constant(x.clone());
                let label = config.aux_enabled().then_some(1);
                let vars = build_forward(&mut tape, &net, &config, xv, label).unwrap();
                tape.backward(vars.total).unwrap();
                black_box(tape.value(vars.total).item())
            })
        });
    }
    group.finish();
}

fn detection(c: &mut Criterion) {
    let config = KaeConfig::new(1024, 16);
    let params = ModelParams::init(&config, 0).unwrap();
    let pc = cloud(1024, 4);
    let scores = point_scores(&params.encode(&pc).unwrap()).unwrap();
    let mut group = c.benchmark_group("detection");
    group.bench_function("fps_1024_k16", |b| {
        b.iter(|| black_box(fps_select(&pc, 16, 0).unwrap()))
    });
    group.bench_function("nms_1024_k16", |b| {
        b.iter(|| black_box(nms_select(&pc, &scores, 16, &NmsConfig::default()).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, chamfer, forward_backward, detection);
criterion_main!(benches);
