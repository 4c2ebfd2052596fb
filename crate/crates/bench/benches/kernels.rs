use criterion::{black_box, criterion_group, criterion_main, Criterion};

use symseg::dataset::synthetic::{render_dense, sample_cloud};
use symseg::dataset::{generate_scene, SceneSpec};
use symseg::diffcore::{DiffTensor, Graph};
use symseg::geometry::project;
use symseg::losses::{kd_composite_value, KdVariant};
use symseg::network::{FusionConfig, ModalityAvailability, Model, ModelConfig};

fn ramp(shape: &[usize]) -> DiffTensor {
    let n: usize = shape.iter().product();
    DiffTensor::new(
        shape.to_vec(),
        (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect(),
    )
    .unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[16, 32, 32]);
    let k = ramp(&[32, 16, 3, 3]);
    c.bench_function("conv2d 16->32 32x32 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let kv = g.leaf(&k);
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(s)
        })
    });
}

fn projection(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let dense = render_dense(&spec).unwrap();
    let cloud = sample_cloud(&spec, &dense).unwrap();
    let cfg = spec.projection();
    c.bench_function("project 512 points", |b| {
        b.iter(|| project(black_box(&cloud), &cfg, &dense.color).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let frame = generate_scene(&SceneSpec::default()).unwrap();
    let model = Model::new(ModelConfig::new(
        [8, 16, 32, 64],
        vec![1, 2, 3, 4],
        FusionConfig::default(),
        0,
    ))
    .unwrap();
    c.bench_function("predict 32x32 both modalities", |b| {
        b.iter(|| model.predict(black_box(&frame), ModalityAvailability::BOTH).unwrap())
    });
    let teacher = model.predict(&frame, ModalityAvailability::COLOR_ONLY).unwrap();
    let student = model.predict(&frame, ModalityAvailability::BOTH).unwrap();
    c.bench_function("kd cross composite 32x32", |b| {
        b.iter(|| kd_composite_value(KdVariant::Cross, black_box(&teacher), &student).unwrap())
    });
}

criterion_group!(benches, conv, projection, network);
criterion_main!(benches);
