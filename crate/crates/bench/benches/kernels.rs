use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use stereodepth::geometry::{synthesize_right, CameraRig};
use stereodepth::model::{Model, ModelConfig};
use stereodepth::ops::{conv2d, ConvGeometry, ConvSpec, Padding};
use stereodepth::tensor::{Shape, Tensor};
use stereodepth_bench::bench_scene;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3_32ch_64px");
    let input = Tensor::<f32>::full(Shape::new(1, 32, 64, 64), 0.5);
    for dilation in [1usize, 2, 4] {
        let spec = ConvSpec {
            kernel: Tensor::full(Shape::new(32, 32, 3, 3), 0.01),
            bias: None,
            geometry: ConvGeometry {
                stride: 1,
                dilation,
                padding: Padding::uniform(dilation),
            },
        };
        group.bench_with_input(BenchmarkId::from_parameter(dilation), &spec, |b, spec| {
            b.iter(|| conv2d(black_box(&input), spec).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::<f32>::init(ModelConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("model_eval_forward");
    group.sample_size(10);
    for size in [64usize, 128] {
        let scene = bench_scene(size);
        let (left, right) = (scene.left.cast::<f32>(), scene.right.cast::<f32>());
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| model.predict(black_box(&left), black_box(&right)).unwrap())
        });
    }
    group.finish();
}

fn warp(c: &mut Criterion) {
    let rig = CameraRig::default();
    let scene = bench_scene(128);
    let disparity = scene.ground_truth.disparity(&rig);
    c.bench_function("synthesize_right_128px", |b| {
        b.iter(|| synthesize_right(black_box(&scene.left), &disparity, None).unwrap())
    });
}

criterion_group!(benches, conv, forward, warp);
criterion_main!(benches);
