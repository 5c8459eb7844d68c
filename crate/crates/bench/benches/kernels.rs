use a3gan_core::config::RunConfig;
use a3gan_core::data::{synth_generate, SynthSpec};
use a3gan_core::generator::{Generator, GeneratorConfig, Profile};
use a3gan_core::run::build_trainer;
use a3gan_core::tensor::{no_grad, Tensor};
use a3gan_core::wpt::{wpt_decompose, wpt_tensor_levels, FilterPair};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;

fn wave(shape: &[usize], k: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|i| (i as f32 * k).sin()).collect(), shape).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    // (in, out, size, kernel, stride): direct kernels below 128 outputs, GEMM above.
    for (ci, co, s, k, st) in [(3, 8, 64, 7, 1), (8, 16, 64, 4, 2), (32, 32, 16, 3, 1), (64, 128, 8, 4, 2)] {
        let x = wave(&[4, ci, s, s], 0.31);
        let w = wave(&[co, ci, k, k], 0.17);
        let pad = if st == 1 { k / 2 } else { 1 };
        g.bench_function(BenchmarkId::from_parameter(format!("{ci}x{s}->{co}_k{k}s{st}")), |b| {
            b.iter(|| no_grad(|| x.conv2d(&w, st, pad).unwrap()))
        });
    }
    g.finish();
}

fn wpt(c: &mut Criterion) {
    let f = FilterPair::haar();
    let img = Array3::from_shape_fn((64, 64, 3), |(i, j, k)| ((i * 64 + j) as f64 * 0.01 + k as f64).sin());
    c.bench_function("wpt_decompose_64_l3", |b| b.iter(|| wpt_decompose(&img, 3, &f).unwrap()));
    let x = wave(&[4, 3, 64, 64], 0.01);
    c.bench_function("wpt_tensor_levels_b4_l3", |b| {
        b.iter(|| no_grad(|| wpt_tensor_levels(&x, 3, &f).unwrap()))
    });
}

fn generator(c: &mut Criterion) {
    let gen = Generator::<f32>::new(GeneratorConfig::desk(2), 0).unwrap();
    let x = wave(&[4, 3, 64, 64], 0.02);
    let a = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], &[4, 2]).unwrap();
    c.bench_function("generator_forward_desk_b4", |b| b.iter(|| no_grad(|| gen.forward(&x, &a).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let mut cfg = RunConfig::for_profile(Profile::Desk64, 2);
    cfg.synth = SynthSpec {
        n_identities: 8,
        ..cfg.synth
    };
    let (data, _) = synth_generate(&cfg.synth).unwrap();
    let mut trainer = build_trainer::<f32>(&cfg, &data).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("iteration_desk_b4", |b| b.iter(|| trainer.step(&data).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, wpt, generator, train_step);
criterion_main!(benches);
