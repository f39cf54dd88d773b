use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use qtemper::autodiff::Tape;
use qtemper::models::{build, ForwardMode, ModelSpec};
use qtemper::quantizer::{quantize, quantize_tempered, quantize_values, QuantizerState};
use qtemper::{NoisePolicy, RandomSource, Tensor};
use qtemper_bench::normal_tensor;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (normal_tensor(&[n, n], 1), normal_tensor(&[n, n], 2));
        g.throughput(Throughput::Elements((2 * n * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let x = normal_tensor(&[32, 16, 16, 16], 3);
    let w = normal_tensor(&[16, 16, 3, 3], 4);
    c.bench_function("conv3x3 forward+backward 32x16x16x16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = xv.conv2d(wv, 1, 1).unwrap();
            let loss = y.sum();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn quantizers(c: &mut Criterion) {
    let w = normal_tensor(&[1 << 16], 5).map(|v| 0.05 * v);
    let q = QuantizerState::new(2, true, 0.05).unwrap().with_noise(0.2, 50.0).unwrap();
    let mut g = c.benchmark_group("quantize");
    g.throughput(Throughput::Elements(w.len() as u64));
    g.bench_function("values", |b| b.iter(|| black_box(quantize_values(&w, &q).unwrap())));
    g.bench_function("plain tape", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let out = quantize(tape.param(w.clone()), tape.param(Tensor::from_vec(vec![q.step_size])), &q).unwrap();
            black_box(out.value())
        })
    });
    let mut rng = RandomSource::new(6);
    g.bench_function("tempered tape", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let s = tape.param(Tensor::from_vec(vec![q.step_size]));
            let out = quantize_tempered(tape.param(w.clone()), s, &q, &mut rng, 1.0).unwrap();
            black_box(out.value())
        })
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let spec = ModelSpec::resnet_tiny([3, 16, 16], 8, 10);
    let mut model = build(&spec, &mut RandomSource::new(7)).unwrap();
    model.enable_qat(2, &NoisePolicy::default(), false).unwrap();
    let x = normal_tensor(&[64, 3, 16, 16], 8);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let mut rng = RandomSource::new(9);
    let mut g = c.benchmark_group("resnet-tiny w8 16x16");
    g.throughput(Throughput::Elements(64));
    g.sample_size(20);
    g.bench_function("tempered QAT step, batch 64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let out = model.forward(&tape, tape.constant(x.clone()), &mut ForwardMode::train(1.0, &mut rng)).unwrap();
            let loss = out.logits.softmax_cross_entropy(&labels).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    g.finish();
}

criterion_group!(benches, matmul, conv, quantizers, train_step);
criterion_main!(benches);
