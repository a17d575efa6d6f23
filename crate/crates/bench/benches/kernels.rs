use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ringformer_bench::square_matrices;
use ringformer_core::analysis::linear_cka;
use ringformer_core::ops;
use ringformer_core::rng::Rng;
use ringformer_core::tensor::Tensor;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_f32");
    for n in [64usize, 128, 256] {
        let (a, b) = square_matrices(n, 42);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()));
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = Rng::new(7);
    let (n, h, heads) = (64usize, 128usize, 8usize);
    let x = Tensor::<f32>::randn(&[n, h], 1.0, &mut rng);
    let w_q = Tensor::<f32>::randn(&[h, h], 0.1, &mut rng);
    let w_k = Tensor::<f32>::randn(&[h, h], 0.1, &mut rng);
    let w_v = Tensor::<f32>::randn(&[h, h], 0.1, &mut rng);
    let w_o = Tensor::<f32>::randn(&[h, h], 0.1, &mut rng);
    c.bench_function("multi_head_attention_64x128", |bench| {
        bench.iter(|| {
            black_box(
                ops::multi_head_attention(&x, &x, &w_q, &w_k, &w_v, &w_o, heads, None, false)
                    .unwrap(),
            )
        });
    });
}

fn bench_layer_norm_and_softmax(c: &mut Criterion) {
    let mut rng = Rng::new(9);
    let x = Tensor::<f32>::randn(&[256, 256], 1.0, &mut rng);
    let gamma = Tensor::<f32>::full(&[256], 1.0);
    let beta = Tensor::<f32>::zeros(&[256]);
    c.bench_function("layer_norm_256x256", |bench| {
        bench.iter(|| black_box(ops::layer_norm(&x, &gamma, &beta, 1e-5).unwrap()));
    });
    c.bench_function("softmax_256x256", |bench| {
        bench.iter(|| black_box(ops::softmax(&x, 1).unwrap()));
    });
}

fn bench_cka(c: &mut Criterion) {
    let mut rng = Rng::new(11);
    let x = Tensor::<f64>::randn(&[256, 64], 1.0, &mut rng);
    let y = Tensor::<f64>::randn(&[256, 64], 1.0, &mut rng);
    c.bench_function("linear_cka_256x64", |bench| {
        bench.iter(|| black_box(linear_cka(&x, &y).unwrap()));
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_attention,
    bench_layer_norm_and_softmax,
    bench_cka
);
criterion_main!(benches);
