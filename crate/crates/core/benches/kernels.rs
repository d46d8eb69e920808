//! Sequential vs rayon kernel comparison.
//!
//! Run with the default features for both paths side by side:
//!   cargo bench -p space-core
//! With `--no-default-features` only the sequential variants compile.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use space_core::kernels as kn;
use space_core::rng::Rng;

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let (m, k, n) = (96, 96, 96);
    let a = rand_vec(&mut rng, m * k);
    let b = rand_vec(&mut rng, k * n);
    let mut out = vec![0.0f32; m * n];
    let mut group = c.benchmark_group("matmul_96");
    group.bench_function("seq", |bench| {
        bench.iter(|| {
            kn::matmul2_seq(black_box(&a), false, black_box(&b), false, m, k, n, &mut out);
            black_box(out[0])
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |bench| {
        bench.iter(|| {
            kn::matmul2_par(black_box(&a), false, black_box(&b), false, m, k, n, &mut out);
            black_box(out[0])
        })
    });
    group.finish();
}

fn bench_conv1d(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    // Stem-like block: [4, 32, 2048] -> 36 channels, k = 5.
    let (batch, c_in, l, c_out, k) = (4, 32, 2048, 36, 5);
    let x = rand_vec(&mut rng, batch * c_in * l);
    let w = rand_vec(&mut rng, c_out * c_in * k);
    let mut out = vec![0.0f32; batch * c_out * kn::conv1d_out_len(l, k, 1, 2)];
    let mut group = c.benchmark_group("conv1d_stem_block");
    group.bench_function("seq", |bench| {
        bench.iter(|| {
            kn::conv1d_fwd_seq(
                black_box(&x),
                black_box(&w),
                batch,
                c_in,
                l,
                c_out,
                k,
                1,
                2,
                &mut out,
            );
            black_box(out[0])
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |bench| {
        bench.iter(|| {
            kn::conv1d_fwd_par(
                black_box(&x),
                black_box(&w),
                batch,
                c_in,
                l,
                c_out,
                k,
                1,
                2,
                &mut out,
            );
            black_box(out[0])
        })
    });
    group.finish();
}

fn bench_gelu(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let x = rand_vec(&mut rng, 1 << 16);
    let mut out = vec![0.0f32; x.len()];
    let mut group = c.benchmark_group("gelu_64k");
    group.bench_function("seq", |bench| {
        bench.iter(|| {
            kn::unary_map_seq(black_box(&x), &mut out, kn::gelu);
            black_box(out[0])
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |bench| {
        bench.iter(|| {
            kn::unary_map_par(black_box(&x), &mut out, kn::gelu);
            black_box(out[0])
        })
    });
    group.finish();
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let lanes = 4096;
    let lane = 64;
    let x = rand_vec(&mut rng, lanes * lane);
    let mut out = vec![0.0f32; x.len()];
    let mut group = c.benchmark_group("softmax_4096x64");
    group.bench_function("dispatch", |bench| {
        bench.iter(|| {
            kn::softmax_lanes(black_box(&x), lane, &mut out);
            black_box(out[0])
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv1d, bench_gelu, bench_softmax);
criterion_main!(benches);
