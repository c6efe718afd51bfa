//! Sequential vs rayon-pool timings for the hot kernels.
//!
//! Run with `cargo bench`. The `par` variants exist only with the `parallel`
//! feature (on by default); with `--no-default-features` the suite times the
//! sequential paths alone.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unblur::blur::{apply_blur_with_exec, linear_motion_kernel, BlurSpec};
use unblur::imaging::resample_with_exec;
use unblur::parallel::Exec;
use unblur::synth::test_card;
use unblur::tensor::kernels::{conv2d, conv2d_input_grad};

fn execs() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("seq", Exec::Seq)];
    #[cfg(feature = "parallel")]
    v.push(("par", Exec::Par));
    v
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (ci, h, w, co, k) = (16usize, 64usize, 64usize, 16usize, 3usize);
    let x: Vec<f32> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wt: Vec<f32> = (0..co * ci * k * k).map(|_| rng.random_range(-0.1..0.1)).collect();
    let g: Vec<f32> =
        (0..co * (h - k + 1) * (w - k + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut group = c.benchmark_group("conv2d_fwd_16x64x64");
    for (name, exec) in execs() {
        group.bench_function(name, |b| {
            b.iter(|| black_box(conv2d(exec, &x, (ci, h, w), &wt, (co, k))))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("conv2d_input_grad_16x64x64");
    for (name, exec) in execs() {
        group.bench_function(name, |b| {
            b.iter(|| {
                black_box(conv2d_input_grad(exec, &g, (co, h - k + 1, w - k + 1), &wt, (ci, k)))
            })
        });
    }
    group.finish();
}

fn bench_resample(c: &mut Criterion) {
    let img = test_card(192, 192, 2);
    let mut group = c.benchmark_group("resample_192_to_256");
    for (name, exec) in execs() {
        group.bench_function(name, |b| {
            b.iter(|| black_box(resample_with_exec(&img, 256, 256, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_blur(c: &mut Criterion) {
    let img = test_card(128, 128, 3);
    let spec = BlurSpec {
        kernel: linear_motion_kernel(9.0, 35.0, 11).unwrap(),
        noise_sigma: 0.01,
        seed: 7,
    };
    let mut group = c.benchmark_group("apply_blur_128_k11");
    for (name, exec) in execs() {
        group.bench_function(name, |b| {
            b.iter(|| black_box(apply_blur_with_exec(&img, &spec, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_resample, bench_blur);
criterion_main!(benches);
