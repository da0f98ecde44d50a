use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lfvid::eval::ssim;
use lfvid::{inverse_warp, td_synthesize, AngularGrid, DisplacementVector, FlowField, Image, TDRepresentation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

fn image(size: usize, seed: u64) -> Image {
    Image::new(size, size, 3, noise(size * size * 3, seed)).unwrap()
}

fn synthesis(c: &mut Criterion) {
    let mut group = c.benchmark_group("td_synthesize");
    group.sample_size(20);
    let d = DisplacementVector::new(vec![-1.3, 0.2, 1.1]).unwrap();
    for (size, views) in [(64, 5), (128, 7)] {
        let f = TDRepresentation::new(3, 4, size, size, noise(3 * 4 * size * size * 3, 1)).unwrap();
        let grid = AngularGrid::square(views).unwrap();
        group.bench_with_input(BenchmarkId::new(format!("{views}x{views}"), size), &f, |b, f| {
            b.iter(|| td_synthesize(black_box(f), &d, grid).unwrap())
        });
    }
    group.finish();
}

fn warping(c: &mut Criterion) {
    let mut group = c.benchmark_group("inverse_warp");
    for size in [64, 256] {
        let img = image(size, 2);
        let flow = FlowField::from_fn(size, size, |y, x| (0.3 * (y as f64 * 0.1).sin(), 0.7 * (x as f64 * 0.05).cos()));
        group.bench_with_input(BenchmarkId::from_parameter(size), &img, |b, img| {
            b.iter(|| inverse_warp(black_box(img), &flow).unwrap())
        });
    }
    group.finish();
}

fn structural_similarity(c: &mut Criterion) {
    let mut group = c.benchmark_group("ssim");
    for size in [64, 256] {
        let (a, b) = (image(size, 3), image(size, 4));
        group.bench_function(BenchmarkId::from_parameter(size), |bench| {
            bench.iter(|| ssim(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(kernels, synthesis, warping, structural_similarity);
criterion_main!(kernels);
