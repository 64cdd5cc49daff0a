//! Compares the rayon-parallel code paths against their sequential
//! fallbacks. Build with `--no-default-features` to measure the
//! dependency-free sequential configuration of the adaptive paths too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use scribseg::core::{maybe_par_map, seq_map, softmax, SeededRng};
use scribseg::energy::{spatial_energy, spatial_energy_seq, EnergyConfig};
use scribseg::{Image, ProbMap};

use rand::Rng;

fn random_instance(side: usize, m: usize, seed: u64) -> (Image, ProbMap) {
    let mut rng = SeededRng::new(seed);
    let image = Image::new(
        side,
        side,
        1,
        (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let mut probs = vec![0.0; side * side * m];
    for row in probs.chunks_exact_mut(m) {
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        for (o, r) in row.iter_mut().zip(&raw) {
            *o = r / sum;
        }
    }
    (image, ProbMap::new(side, side, m, probs).unwrap())
}

fn bench_spatial_energy(c: &mut Criterion) {
    let cfg = EnergyConfig::default();
    let mut group = c.benchmark_group("spatial_energy");
    for side in [64usize, 128] {
        let (image, pred) = random_instance(side, 3, side as u64);
        group.bench_with_input(BenchmarkId::new("parallel", side), &side, |b, _| {
            b.iter(|| spatial_energy(&pred, &image, 1, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", side), &side, |b, _| {
            b.iter(|| spatial_energy_seq(&pred, &image, 1, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_row_map(c: &mut Criterion) {
    // Row-parallel softmax sweep, the shape of the prediction hot loop.
    let (rows, cols, m) = (256usize, 256usize, 8usize);
    let mut rng = SeededRng::new(7);
    let logits: Vec<f64> = (0..rows * cols * m)
        .map(|_| rng.gen_range(-3.0..3.0))
        .collect();
    let row_fn = |r: usize| -> f64 {
        let mut acc = 0.0;
        for c2 in 0..cols {
            let z = &logits[(r * cols + c2) * m..(r * cols + c2 + 1) * m];
            acc += softmax(z).unwrap()[0];
        }
        acc
    };
    let mut group = c.benchmark_group("row_map_softmax");
    group.bench_function("adaptive", |b| b.iter(|| maybe_par_map(rows, row_fn)));
    group.bench_function("sequential", |b| b.iter(|| seq_map(rows, row_fn)));
    group.finish();
}

criterion_group!(benches, bench_spatial_energy, bench_row_map);
criterion_main!(benches);
