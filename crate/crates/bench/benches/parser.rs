use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vibtag::parser::{matrix_tree, mst};
use vibtag::Mat;

fn scores(n: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((n + 1, n), |_| rng.gen_range(-3.0..3.0))
}

fn partition(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_partition_with_marginals");
    for n in [10, 30, 60] {
        let arcs = scores(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &arcs, |b, arcs| {
            b.iter(|| matrix_tree::log_partition_with_marginals(black_box(arcs)).unwrap())
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_heads");
    for n in [10, 30, 60] {
        let arcs = scores(n, 100 + n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &arcs, |b, arcs| {
            b.iter(|| mst::decode_heads(black_box(arcs)))
        });
    }
    group.finish();
}

criterion_group!(benches, partition, decode);
criterion_main!(benches);
