use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use flashpat::microbench::{expand_suite, Baseline, SuiteConfig};
use flashpat::pattern::{generate_schedule, interleave_mix};
use flashpat::{Location, MixSpec};
use flashpat_bench::{baseline, IO_SIZE, TARGET_SIZE};

const IOS: u64 = 10_000;

fn schedules(c: &mut Criterion) {
    let mut g = c.benchmark_group("schedule");
    g.throughput(Throughput::Elements(IOS));
    let mut partitioned = baseline(Baseline::SW, IOS);
    partitioned.location = Location::Partitioned { partitions: 16 };
    let mut reverse = baseline(Baseline::SW, IOS);
    reverse.location = Location::Ordered { incr: -1 };
    reverse.target_size = IOS * IO_SIZE;
    for (name, p) in [
        ("sequential", baseline(Baseline::SR, IOS)),
        ("random", baseline(Baseline::RW, IOS)),
        ("partitioned", partitioned),
        ("reverse", reverse),
    ] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &p, |b, p| {
            b.iter(|| generate_schedule(black_box(p)).unwrap())
        });
    }
    g.finish();
}

fn mixes(c: &mut Criterion) {
    let mut g = c.benchmark_group("mix");
    for ratio in [1u64, 8, 64] {
        let mut second = baseline(Baseline::RW, IOS / ratio);
        second.target_offset = TARGET_SIZE;
        let mix = MixSpec { first: baseline(Baseline::SR, IOS), second, ratio };
        g.throughput(Throughput::Elements(mix.len()));
        g.bench_with_input(BenchmarkId::from_parameter(ratio), &mix, |b, m| {
            b.iter(|| interleave_mix(black_box(m)).unwrap())
        });
    }
    g.finish();
}

fn suite(c: &mut Criterion) {
    let cfg = SuiteConfig::default();
    c.bench_function("expand_suite", |b| b.iter(|| expand_suite(black_box(&cfg)).unwrap()));
}

criterion_group!(benches, schedules, mixes, suite);
criterion_main!(benches);
