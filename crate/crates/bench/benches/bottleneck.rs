use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use partseg::bottleneck::{expand, normalize_channels, part_centers, squeeze, AppearanceFeatureMap, MassNormalization};
use partseg::candle_core::{Device, Tensor};
use partseg::losses::{background_concentration, foreground_concentration};

fn bottleneck(c: &mut Criterion) {
    let dev = Device::Cpu;
    let mut group = c.benchmark_group("bottleneck");
    for (k, l, n) in [(5, 64, 16), (9, 128, 32)] {
        let logits = Tensor::randn(0f32, 1.0, (8, k, n, n), &dev).unwrap();
        let a = AppearanceFeatureMap::try_from(Tensor::randn(0f32, 1.0, (8, l, n, n), &dev).unwrap()).unwrap();
        let s = normalize_channels(&logits).unwrap();
        let f = squeeze(&s, &a).unwrap();
        let id = format!("k{k}_l{l}_{n}x{n}");
        group.bench_with_input(BenchmarkId::new("normalize", &id), &logits, |b, x| b.iter(|| normalize_channels(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("squeeze", &id), &(), |b, _| b.iter(|| squeeze(&s, &a).unwrap()));
        group.bench_with_input(BenchmarkId::new("expand", &id), &(), |b, _| b.iter(|| expand(&f, &s).unwrap()));
        group.bench_with_input(BenchmarkId::new("centers", &id), &(), |b, _| {
            b.iter(|| part_centers(&s, MassNormalization::Capped).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("concentration", &id), &(), |b, _| {
            b.iter(|| {
                foreground_concentration(&s, MassNormalization::Capped).unwrap();
                background_concentration(&s, MassNormalization::Capped).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bottleneck);
criterion_main!(benches);
