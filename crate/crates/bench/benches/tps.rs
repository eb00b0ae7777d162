use criterion::{criterion_group, criterion_main, Criterion};
use partseg::ndarray::Array3;
use partseg::tps::{make_pair, sample_tps, SamplingGrid, TpsConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tps(c: &mut Criterion) {
    let cfg = TpsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Array3::from_shape_fn((3, 128, 128), |(c, y, x)| ((c + y * x) % 7) as f32 / 7.0);
    let params = sample_tps(&mut rng, &cfg);
    c.bench_function("tps/sample", |b| b.iter(|| sample_tps(&mut rng, &cfg)));
    c.bench_function("tps/grid_128", |b| b.iter(|| SamplingGrid::new(&params, 128, 128).unwrap()));
    let grid = SamplingGrid::new(&params, 128, 128).unwrap();
    c.bench_function("tps/apply_128", |b| b.iter(|| grid.apply(image.view()).unwrap()));
    c.bench_function("tps/make_pair_128", |b| b.iter(|| make_pair(image.view(), &mut rng, &cfg).unwrap()));
}

criterion_group!(benches, tps);
criterion_main!(benches);
