use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use partseg::bottleneck::{
    expand, normalize_channels, squeeze, AppearanceFeatureMap, MassNormalization, PartSegmentationMap, SqueezedPartFeatures,
};
use partseg::evaluation::{LandmarkSet, LinearRegressor};
use partseg::losses::{arcface_loss, background_concentration, foreground_concentration, ArcFaceConfig, ConvTapNet, LayerWeights, TAP_NAMES};
use partseg::networks::{NetworkConfig, PartSegModel};
use partseg::pipeline::{exchange_forward, Objective};
use partseg::tps::{make_pair, sample_tps, warp, TpsConfig, TpsParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn host(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, b: usize, k: usize, h: usize, w: usize) -> PartSegmentationMap {
    let logits = Tensor::from_vec(normal(rng, b * k * h * w), (b, k, h, w), &Device::Cpu).unwrap();
    normalize_channels(&logits).unwrap()
}

fn random_appearance(rng: &mut ChaCha8Rng, b: usize, l: usize, h: usize, w: usize) -> (Vec<f64>, AppearanceFeatureMap) {
    let a = normal(rng, b * l * h * w);
    let t = Tensor::from_vec(a.clone(), (b, l, h, w), &Device::Cpu).unwrap();
    (a, AppearanceFeatureMap::try_from(t).unwrap())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scalar(t: Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn channels_sum_to_one(seed in any::<u64>(), k in 2usize..7, h in 2usize..9, w in 2usize..9, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = normal(&mut rng, k * h * w).into_iter().map(|v| v * scale).collect();
        let s = normalize_channels(&Tensor::from_vec(logits, (1, k, h, w), &Device::Cpu).unwrap()).unwrap();
        let sums = host(&s.tensor().sum(1).unwrap());
        prop_assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn squeeze_and_expand_are_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, l, h, w) = (4, 3, 5, 6);
        let s = random_map(&mut rng, 1, k, h, w);
        let (xa, x) = random_appearance(&mut rng, 1, l, h, w);
        let (ya, y) = random_appearance(&mut rng, 1, l, h, w);
        let mix: Vec<f64> = xa.iter().zip(&ya).map(|(a, b)| alpha * a + beta * b).collect();
        let mixed = AppearanceFeatureMap::try_from(Tensor::from_vec(mix, (1, l, h, w), &Device::Cpu).unwrap()).unwrap();
        let lhs = host(squeeze(&s, &mixed).unwrap().tensor());
        let fx = host(squeeze(&s, &x).unwrap().tensor());
        let fy = host(squeeze(&s, &y).unwrap().tensor());
        let rhs: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| alpha * a + beta * b).collect();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-6);

        let f1 = normal(&mut rng, k * l);
        let f2 = normal(&mut rng, k * l);
        let feats = |v: &[f64]| SqueezedPartFeatures::try_from(Tensor::from_vec(v.to_vec(), (1, k, l), &Device::Cpu).unwrap()).unwrap();
        let combo: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = host(expand(&feats(&combo), &s).unwrap().tensor());
        let e1 = host(expand(&feats(&f1), &s).unwrap().tensor());
        let e2 = host(expand(&feats(&f2), &s).unwrap().tensor());
        let rhs: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| alpha * a + beta * b).collect();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-6);
    }

    #[test]
    fn squeezed_rows_lie_in_the_pixel_envelope(seed in any::<u64>(), k in 2usize..6, l in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4, 5);
        let s = random_map(&mut rng, 1, k, h, w);
        let (a, am) = random_appearance(&mut rng, 1, l, h, w);
        let f = host(squeeze(&s, &am).unwrap().tensor());
        for li in 0..l {
            let px = &a[li * h * w..(li + 1) * h * w];
            let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for ki in 0..k {
                let v = f[ki * l + li];
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn one_hot_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, l, h, w) = (3, 4, 4, 4);
        // every channel owns at least one pixel so no row is empty
        let mut labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        for (c, label) in labels.iter_mut().take(k).enumerate() {
            *label = c;
        }
        let mut probs = vec![0.0; k * h * w];
        for (p, &c) in labels.iter().enumerate() {
            probs[c * h * w + p] = 1.0;
        }
        let s = PartSegmentationMap::from_probs(Tensor::from_vec(probs, (1, k, h, w), &Device::Cpu).unwrap()).unwrap();
        let f = SqueezedPartFeatures::try_from(Tensor::from_vec(normal(&mut rng, k * l), (1, k, l), &Device::Cpu).unwrap()).unwrap();
        let rendered = AppearanceFeatureMap::try_from(expand(&f, &s).unwrap().into_tensor()).unwrap();
        let back = host(squeeze(&s, &rendered).unwrap().tensor());
        prop_assert!(max_diff(&back, &host(f.tensor())) < 1e-5);
    }

    #[test]
    fn foreground_concentration_is_translation_covariant(seed in any::<u64>(), du in 0usize..3, dv in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (9, 9);
        // a 4x4 pattern placed at two offsets; background takes the rest
        let pattern: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 0.9).collect();
        let place = |ou: usize, ov: usize| {
            let mut fg = vec![0.0; h * w];
            for y in 0..4 {
                for x in 0..4 {
                    fg[(y + ov) * w + x + ou] = pattern[y * 4 + x];
                }
            }
            let bg: Vec<f64> = fg.iter().map(|v| 1.0 - v).collect();
            let data = [bg, fg].concat();
            PartSegmentationMap::from_probs(Tensor::from_vec(data, (1, 2, h, w), &Device::Cpu).unwrap()).unwrap()
        };
        for mode in [MassNormalization::Capped, MassNormalization::Sum] {
            let a = scalar(foreground_concentration(&place(1, 1), mode).unwrap());
            let b = scalar(foreground_concentration(&place(1 + du, 1 + dv), mode).unwrap());
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn concentration_terms_ignore_the_other_channels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, h, w) = (3, 6, 6);
        let base = host(random_map(&mut rng, 1, k, h, w).tensor());
        let noise = normal(&mut rng, h * w);
        let mut bg_changed = base.clone();
        bg_changed[..h * w].copy_from_slice(&noise);
        let mut fg_changed = base.clone();
        fg_changed[h * w..].iter_mut().zip(normal(&mut rng, (k - 1) * h * w)).for_each(|(v, n)| *v = n);
        let map = |v: Vec<f64>| PartSegmentationMap::try_from(Tensor::from_vec(v, (1, k, h, w), &Device::Cpu).unwrap()).unwrap();
        let mode = MassNormalization::Capped;
        let fg = |v: Vec<f64>| scalar(foreground_concentration(&map(v), mode).unwrap());
        let bg = |v: Vec<f64>| scalar(background_concentration(&map(v), mode).unwrap());
        prop_assert_eq!(fg(base.clone()), fg(bg_changed));
        prop_assert_eq!(bg(base), bg(fg_changed));
    }

    #[test]
    fn arcface_is_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, l) = (4, 5);
        let f = normal(&mut rng, (k + 1) * l);
        let w = normal(&mut rng, k * l);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut pf = f[..l].to_vec();
        let mut pw = Vec::new();
        for &p in &perm {
            pf.extend_from_slice(&f[(p + 1) * l..(p + 2) * l]);
            pw.extend_from_slice(&w[p * l..(p + 1) * l]);
        }
        let loss = |f: Vec<f64>, w: Vec<f64>| {
            let f = SqueezedPartFeatures::try_from(Tensor::from_vec(f, (1, k + 1, l), &Device::Cpu).unwrap()).unwrap();
            let w = Tensor::from_vec(w, (k, l), &Device::Cpu).unwrap();
            scalar(arcface_loss(&f, &w, &ArcFaceConfig::default()).unwrap())
        };
        prop_assert!((loss(f, w) - loss(pf, pw)).abs() < 1e-12);
    }

    #[test]
    fn translation_keeps_constant_images(dx in -0.6f64..0.6, dy in -0.6f64..0.6, value in 0.0f32..1.0) {
        let image = Array3::from_elem((3, 12, 10), value);
        let out = warp(image.view(), &TpsParams::translation(10, dx, dy)).unwrap();
        prop_assert!(out.iter().all(|v| (v - value).abs() < 1e-6));
    }

    #[test]
    fn regressor_ignores_sample_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets = |rng: &mut ChaCha8Rng, n: usize, m: usize| -> Vec<LandmarkSet> {
            (0..n).map(|_| LandmarkSet::new((0..m).map(|_| [rng.random(), rng.random()]).collect(), vec![true; m]).unwrap()).collect()
        };
        let x = sets(&mut rng, 30, 3);
        let y = sets(&mut rng, 30, 2);
        let mut order: Vec<usize> = (0..30).collect();
        order.reverse();
        let a = LinearRegressor::fit(&x, &y).unwrap();
        let b = LinearRegressor::fit(&order.iter().map(|&i| x[i].clone()).collect::<Vec<_>>(), &order.iter().map(|&i| y[i].clone()).collect::<Vec<_>>()).unwrap();
        let probe = &sets(&mut rng, 1, 3)[0];
        let (pa, pb) = (a.predict(probe).unwrap(), b.predict(probe).unwrap());
        for (p, q) in pa.points.iter().zip(&pb.points) {
            prop_assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn regressor_recovers_an_affine_map_and_not_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<LandmarkSet> = (0..200)
        .map(|_| LandmarkSet::new((0..3).map(|_| [rng.random(), rng.random()]).collect(), vec![true; 3]).unwrap())
        .collect();
    let affine = |s: &LandmarkSet| {
        let p = &s.points;
        LandmarkSet::new(
            vec![[0.5 * p[0][0] + 0.2 * p[1][1] + 0.1, 0.3 * p[2][0] - 0.4 * p[0][1] + 0.6]],
            vec![true],
        )
        .unwrap()
    };
    let targets: Vec<_> = inputs.iter().map(affine).collect();
    let reg = LinearRegressor::fit(&inputs[..150], &targets[..150]).unwrap();
    for (x, y) in inputs[150..].iter().zip(&targets[150..]) {
        let p = reg.predict(x).unwrap();
        assert!((p.points[0][0] - y.points[0][0]).abs() < 1e-9);
        assert!((p.points[0][1] - y.points[0][1]).abs() < 1e-9);
    }

    // targets independent of the inputs: held-out predictions stay near the mean
    let noise: Vec<_> = (0..200).map(|_| LandmarkSet::new(vec![[rng.random(), rng.random()]], vec![true]).unwrap()).collect();
    let reg = LinearRegressor::fit(&inputs[..150], &noise[..150]).unwrap();
    let spread: f64 = inputs[150..]
        .iter()
        .map(|x| {
            let p = reg.predict(x).unwrap().points[0];
            (p[0] - 0.5).abs().max((p[1] - 0.5).abs())
        })
        .fold(0.0, f64::max);
    assert!(spread < 0.25, "noise fit strays {spread} from the mean");
}

#[test]
fn tps_sampling_is_seeded() {
    let cfg = TpsConfig::default();
    let a = sample_tps(&mut ChaCha8Rng::seed_from_u64(8), &cfg);
    let b = sample_tps(&mut ChaCha8Rng::seed_from_u64(8), &cfg);
    assert_eq!(a, b);
    let image = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c * 7 + y * 3 + x) % 11) as f32 / 11.0);
    let p = make_pair(image.view(), &mut ChaCha8Rng::seed_from_u64(1), &TpsConfig::identity()).unwrap();
    assert_eq!(p.x1, p.x2);
}

#[test]
fn exchange_is_symmetric_in_the_pair() {
    let dev = Device::Cpu;
    let model = PartSegModel::new(&NetworkConfig::compact(4), 3, 32, DType::F64, &dev).unwrap();
    model.init_all(2).unwrap();
    let extractor = ConvTapNet::random(&[4, 4, 4, 4, 4], 1, DType::F64, &dev).unwrap();
    let weights = LayerWeights::new(TAP_NAMES.len());
    let objective = Objective {
        weights: partseg::losses::LossWeights::new(1.5, 1.5, 0.5, 1.0),
        arcface: ArcFaceConfig::default(),
        mass_normalization: MassNormalization::Capped,
    };
    let x1 = Tensor::rand(0f64, 1.0, (2, 3, 32, 32), &dev).unwrap();
    let x2 = Tensor::rand(0f64, 1.0, (2, 3, 32, 32), &dev).unwrap();
    for train in [false, true] {
        let a = exchange_forward(&model, &extractor, &weights, &objective, &x1, &x2, train).unwrap().report;
        let b = exchange_forward(&model, &extractor, &weights, &objective, &x2, &x1, train).unwrap().report;
        for (p, q) in [(a.rec, b.rec), (a.cls, b.cls), (a.fg, b.fg), (a.bg, b.bg), (a.total, b.total)] {
            assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0), "{p} vs {q} (train={train})");
        }
    }
}
