//! Trains on the toy data and prints the evaluation summary.
//!
//! usage: toy_experiment <data-dir> <out-dir> <steps> [batch] [base] [lr] [rec cls fg bg] [capped|sum]

use std::path::PathBuf;
use std::time::Instant;

use candle_core::Device;
use partseg::bottleneck::MassNormalization;
use partseg::config::{DatasetKind, Split, TrainConfig};
use partseg::data::{generate_toy, load_dataset, ToySpec};
use partseg::evaluation::{landmark_error, LandmarkSet, LinearRegressor};
use partseg::pipeline::{equivariance_score, evaluate, normalizer_for, segment_images, Trainer};
use partseg::viz::segmentation_panel;

fn main() -> partseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let out = PathBuf::from(&args[2]);
    let steps: u64 = args[3].parse().unwrap();
    let arg = |i: usize, d: f64| args.get(i).map(|s| s.parse().unwrap()).unwrap_or(d);
    if !data.join("manifest.json").exists() {
        generate_toy(&ToySpec::default(), 2000, &data)?;
    }
    let mut cfg = TrainConfig::for_dataset(DatasetKind::Toy, &data, &out);
    cfg.train.steps = Some(steps);
    cfg.train.batch_size = arg(4, 8.0) as usize;
    cfg.model.base_width = arg(5, 8.0) as usize;
    cfg.optimizer.lr = arg(6, 1e-3);
    if args.len() > 10 {
        cfg.loss.rec = arg(7, 0.0);
        cfg.loss.cls = arg(8, 0.0);
        cfg.loss.fg = arg(9, 0.0);
        cfg.loss.bg = arg(10, 0.0);
    }
    match args.get(11).map(String::as_str) {
        Some("sum") => cfg.model.mass_normalization = MassNormalization::Sum,
        Some("capped") => cfg.model.mass_normalization = MassNormalization::Capped,
        _ => {}
    }
    cfg.train.checkpoint_every = steps;
    let t = Instant::now();
    let mut trainer = Trainer::new(&cfg, &Device::Cpu)?;
    let mut windows = Vec::new();
    let mut acc = 0.0;
    for s in 1..=steps {
        let r = trainer.step()?;
        acc += r.total;
        if s % 100 == 0 {
            windows.push(acc / 100.0);
            println!("{s} window {:.4} last rec {:.4} cls {:.4} fg {:.4} bg {:.4} ({:.0}s)", acc / 100.0, r.rec, r.cls, r.fg, r.bg, t.elapsed().as_secs_f64());
            acc = 0.0;
        }
    }
    let model = &trainer.state.model;
    let train = load_dataset(&cfg.dataset.with_split(Split::Train))?;
    let test = load_dataset(&cfg.dataset.with_split(Split::Test))?;
    let report = evaluate(model, &train, &test, steps)?;
    let (samples, _) = test.load_all();
    let imgs: Vec<_> = samples.iter().take(100).map(|s| &s.image).collect();
    let eq = equivariance_score(model, &imgs, &cfg.tps, 99)?;
    let (train_samples, _) = train.load_all();
    let uniform = |n: usize| vec![LandmarkSet::new(vec![[0.5, 0.5]; 4], vec![true; 4]).unwrap(); n];
    let gt_train: Vec<_> = train_samples.iter().map(|s| s.landmarks.clone().unwrap()).collect();
    let reg = LinearRegressor::fit(&uniform(gt_train.len()), &gt_train)?;
    let preds: Vec<_> = uniform(samples.len()).iter().map(|p| reg.predict(p).unwrap()).collect();
    let gt_test: Vec<_> = samples.iter().map(|s| s.landmarks.clone().unwrap()).collect();
    let norms: Vec<_> = samples.iter().map(|s| normalizer_for(DatasetKind::Toy, s)).collect();
    println!("baseline {:.3}", landmark_error(&preds, &gt_test, &norms)?.mean);
    println!("error {:?} iou {:?} equivariance {:?} time {:.0}s", report.mean_error, report.mean_iou, eq, t.elapsed().as_secs_f64());
    println!("windows {windows:?}");
    let probs = segment_images(model, &imgs[..8])?;
    for (i, (img, p)) in imgs.iter().zip(&probs).enumerate() {
        let panel = segmentation_panel(img, p.view());
        panel.save(out.join(format!("panel{i}.png"))).unwrap();
    }
    Ok(())
}
