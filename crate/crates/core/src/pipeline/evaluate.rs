//! Running a trained model over dataset splits and scoring it.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::images_to_tensor;
use crate::config::DatasetKind;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_iou, centers_to_landmarks, equivariance_iou, landmark_error, mean_present, segmentation_to_host,
    EvalReport, ImageEval, LandmarkSet, LinearRegressor, Normalizer,
};
use crate::networks::PartSegModel;
use crate::tps::{sample_tps, warp, TpsConfig};

const EVAL_BATCH: usize = 16;

/// Per-image probabilities `[K+1, h, w]` in inference mode.
pub fn segment_images(model: &PartSegModel, images: &[&Array3<f32>]) -> Result<Vec<Array3<f32>>> {
    let dtype = model.params().dtype();
    let device = model.params().device().clone();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = images_to_tensor(chunk.iter().copied(), dtype, &device)?;
        out.extend(segmentation_to_host(&model.encode_segmentation(&x, false)?)?);
    }
    Ok(out)
}

/// Predicted part centers of images as landmark sets.
pub fn predict_centers(model: &PartSegModel, images: &[&Array3<f32>]) -> Result<Vec<LandmarkSet>> {
    let dtype = model.params().dtype();
    let device = model.params().device().clone();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = images_to_tensor(chunk.iter().copied(), dtype, &device)?;
        out.extend(centers_to_landmarks(&model.encode_segmentation(&x, false)?)?);
    }
    Ok(out)
}

/// The normalizer used for `kind`: inter-ocular distance for faces, the
/// object box per axis for birds, the distance between the first two part
/// centers for the toy data.
pub fn normalizer_for(kind: DatasetKind, sample: &Sample) -> Option<Normalizer> {
    let gt = sample.landmarks.as_ref()?;
    match kind {
        DatasetKind::CubCategory => sample.bbox.map(Normalizer::box_axes),
        _ => Normalizer::between(gt, 0, 1),
    }
}

struct Scored {
    id: String,
    centers: LandmarkSet,
    landmarks: Option<LandmarkSet>,
    normalizer: Option<Normalizer>,
    iou: Option<f64>,
}

/// Decodes a split in chunks and keeps only what scoring needs.
fn score_split(model: &PartSegModel, data: &Dataset, with_iou: bool) -> Result<(Vec<Scored>, usize)> {
    let mut out = Vec::with_capacity(data.len());
    let mut skipped = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut samples = Vec::with_capacity(chunk.len());
        for &i in chunk {
            match data.load(i) {
                Ok(s) => samples.push(s),
                Err(e) => {
                    log::warn!("skipping {}: {e}", data.id(i));
                    skipped += 1;
                }
            }
        }
        if samples.is_empty() {
            continue;
        }
        let x = images_to_tensor(samples.iter().map(|s| &s.image), model.params().dtype(), model.params().device())?;
        let parts = model.encode_segmentation(&x, false)?;
        let probs = segmentation_to_host(&parts)?;
        let centers = centers_to_landmarks(&parts)?;
        for ((s, p), c) in samples.into_iter().zip(probs).zip(centers) {
            let iou = match (&s.mask, with_iou) {
                (Some(m), true) => Some(aggregate_iou(p.view(), m)?),
                _ => None,
            };
            out.push(Scored {
                normalizer: normalizer_for(data.spec.kind, &s),
                id: s.id,
                centers: c,
                landmarks: s.landmarks,
                iou,
            });
        }
    }
    Ok((out, skipped))
}

/// Landmark regression (fit on `train`, scored on `test`) where the kind
/// has landmarks, and foreground IoU where it has masks.
pub fn evaluate(model: &PartSegModel, train: &Dataset, test: &Dataset, step: u64) -> Result<EvalReport> {
    let kind = test.spec.kind;
    if test.is_empty() {
        return Err(Error::InvalidInput("the test split is empty".into()));
    }
    let (test_rows, mut skipped) = score_split(model, test, kind.has_masks())?;
    let mut errors: Vec<Option<f64>> = vec![None; test_rows.len()];
    let mut mean_error = None;
    let mut excluded = 0;
    let mut train_samples = 0;
    if kind.has_landmarks() {
        let (train_rows, s) = score_split(model, train, false)?;
        skipped += s;
        let (pred, gt): (Vec<_>, Vec<_>) = train_rows
            .into_iter()
            .filter_map(|r| Some((r.centers, r.landmarks?)))
            .unzip();
        train_samples = pred.len();
        let reg = LinearRegressor::fit(&pred, &gt)?;
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut norms = Vec::new();
        let mut rows = Vec::new();
        for (i, r) in test_rows.iter().enumerate() {
            if let Some(g) = &r.landmarks {
                preds.push(reg.predict(&r.centers)?);
                gts.push(g.clone());
                norms.push(r.normalizer);
                rows.push(i);
            }
        }
        let e = landmark_error(&preds, &gts, &norms)?;
        for (i, v) in rows.into_iter().zip(&e.per_image) {
            errors[i] = *v;
        }
        excluded = e.excluded + test_rows.len() - gts.len();
        mean_error = Some(e.mean);
    }
    let mean_iou = if kind.has_masks() {
        mean_present(test_rows.iter().map(|r| r.iou))
    } else {
        None
    };
    if skipped > 0 {
        log::warn!("{skipped} images could not be read");
    }
    Ok(EvalReport {
        dataset: kind.to_string(),
        step,
        train_samples,
        test_samples: test_rows.len(),
        mean_error,
        mean_iou,
        excluded,
        images: test_rows
            .into_iter()
            .zip(errors)
            .map(|(r, error)| ImageEval { id: r.id, error, iou: r.iou })
            .collect(),
    })
}

/// Mean equivariance IoU over `images`, each paired with one warp drawn
/// from `tps` with a generator seeded by `seed`.
pub fn equivariance_score(
    model: &PartSegModel,
    images: &[&Array3<f32>],
    tps: &TpsConfig,
    seed: u64,
) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<_> = images.iter().map(|_| sample_tps(&mut rng, tps)).collect();
    let warped = images
        .iter()
        .zip(&params)
        .map(|(img, p)| warp(img.view(), p))
        .collect::<Result<Vec<_>>>()?;
    let plain = segment_images(model, images)?;
    let moved = segment_images(model, &warped.iter().collect::<Vec<_>>())?;
    let scores = plain
        .iter()
        .zip(&moved)
        .zip(&params)
        .map(|((a, b), p)| equivariance_iou(b.view(), a.view(), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_present(scores))
}

/// Landmark error of a predictor that ignores the image: every part center
/// sits at the grid middle, regressed onto landmarks like a real model.
/// This reduces to predicting the mean training landmarks.
pub fn constant_center_error(train: &Dataset, test: &Dataset, parts: usize) -> Result<f64> {
    let constant = || LandmarkSet::new(vec![[0.5, 0.5]; parts], vec![true; parts]);
    let gt: Vec<LandmarkSet> = (0..train.len())
        .filter_map(|i| train.load(i).ok()?.landmarks)
        .collect();
    let inputs = gt.iter().map(|_| constant()).collect::<Result<Vec<_>>>()?;
    let reg = LinearRegressor::fit(&inputs, &gt)?;
    let fixed = reg.predict(&constant()?)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut norms = Vec::new();
    for i in 0..test.len() {
        let Ok(s) = test.load(i) else { continue };
        if let Some(g) = &s.landmarks {
            norms.push(normalizer_for(test.spec.kind, &s));
            gts.push(g.clone());
            preds.push(fixed.clone());
        }
    }
    Ok(landmark_error(&preds, &gts, &norms)?.mean)
}
