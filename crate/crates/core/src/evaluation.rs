//! Proxy evaluation: landmark regression from part centers and
//! part-aggregated segmentation overlap.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::bottleneck::{part_centers, MassNormalization, PartSegmentationMap};
use crate::error::{Error, Result};
use crate::tps::{SamplingGrid, TpsParams};

/// Points in `[0, 1]` image coordinates with a validity flag each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != valid.len() {
            return Err(Error::Shape(format!("{} points but {} validity flags", points.len(), valid.len())));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("landmark coordinates must be finite".into()));
        }
        Ok(Self { points, valid })
    }

    /// Missing points become invalid entries at the origin.
    pub fn from_options(points: impl IntoIterator<Item = Option<[f64; 2]>>) -> Result<Self> {
        let (points, valid) = points.into_iter().map(|p| (p.unwrap_or([0.0, 0.0]), p.is_some())).unzip();
        Self::new(points, valid)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }
}

/// Foreground part centers of every image, scaled by `(W - 1, H - 1)` into
/// `[0, 1]`. Parts without mass are marked invalid.
pub fn centers_to_landmarks(s: &PartSegmentationMap) -> Result<Vec<LandmarkSet>> {
    let (_, h, w) = s.dims3();
    let centers = part_centers(s, MassNormalization::Capped)?.to_host()?;
    let sx = (w.max(2) - 1) as f64;
    let sy = (h.max(2) - 1) as f64;
    centers
        .into_iter()
        .map(|per_image| {
            LandmarkSet::from_options(per_image.into_iter().skip(1).map(|c| c.map(|(u, v)| [u / sx, v / sy])))
        })
        .collect()
}

/// Least-squares map from `K` part centers to `M` landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub parts: usize,
    pub landmarks: usize,
    /// `[2M][2K + 1]`; the last column is the bias. Output order is
    /// `x_0, y_0, x_1, ...`.
    pub weights: Vec<Vec<f64>>,
    /// Training-set mean of each part center, substituted for invalid ones.
    pub fill: Vec<[f64; 2]>,
    /// Whether any landmark's design matrix lacked full column rank.
    pub rank_deficient: bool,
}

impl LinearRegressor {
    /// Ordinary least squares with a bias column, solved through the
    /// pseudo-inverse. Each landmark is fit on the samples where it is
    /// annotated.
    pub fn fit(pred: &[LandmarkSet], gt: &[LandmarkSet]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
        }
        let parts = pred.first().map_or(0, |p| p.len());
        let landmarks = gt.first().map_or(0, |g| g.len());
        if parts == 0 || landmarks == 0 {
            return Err(Error::InvalidInput("regression needs at least one part and one landmark".into()));
        }
        if pred.iter().any(|p| p.len() != parts) || gt.iter().any(|g| g.len() != landmarks) {
            return Err(Error::Shape("inconsistent landmark counts across samples".into()));
        }
        let cols = 2 * parts + 1;
        if pred.len() < cols {
            return Err(Error::InvalidInput(format!(
                "fitting {parts} parts needs at least {cols} samples, got {}",
                pred.len()
            )));
        }
        let mut fill = vec![[0.0; 2]; parts];
        for (k, f) in fill.iter_mut().enumerate() {
            let valid: Vec<_> = pred.iter().filter(|p| p.valid[k]).map(|p| p.points[k]).collect();
            if !valid.is_empty() {
                let n = valid.len() as f64;
                *f = [valid.iter().map(|p| p[0]).sum::<f64>() / n, valid.iter().map(|p| p[1]).sum::<f64>() / n];
            } else {
                *f = [0.5, 0.5];
            }
        }
        let mut reg = Self { parts, landmarks, weights: vec![vec![0.0; cols]; 2 * landmarks], fill, rank_deficient: false };
        let design: Vec<Vec<f64>> = pred.iter().map(|p| reg.design(p)).collect();
        for m in 0..landmarks {
            let rows: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].valid[m]).collect();
            if rows.is_empty() {
                log::warn!("landmark {m} is never annotated; predicting the origin");
                continue;
            }
            let x = DMatrix::from_fn(rows.len(), cols, |r, c| design[rows[r]][c]);
            let y = DMatrix::from_fn(rows.len(), 2, |r, c| gt[rows[r]].points[m][c]);
            let svd = x.svd(true, true);
            let tol = f64::EPSILON * rows.len().max(cols) as f64 * svd.singular_values.max();
            if svd.rank(tol) < cols {
                reg.rank_deficient = true;
            }
            let pinv = svd.pseudo_inverse(tol).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let beta = pinv * y;
            for c in 0..cols {
                reg.weights[2 * m][c] = beta[(c, 0)];
                reg.weights[2 * m + 1][c] = beta[(c, 1)];
            }
        }
        if reg.rank_deficient {
            log::warn!("landmark regression design is rank deficient; using the minimum-norm solution");
        }
        Ok(reg)
    }

    fn design(&self, p: &LandmarkSet) -> Vec<f64> {
        let mut row = Vec::with_capacity(2 * self.parts + 1);
        for k in 0..self.parts {
            let c = if p.valid[k] { p.points[k] } else { self.fill[k] };
            row.extend(c);
        }
        row.push(1.0);
        row
    }

    pub fn predict(&self, p: &LandmarkSet) -> Result<LandmarkSet> {
        if p.len() != self.parts {
            return Err(Error::Shape(format!("regressor expects {} parts, got {}", self.parts, p.len())));
        }
        let row = self.design(p);
        let dot = |w: &[f64]| w.iter().zip(&row).map(|(a, b)| a * b).sum::<f64>();
        let points = (0..self.landmarks)
            .map(|m| [dot(&self.weights[2 * m]), dot(&self.weights[2 * m + 1])])
            .collect();
        LandmarkSet::new(points, vec![true; self.landmarks])
    }
}

/// What a landmark error is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Normalizer {
    /// One length for both axes, e.g. the inter-ocular distance.
    Distance(f64),
    /// Separate lengths for x and y, e.g. the object box width and height.
    Axes([f64; 2]),
}

impl Normalizer {
    /// Distance between landmarks `a` and `b` of `gt`; `None` when either is
    /// missing.
    pub fn between(gt: &LandmarkSet, a: usize, b: usize) -> Option<Self> {
        (gt.valid.get(a) == Some(&true) && gt.valid.get(b) == Some(&true)).then(|| {
            let (p, q) = (gt.points[a], gt.points[b]);
            Self::Distance((p[0] - q[0]).hypot(p[1] - q[1]))
        })
    }

    /// Width and height of an `[x, y, w, h]` box.
    pub fn box_axes(bbox: [f64; 4]) -> Self {
        Self::Axes([bbox[2], bbox[3]])
    }

    fn degenerate(&self) -> bool {
        match *self {
            Self::Distance(d) => !(d > 0.0 && d.is_finite()),
            Self::Axes([w, h]) => !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()),
        }
    }

    fn apply(&self, d: [f64; 2]) -> f64 {
        match *self {
            Self::Distance(n) => d[0].hypot(d[1]) / n,
            Self::Axes([w, h]) => (d[0] / w).hypot(d[1] / h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkErrors {
    /// Pooled mean over every annotated landmark of every counted image, x100.
    pub mean: f64,
    /// Per image mean, x100; `None` for excluded images.
    pub per_image: Vec<Option<f64>>,
    /// Images dropped for a degenerate normalizer or no annotations.
    pub excluded: usize,
}

/// Normalized landmark error, reported x100.
pub fn landmark_error(
    pred: &[LandmarkSet],
    gt: &[LandmarkSet],
    normalizers: &[Option<Normalizer>],
) -> Result<LandmarkErrors> {
    if pred.len() != gt.len() || gt.len() != normalizers.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} targets and {} normalizers",
            pred.len(),
            gt.len(),
            normalizers.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut excluded = 0;
    let mut per_image = Vec::with_capacity(gt.len());
    for ((p, g), n) in pred.iter().zip(gt).zip(normalizers) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("{} predicted landmarks for {} targets", p.len(), g.len())));
        }
        let n = match n {
            Some(n) if !n.degenerate() => n,
            _ => {
                excluded += 1;
                per_image.push(None);
                continue;
            }
        };
        let errs: Vec<f64> = (0..g.len())
            .filter(|&m| g.valid[m])
            .map(|m| n.apply([p.points[m][0] - g.points[m][0], p.points[m][1] - g.points[m][1]]))
            .collect();
        if errs.is_empty() {
            excluded += 1;
            per_image.push(None);
            continue;
        }
        total += errs.iter().sum::<f64>();
        count += errs.len();
        per_image.push(Some(100.0 * errs.iter().sum::<f64>() / errs.len() as f64));
    }
    if count == 0 {
        return Err(Error::InvalidInput("no image has a usable normalizer and annotation".into()));
    }
    Ok(LandmarkErrors { mean: 100.0 * total / count as f64, per_image, excluded })
}

/// Bilinear resize of `[C, h, w]` maps to `[C, out_h, out_w]`, sampling at
/// pixel centers with edge clamping.
pub fn upsample_bilinear(maps: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = maps.dim();
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, ay)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, ax)) in xs.iter().enumerate() {
                let top = maps[[ch, y0, x0]] * (1.0 - ax) + maps[[ch, y0, x1]] * ax;
                let bottom = maps[[ch, y1, x0]] * (1.0 - ax) + maps[[ch, y1, x1]] * ax;
                out[[ch, oy, ox]] = top * (1.0 - ay) + bottom * ay;
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties go to the lowest index.
pub fn argmax_labels(maps: ArrayView3<f32>) -> Array2<u8> {
    let (c, h, w) = maps.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if maps[[k, y, x]] > maps[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Host copy of a segmentation map, one `[K+1, h, w]` array per image.
pub fn segmentation_to_host(s: &PartSegmentationMap) -> Result<Vec<Array3<f32>>> {
    let t = s.tensor().to_dtype(candle_core::DType::F32)?;
    let (b, c, h, w) = t.dims4()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    let all = Array3::from_shape_vec((b * c, h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((0..b)
        .map(|i| all.slice(ndarray::s![i * c..(i + 1) * c, .., ..]).to_owned())
        .collect())
}

/// `|A ∩ B| / |A ∪ B|`, zero for an empty union.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks are {:?} and {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU between the union of foreground parts and a ground-truth mask. The
/// probabilities are upsampled to the mask size before the argmax.
pub fn aggregate_iou(probs: ArrayView3<f32>, gt: &Array2<bool>) -> Result<f64> {
    let (h, w) = gt.dim();
    let labels = argmax_labels(upsample_bilinear(probs, h, w).view());
    mask_iou(&labels.mapv(|l| l != 0), gt)
}

/// Agreement of the segmentation with a known warp: the mean over
/// foreground parts of the IoU between `argmax S(warp(x))` and
/// `argmax warp(S(x))`, both at grid resolution. Pixels whose warp source
/// falls outside the image are ignored; parts absent from both maps are
/// skipped.
pub fn equivariance_iou(
    probs_of_warped: ArrayView3<f32>,
    probs: ArrayView3<f32>,
    params: &TpsParams,
) -> Result<Option<f64>> {
    if probs_of_warped.dim() != probs.dim() {
        return Err(Error::Shape(format!(
            "segmentations are {:?} and {:?}",
            probs_of_warped.dim(),
            probs.dim()
        )));
    }
    let (c, h, w) = probs.dim();
    let grid = SamplingGrid::new(params, h, w)?;
    let warped = grid.apply(probs)?;
    let a = argmax_labels(probs_of_warped);
    let b = argmax_labels(warped.view());
    let inside = grid.inside_mask();
    let mut ious = Vec::new();
    for k in 1..c as u8 {
        let (mut inter, mut union) = (0usize, 0usize);
        for ((la, lb), keep) in a.iter().zip(&b).zip(inside) {
            if !keep {
                continue;
            }
            inter += (*la == k && *lb == k) as usize;
            union += (*la == k || *lb == k) as usize;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    Ok((!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64))
}

/// One evaluated test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub error: Option<f64>,
    pub iou: Option<f64>,
}

/// Evaluation results of one checkpoint on one test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub step: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub mean_error: Option<f64>,
    pub mean_iou: Option<f64>,
    /// Test images left out of the error mean.
    pub excluded: usize,
    pub images: Vec<ImageEval>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("id,error,iou\n");
        for img in &self.images {
            out.push_str(&format!("{},{},{}\n", img.id, fmt(img.error), fmt(img.iou)));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Mean of the present values.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
