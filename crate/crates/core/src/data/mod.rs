//! Dataset ingestion and object-crop preprocessing.
//!
//! Every dataset is reduced to a list of entries (an image path, a square
//! crop box and annotations in source pixel coordinates). Samples are decoded
//! lazily: the crop is resized to `N x N` and annotations are mapped into
//! `[0, 1]` crop coordinates, where `(0, 0)` is the top-left corner of the
//! crop and `(1, 1)` its bottom-right corner.

mod readers;
pub mod toy;

pub use readers::read_index_png;
pub use toy::{generate_toy, read_manifest, render_toy, ToyManifest, ToyRecord, ToySample, ToySpec};

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::evaluation::LandmarkSet;

/// One preprocessed example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[3, N, N]` in `[0, 1]`.
    pub image: Array3<f32>,
    pub landmarks: Option<LandmarkSet>,
    /// Object mask at crop resolution.
    pub mask: Option<Array2<bool>>,
    /// Ground-truth part labels where the dataset has them (toy only).
    pub part_labels: Option<Array2<u8>>,
    /// Object box `[x, y, w, h]` in crop coordinates.
    pub bbox: Option<[f64; 4]>,
}

/// An axis-aligned square region of a source image, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: i64,
    pub y0: i64,
    pub side: u32,
}

impl CropBox {
    /// The smallest square centered on the box `[x, y, w, h]` after padding
    /// each side by `pad` times the box size.
    pub fn square_around(bbox: [f64; 4], pad: f64) -> Self {
        let [x, y, w, h] = bbox;
        let (cx, cy) = (x + w / 2.0, y + h / 2.0);
        let side = (w.max(h) * (1.0 + 2.0 * pad)).round().max(1.0);
        Self { x0: (cx - side / 2.0).round() as i64, y0: (cy - side / 2.0).round() as i64, side: side as u32 }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { x0: 0, y0: 0, side: width.max(height) }
    }

    /// Source pixel coordinates to crop coordinates in `[0, 1]`.
    pub fn to_crop(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.side as f64;
        [(p[0] - self.x0 as f64) / s, (p[1] - self.y0 as f64) / s]
    }

    pub fn from_crop(&self, q: [f64; 2]) -> [f64; 2] {
        let s = self.side as f64;
        [q[0] * s + self.x0 as f64, q[1] * s + self.y0 as f64]
    }

    pub fn box_to_crop(&self, bbox: [f64; 4]) -> [f64; 4] {
        let [x, y] = self.to_crop([bbox[0], bbox[1]]);
        let s = self.side as f64;
        [x, y, bbox[2] / s, bbox[3] / s]
    }

    /// Crop area as a fraction of the source image area.
    pub fn area_fraction(bbox: [f64; 4], width: u32, height: u32) -> f64 {
        bbox[2] * bbox[3] / (width as f64 * height as f64)
    }
}

fn paste_region<P: image::Pixel>(
    src: &image::ImageBuffer<P, Vec<P::Subpixel>>,
    crop: CropBox,
) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
    let mut canvas = image::ImageBuffer::<P, Vec<P::Subpixel>>::new(crop.side, crop.side);
    imageops::replace(&mut canvas, src, -crop.x0, -crop.y0);
    canvas
}

/// Crops `img` (zero outside the image) and resizes to `n x n`.
pub fn crop_resize_rgb(img: &RgbImage, crop: CropBox, n: usize) -> Array3<f32> {
    let patch = paste_region(img, crop);
    let patch = if patch.width() as usize == n { patch } else { imageops::resize(&patch, n as u32, n as u32, FilterType::Triangle) };
    Array3::from_shape_fn((3, n, n), |(c, y, x)| patch.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
}

/// Crops a label image with nearest-neighbour resampling.
pub fn crop_resize_labels(img: &GrayImage, crop: CropBox, n: usize) -> Array2<u8> {
    let patch = paste_region(img, crop);
    let patch = if patch.width() as usize == n { patch } else { imageops::resize(&patch, n as u32, n as u32, FilterType::Nearest) };
    Array2::from_shape_fn((n, n), |(y, x)| patch.get_pixel(x as u32, y as u32)[0])
}

#[derive(Debug, Clone)]
enum MaskSource {
    None,
    /// Part label image; the object is every nonzero label.
    Labels(PathBuf),
    /// Index-coded instance image and the instance index of the object.
    Instance(PathBuf, u8),
}

#[derive(Debug, Clone)]
struct Entry {
    id: String,
    image: PathBuf,
    crop: CropBox,
    landmarks: Option<Vec<Option<[f64; 2]>>>,
    bbox: Option<[f64; 4]>,
    mask: MaskSource,
}

/// A lazily decoded dataset in deterministic order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    entries: Vec<Entry>,
    /// Entries dropped while indexing (filters, missing files).
    pub filtered: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.entries[i].id
    }

    /// Decodes entry `i`.
    pub fn load(&self, i: usize) -> Result<Sample> {
        let e = &self.entries[i];
        let n = self.spec.image_size;
        let img = image::open(&e.image)?.to_rgb8();
        let image = crop_resize_rgb(&img, e.crop, n);
        let landmarks = e
            .landmarks
            .as_ref()
            .map(|pts| LandmarkSet::from_options(pts.iter().map(|p| p.map(|p| e.crop.to_crop(p)))))
            .transpose()?;
        let (mask, part_labels) = match &e.mask {
            MaskSource::None => (None, None),
            MaskSource::Labels(path) => {
                let labels = crop_resize_labels(&image::open(path)?.to_luma8(), e.crop, n);
                (Some(labels.mapv(|l| l > 0)), Some(labels))
            }
            MaskSource::Instance(path, index) => {
                let (w, h, data) = read_index_png(path)?;
                let gray = GrayImage::from_raw(w, h, data)
                    .ok_or_else(|| Error::Integrity { path: path.clone(), reason: "truncated label image".into() })?;
                let labels = crop_resize_labels(&gray, e.crop, n);
                (Some(labels.mapv(|l| l == *index)), None)
            }
        };
        Ok(Sample { id: e.id.clone(), image, landmarks, mask, part_labels, bbox: e.bbox.map(|b| e.crop.box_to_crop(b)) })
    }

    /// Decodes every entry in order, skipping unreadable images; returns the
    /// samples and the number skipped.
    pub fn load_all(&self) -> (Vec<Sample>, usize) {
        let mut out = Vec::with_capacity(self.len());
        let mut skipped = 0;
        for i in 0..self.len() {
            match self.load(i) {
                Ok(s) => out.push(s),
                Err(e) => {
                    log::warn!("skipping {}: {e}", self.id(i));
                    skipped += 1;
                }
            }
        }
        (out, skipped)
    }

    /// Source-space crop box of entry `i`.
    pub fn crop(&self, i: usize) -> CropBox {
        self.entries[i].crop
    }
}

/// Indexes the dataset described by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if !spec.root.is_dir() {
        return Err(Error::DatasetMissing(spec.root.clone()));
    }
    let (entries, filtered) = match spec.kind {
        DatasetKind::Toy => toy_entries(spec)?,
        DatasetKind::CelebaWild => readers::celeba(spec)?,
        DatasetKind::AflwUnaligned => readers::aflw(spec)?,
        DatasetKind::CubCategory => readers::cub(spec)?,
        DatasetKind::VocCategory(c) => readers::voc(spec, c)?,
    };
    Ok(Dataset { spec: spec.clone(), entries, filtered })
}

/// Fraction of toy samples held out for testing.
pub const TOY_TEST_FRACTION: f64 = 0.2;

/// The toy split: a seeded permutation of all indices, first 80% train.
pub fn toy_split(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7e57));
    let n_test = (count as f64 * TOY_TEST_FRACTION).round() as usize;
    let mut test = order.split_off(count - n_test);
    order.sort_unstable();
    test.sort_unstable();
    (order, test)
}

fn toy_entries(spec: &DatasetSpec) -> Result<(Vec<Entry>, usize)> {
    let manifest = read_manifest(&spec.root)?;
    let (train, test) = toy_split(manifest.count, manifest.spec.seed);
    let keep = match spec.split {
        Split::Train => train,
        Split::Test => test,
    };
    let canvas = manifest.spec.canvas as u32;
    let entries = keep
        .into_iter()
        .map(|i| {
            let r = &manifest.samples[i];
            let scale = canvas as f64;
            Entry {
                id: r.id.clone(),
                image: spec.root.join(&r.image),
                crop: CropBox::full(canvas, canvas),
                landmarks: Some(r.landmarks.iter().map(|p| p.map(|[x, y]| [x * scale, y * scale])).collect()),
                bbox: None,
                mask: MaskSource::Labels(spec.root.join(&r.mask)),
            }
        })
        .collect();
    Ok((entries, 0))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingAnnotation(path.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_round_trip_is_exact() {
        let crop = CropBox::square_around([37.0, 12.5, 80.0, 60.0], 0.1);
        for p in [[40.0, 20.0], [0.0, 0.0], [123.25, 77.5]] {
            let back = crop.from_crop(crop.to_crop(p));
            assert!((back[0] - p[0]).abs() < 0.5 && (back[1] - p[1]).abs() < 0.5);
            assert!((back[0] - p[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn square_crop_pads_and_centers() {
        let crop = CropBox::square_around([10.0, 20.0, 100.0, 50.0], 0.1);
        assert_eq!(crop.side, 120);
        assert_eq!((crop.x0, crop.y0), (0, -15));
    }

    #[test]
    fn crop_outside_the_image_is_black() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([255, 255, 255]));
        let a = crop_resize_rgb(&img, CropBox { x0: -4, y0: 0, side: 8 }, 8);
        assert_eq!(a[(0, 0, 0)], 0.0);
        assert_eq!(a[(0, 0, 5)], 1.0);
    }

    #[test]
    fn toy_split_is_a_seeded_partition() {
        let (train, test) = toy_split(50, 3);
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 10);
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(toy_split(50, 3), (train, test));
    }
}
