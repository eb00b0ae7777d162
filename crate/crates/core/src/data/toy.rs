//! Synthetic objects made of rigid colored parts on a textured background.
//!
//! Each object has up to four parts laid out in a fixed object frame (a
//! disk body, a bar to its right, a triangle above and an ellipse below).
//! Per sample the object is rotated, scaled, translated and mildly bent by a
//! smooth spline, and the background is low-contrast sinusoidal texture.
//!
//! On disk a toy dataset is `manifest.json` plus `images/<id>.png` (RGB) and
//! `masks/<id>.png` (8-bit labels, 0 background, `p` for part `p`). The
//! manifest stores, per sample, the part centroid landmarks in `[0, 1]`
//! image coordinates (`null` when a part is absent).

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tps::{Spline, TpsParams};

pub const TOY_FORMAT: &str = "partseg-toy";
pub const TOY_MAX_PARTS: usize = 4;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub seed: u64,
    pub canvas: usize,
    pub parts: usize,
    /// Maximum object rotation in radians (uniform in `[-r, r]`).
    pub max_rotation: f64,
    pub scale_range: [f64; 2],
    /// Maximum translation in normalized coordinates.
    pub max_translation: f64,
    /// Standard deviation of the bending spline's control displacements.
    pub bend_sigma: f64,
    /// Object size relative to the canvas before the per-sample scale; at
    /// the default the object fills most of the frame, like a box crop.
    pub object_scale: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            canvas: 64,
            parts: TOY_MAX_PARTS,
            max_rotation: std::f64::consts::FRAC_PI_6,
            scale_range: [0.9, 1.1],
            max_translation: 0.1,
            bend_sigma: 0.03,
            object_scale: 1.4,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=TOY_MAX_PARTS).contains(&self.parts) {
            return Err(Error::Config(format!("toy parts must be in 1..={TOY_MAX_PARTS}, got {}", self.parts)));
        }
        if self.canvas < 8 {
            return Err(Error::Config(format!("toy canvas must be at least 8 pixels, got {}", self.canvas)));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo) || self.max_rotation < 0.0 || self.max_translation < 0.0 || self.bend_sigma < 0.0 || self.object_scale <= 0.0 {
            return Err(Error::Config("toy placement ranges must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub landmarks: Vec<Option<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub format: String,
    pub version: u32,
    pub spec: ToySpec,
    pub count: usize,
    pub samples: Vec<ToyRecord>,
}

/// One rendered toy sample.
#[derive(Debug, Clone)]
pub struct ToySample {
    /// `[3, N, N]` in `[0, 1]`.
    pub image: Array3<f32>,
    /// Part labels, 0 for background.
    pub labels: Array2<u8>,
    pub landmarks: Vec<Option<[f64; 2]>>,
}

/// Center of the object's bounding box in the object frame.
const OBJECT_CENTER: [f64; 2] = [0.16, -0.035];

/// Part index hit by an object-frame point, 1-based; earlier parts win.
fn part_at(x: f64, y: f64, parts: usize) -> u8 {
    let shapes: [&dyn Fn(f64, f64) -> bool; TOY_MAX_PARTS] = [
        &|x, y| x * x + y * y <= 0.30 * 0.30,
        &|x, y| (x - 0.46).abs() <= 0.24 && y.abs() <= 0.09,
        &|x, y| {
            // apex up at (0, -0.62), base y = -0.24 spanning x in [-0.24, 0.24]
            (-0.62..=-0.24).contains(&y) && x.abs() <= 0.24 * (y + 0.62) / 0.38
        },
        &|x, y| ((x + 0.14) / 0.24).powi(2) + ((y - 0.42) / 0.13).powi(2) <= 1.0,
    ];
    shapes.iter().take(parts).position(|f| f(x, y)).map_or(0, |i| i as u8 + 1)
}

const PART_COLORS: [[f64; 3]; TOY_MAX_PARTS] =
    [[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.2, 0.35, 0.85], [0.9, 0.8, 0.2]];

/// Renders sample `index` of the stream defined by `spec`.
pub fn render_toy(spec: &ToySpec, index: u64) -> Result<ToySample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = spec.canvas;

    let theta = rng.random_range(-1.0..=1.0) * spec.max_rotation;
    let scale = rng.random_range(spec.scale_range[0]..=spec.scale_range[1]);
    let t = [
        rng.random_range(-1.0..=1.0) * spec.max_translation,
        rng.random_range(-1.0..=1.0) * spec.max_translation,
    ];
    let mut bend = TpsParams::identity(4);
    for d in bend.displacements.iter_mut() {
        *d = [spec.bend_sigma * gaussian(&mut rng), spec.bend_sigma * gaussian(&mut rng)];
    }
    let spline = Spline::fit(&bend)?;
    let colors: Vec<[f64; 3]> = PART_COLORS
        .iter()
        .map(|c| c.map(|v| (v + rng.random_range(-0.08..=0.08)).clamp(0.0, 1.0)))
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..=0.55));
    let waves: Vec<(f64, f64, f64, usize)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..6.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0..3usize),
            )
        })
        .collect();

    let (sin, cos) = theta.sin_cos();
    let mut image = Array3::<f32>::zeros((3, n, n));
    let mut labels = Array2::<u8>::zeros((n, n));
    let mut sums = vec![[0.0f64; 3]; spec.parts];
    for i in 0..n {
        for j in 0..n {
            let u = 2.0 * j as f64 / (n - 1) as f64 - 1.0;
            let v = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            let (bu, bv) = spline.map(u, v);
            let (dx, dy) = (bu - t[0], bv - t[1]);
            let size = scale * spec.object_scale;
            let ox = (cos * dx + sin * dy) / size + OBJECT_CENTER[0];
            let oy = (-sin * dx + cos * dy) / size + OBJECT_CENTER[1];
            let label = part_at(ox, oy, spec.parts);
            labels[(i, j)] = label;
            let rgb = if label > 0 {
                let p = label as usize - 1;
                sums[p][0] += (j as f64 + 0.5) / n as f64;
                sums[p][1] += (i as f64 + 0.5) / n as f64;
                sums[p][2] += 1.0;
                // gentle shading across the object
                colors[p].map(|c| c * (0.92 + 0.08 * ox))
            } else {
                let mut px = base;
                for &(freq, phase, orient, ch) in &waves {
                    let s = (freq * (u * orient.cos() + v * orient.sin()) * std::f64::consts::PI + phase).sin();
                    px[ch] += 0.05 * s;
                }
                px
            };
            for (c, value) in rgb.iter().enumerate() {
                let noise = rng.random_range(-0.02..=0.02);
                image[(c, i, j)] = (value + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let landmarks = sums.iter().map(|s| (s[2] > 0.0).then(|| [s[0] / s[2], s[1] / s[2]])).collect();
    Ok(ToySample { image, labels, landmarks })
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

pub fn array_to_rgb(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[(c, y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn write_encoded(path: &Path, write: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    write(&mut buf)?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// Writes an RGB image as PNG, surfacing IO failures with the path.
pub fn save_rgb(image: &RgbImage, path: &Path) -> Result<()> {
    write_encoded(path, |buf| image.write_to(buf, ImageFormat::Png))
}

pub fn save_gray(image: &GrayImage, path: &Path) -> Result<()> {
    write_encoded(path, |buf| image.write_to(buf, ImageFormat::Png))
}

/// Renders `count` samples into `dir` and writes the manifest.
pub fn generate_toy(spec: &ToySpec, count: usize, dir: &Path) -> Result<ToyManifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let s = render_toy(spec, index as u64)?;
        let id = format!("{index:05}");
        let image = PathBuf::from("images").join(format!("{id}.png"));
        let mask = PathBuf::from("masks").join(format!("{id}.png"));
        save_rgb(&array_to_rgb(&s.image), &dir.join(&image))?;
        let (h, w) = s.labels.dim();
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([s.labels[(y as usize, x as usize)]]));
        save_gray(&gray, &dir.join(&mask))?;
        samples.push(ToyRecord { id, image, mask, landmarks: s.landmarks });
    }
    let manifest = ToyManifest { format: TOY_FORMAT.into(), version: 1, spec: spec.clone(), count, samples };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ToyManifest> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::MissingAnnotation(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ToyManifest = serde_json::from_str(&text)?;
    if manifest.format != TOY_FORMAT {
        return Err(Error::Config(format!("{} is not a toy manifest", path.display())));
    }
    Ok(manifest)
}
