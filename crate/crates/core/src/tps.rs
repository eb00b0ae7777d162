//! Random thin-plate-spline warps used to build training pairs.
//!
//! All deformation math happens in normalized coordinates where the image
//! spans `[-1, 1]` on both axes (corner pixels sit exactly on the bounds).
//! Warping is backward: every output pixel looks up the source image at its
//! deformed location with bilinear interpolation and border replication.

use nalgebra::DMatrix;
use ndarray::{Array3, ArrayView3};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal regularizer applied when the spline system is singular.
pub const KERNEL_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsConfig {
    /// Control points per side of the regular grid.
    pub grid: usize,
    pub cp_sigma: f64,
    pub extra_sigma: f64,
    pub extra_prob: f64,
    pub translate_sigma: f64,
    pub rotate_sigma: f64,
    pub scale_sigma: f64,
}

impl Default for TpsConfig {
    fn default() -> Self {
        Self {
            grid: 10,
            cp_sigma: 0.001,
            extra_sigma: 0.005,
            extra_prob: 0.5,
            translate_sigma: 0.1,
            rotate_sigma: 0.0,
            scale_sigma: 0.0,
        }
    }
}

impl TpsConfig {
    /// A configuration that always produces the identity warp.
    pub fn identity() -> Self {
        Self {
            cp_sigma: 0.0,
            extra_sigma: 0.0,
            extra_prob: 0.0,
            translate_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("cp_sigma", self.cp_sigma),
            ("extra_sigma", self.extra_sigma),
            ("translate_sigma", self.translate_sigma),
            ("rotate_sigma", self.rotate_sigma),
            ("scale_sigma", self.scale_sigma),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "tps.{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.extra_prob) {
            return Err(Error::Config(format!(
                "tps.extra_prob must lie in [0, 1], got {}",
                self.extra_prob
            )));
        }
        if self.grid < 2 {
            return Err(Error::Config(format!(
                "tps.grid must be at least 2, got {}",
                self.grid
            )));
        }
        Ok(())
    }
}

/// One sampled warp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsParams {
    pub grid: usize,
    /// Displacement of each control point, row-major over the grid.
    pub displacements: Vec<[f64; 2]>,
    pub translation: [f64; 2],
    pub rotation: f64,
    pub scale: f64,
}

impl TpsParams {
    pub fn identity(grid: usize) -> Self {
        Self {
            grid,
            displacements: vec![[0.0; 2]; grid * grid],
            translation: [0.0; 2],
            rotation: 0.0,
            scale: 1.0,
        }
    }

    pub fn translation(grid: usize, dx: f64, dy: f64) -> Self {
        Self {
            translation: [dx, dy],
            ..Self::identity(grid)
        }
    }

    /// Source control points on the regular `grid x grid` lattice.
    pub fn control_points(&self) -> Vec<[f64; 2]> {
        let n = self.grid;
        let step = 2.0 / (n - 1) as f64;
        (0..n)
            .flat_map(|r| (0..n).map(move |c| [-1.0 + c as f64 * step, -1.0 + r as f64 * step]))
            .collect()
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative")
}

/// Draws warp parameters from the configured Gaussians.
pub fn sample_tps<R: Rng + ?Sized>(rng: &mut R, cfg: &TpsConfig) -> TpsParams {
    let cp = normal(cfg.cp_sigma);
    let extra = normal(cfg.extra_sigma);
    let n = cfg.grid * cfg.grid;
    let mut displacements = Vec::with_capacity(n);
    for _ in 0..n {
        let mut d = [cp.sample(rng), cp.sample(rng)];
        if rng.random_bool(cfg.extra_prob) {
            d[0] += extra.sample(rng);
            d[1] += extra.sample(rng);
        }
        displacements.push(d);
    }
    let tr = normal(cfg.translate_sigma);
    let translation = [tr.sample(rng), tr.sample(rng)];
    let rotation = normal(cfg.rotate_sigma).sample(rng);
    let scale = 1.0 + normal(cfg.scale_sigma).sample(rng);
    TpsParams {
        grid: cfg.grid,
        displacements,
        translation,
        rotation,
        scale,
    }
}

fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// A fitted spline mapping output coordinates to source coordinates.
#[derive(Debug, Clone)]
pub struct Spline {
    centers: Vec<[f64; 2]>,
    /// `(n + 3) x 2`: kernel weights followed by the affine rows `[1, x, y]`.
    coeffs: DMatrix<f64>,
    translation: [f64; 2],
    rotation: f64,
    scale: f64,
}

impl Spline {
    pub fn fit(params: &TpsParams) -> Result<Self> {
        let centers = params.control_points();
        let n = centers.len();
        if params.displacements.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} control point displacements, got {}",
                params.displacements.len()
            )));
        }
        let mut system = DMatrix::<f64>::zeros(n + 3, n + 3);
        let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
        for i in 0..n {
            for j in 0..n {
                let dx = centers[i][0] - centers[j][0];
                let dy = centers[i][1] - centers[j][1];
                system[(i, j)] = kernel(dx * dx + dy * dy);
            }
            let p = [1.0, centers[i][0], centers[i][1]];
            for (a, v) in p.iter().enumerate() {
                system[(i, n + a)] = *v;
                system[(n + a, i)] = *v;
            }
            rhs[(i, 0)] = centers[i][0] + params.displacements[i][0];
            rhs[(i, 1)] = centers[i][1] + params.displacements[i][1];
        }
        let coeffs = match system.clone().lu().solve(&rhs) {
            Some(c) if c.iter().all(|v| v.is_finite()) => c,
            _ => {
                for i in 0..n {
                    system[(i, i)] += KERNEL_JITTER;
                }
                system.lu().solve(&rhs).ok_or_else(|| {
                    Error::InvalidInput("thin-plate-spline system is singular".into())
                })?
            }
        };
        Ok(Self {
            centers,
            coeffs,
            translation: params.translation,
            rotation: params.rotation,
            scale: params.scale,
        })
    }

    /// Maps a normalized output coordinate to its normalized source coordinate.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.centers.len();
        let c = &self.coeffs;
        let mut fx = c[(n, 0)] + c[(n + 1, 0)] * x + c[(n + 2, 0)] * y;
        let mut fy = c[(n, 1)] + c[(n + 1, 1)] * x + c[(n + 2, 1)] * y;
        for (i, p) in self.centers.iter().enumerate() {
            let dx = x - p[0];
            let dy = y - p[1];
            let u = kernel(dx * dx + dy * dy);
            fx += c[(i, 0)] * u;
            fy += c[(i, 1)] * u;
        }
        let (s, r) = (self.scale, self.rotation);
        let (sin, cos) = r.sin_cos();
        (
            s * (cos * fx - sin * fy) + self.translation[0],
            s * (sin * fx + cos * fy) + self.translation[1],
        )
    }
}

/// Pixel-space lookup table for one warp at a fixed output size.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// Per output pixel: the four source taps and their bilinear weights.
    taps: Vec<[(usize, f64); 4]>,
    inside: Vec<bool>,
}

impl SamplingGrid {
    pub fn new(params: &TpsParams, height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidInput(format!(
                "cannot warp a {height}x{width} image"
            )));
        }
        let spline = Spline::fit(params)?;
        let sx = (width - 1) as f64;
        let sy = (height - 1) as f64;
        let mut taps = Vec::with_capacity(height * width);
        let mut inside = Vec::with_capacity(height * width);
        for r in 0..height {
            let y = 2.0 * r as f64 / sy - 1.0;
            for c in 0..width {
                let x = 2.0 * c as f64 / sx - 1.0;
                let (qx, qy) = spline.map(x, y);
                inside.push((-1.0..=1.0).contains(&qx) && (-1.0..=1.0).contains(&qy));
                let px = ((qx + 1.0) * 0.5 * sx).clamp(0.0, sx);
                let py = ((qy + 1.0) * 0.5 * sy).clamp(0.0, sy);
                let x0 = (px.floor() as usize).min(width - 2);
                let y0 = (py.floor() as usize).min(height - 2);
                let ax = px - x0 as f64;
                let ay = py - y0 as f64;
                let idx = |yy: usize, xx: usize| yy * width + xx;
                taps.push([
                    (idx(y0, x0), (1.0 - ax) * (1.0 - ay)),
                    (idx(y0, x0 + 1), ax * (1.0 - ay)),
                    (idx(y0 + 1, x0), (1.0 - ax) * ay),
                    (idx(y0 + 1, x0 + 1), ax * ay),
                ]);
            }
        }
        Ok(Self {
            height,
            width,
            taps,
            inside,
        })
    }

    /// Fraction of output pixels whose source location lies inside the image.
    pub fn inside_fraction(&self) -> f64 {
        self.inside.iter().filter(|b| **b).count() as f64 / self.inside.len() as f64
    }

    /// Per output pixel, row-major: whether its source lies inside the image.
    pub fn inside_mask(&self) -> &[bool] {
        &self.inside
    }

    fn check<T>(&self, img: &ArrayView3<T>) -> Result<()> {
        let (_, h, w) = img.dim();
        if (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "sampling grid is {}x{} but image is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Resamples every channel of `img`.
    pub fn apply<T: Float>(&self, img: ArrayView3<T>) -> Result<Array3<T>> {
        self.check(&img)?;
        let (ch, h, w) = img.dim();
        let mut out = Array3::<T>::zeros((ch, h, w));
        for c in 0..ch {
            let src = img.index_axis(ndarray::Axis(0), c);
            let src = src.as_standard_layout();
            let src = src.as_slice().expect("standard layout");
            let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
            for (o, taps) in dst.iter_mut().zip(&self.taps) {
                let mut acc = T::zero();
                for (i, wgt) in taps {
                    acc = acc + src[*i] * T::from(*wgt).unwrap();
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back onto
    /// the source pixels.
    pub fn apply_adjoint<T: Float>(&self, grad_out: ArrayView3<T>) -> Result<Array3<T>> {
        self.check(&grad_out)?;
        let (ch, h, w) = grad_out.dim();
        let mut out = Array3::<T>::zeros((ch, h, w));
        for c in 0..ch {
            let g = grad_out.index_axis(ndarray::Axis(0), c);
            let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
            let dst = dst.as_slice_mut().expect("freshly allocated");
            for (go, taps) in g.iter().zip(&self.taps) {
                for (i, wgt) in taps {
                    dst[*i] = dst[*i] + *go * T::from(*wgt).unwrap();
                }
            }
        }
        Ok(out)
    }
}

/// Backward-warps a `[C, H, W]` image.
pub fn warp<T: Float>(image: ArrayView3<T>, params: &TpsParams) -> Result<Array3<T>> {
    let (_, h, w) = image.dim();
    SamplingGrid::new(params, h, w)?.apply(image)
}

/// Two views of one image that differ only by geometry.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub x1: Array3<f32>,
    pub x2: Array3<f32>,
    pub params1: TpsParams,
    pub params2: TpsParams,
}

pub fn make_pair<R: Rng + ?Sized>(
    image: ArrayView3<f32>,
    rng: &mut R,
    cfg: &TpsConfig,
) -> Result<ImagePair> {
    let params1 = sample_tps(rng, cfg);
    let params2 = sample_tps(rng, cfg);
    let x1 = warp(image, &params1)?;
    let x2 = warp(image, &params2)?;
    Ok(ImagePair {
        x1,
        x2,
        params1,
        params2,
    })
}
