//! The appearance exchange bottleneck.
//!
//! All tensors carry a leading batch dimension; the math is applied per
//! sample. Channel 0 of every part map is the background.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilizer added to part masses before dividing by them.
pub const MASS_EPS: f64 = 1e-6;

/// Sizes shared by the encoders, the bottleneck and the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of foreground parts `K`.
    pub parts: usize,
    /// Appearance feature dimension `L`.
    pub appearance_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_size: usize,
}

impl ModelDims {
    pub fn new(
        parts: usize,
        appearance_dim: usize,
        grid_h: usize,
        grid_w: usize,
        image_size: usize,
    ) -> Result<Self> {
        if parts < 1 {
            return Err(Error::InvalidInput("part count must be at least 1".into()));
        }
        if appearance_dim < 1 {
            return Err(Error::InvalidInput(
                "appearance dimension must be at least 1".into(),
            ));
        }
        if grid_h < 2 || grid_w < 2 {
            return Err(Error::InvalidInput(format!(
                "feature grid must be at least 2x2, got {grid_h}x{grid_w}"
            )));
        }
        Ok(Self {
            parts,
            appearance_dim,
            grid_h,
            grid_w,
            image_size,
        })
    }

    /// `K + 1`: foreground parts plus the background channel.
    pub fn channels(&self) -> usize {
        self.parts + 1
    }
}

/// How the per-part normalizer `z_k` is derived from the part mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassNormalization {
    /// `z_k = min(mass_k, 1)`.
    #[default]
    Capped,
    /// `z_k = mass_k`.
    Sum,
}

/// Channel-normalized part probabilities, `[B, K+1, H, W]`.
#[derive(Debug, Clone)]
pub struct PartSegmentationMap(Tensor);

/// Dense appearance features, `[B, L, H, W]`.
#[derive(Debug, Clone)]
pub struct AppearanceFeatureMap(Tensor);

/// One appearance vector per part channel, `[B, K+1, L]`.
#[derive(Debug, Clone)]
pub struct SqueezedPartFeatures(Tensor);

/// Appearance features painted onto a part layout, `[B, L, H, W]`.
#[derive(Debug, Clone)]
pub struct RenderedAppearanceMap(Tensor);

macro_rules! tensor_newtype {
    ($name:ident, $rank:expr) => {
        impl $name {
            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn batch(&self) -> usize {
                self.0.dims()[0]
            }
        }

        impl TryFrom<Tensor> for $name {
            type Error = Error;

            fn try_from(t: Tensor) -> Result<Self> {
                if t.rank() != $rank {
                    return Err(Error::Shape(format!(
                        "{} expects a rank-{} tensor, got {:?}",
                        stringify!($name),
                        $rank,
                        t.dims()
                    )));
                }
                Ok(Self(t))
            }
        }
    };
}

tensor_newtype!(PartSegmentationMap, 4);
tensor_newtype!(AppearanceFeatureMap, 4);
tensor_newtype!(SqueezedPartFeatures, 3);
tensor_newtype!(RenderedAppearanceMap, 4);

impl PartSegmentationMap {
    /// Wraps probabilities that are already channel-normalized, checking the
    /// per-pixel sums.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let map = Self::try_from(probs)?;
        let sums = map
            .0
            .sum(1)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        if let Some(bad) = sums.iter().find(|s| (*s - 1.0).abs() > 1e-5) {
            return Err(Error::InvalidInput(format!(
                "part probabilities must sum to 1 per pixel, found {bad}"
            )));
        }
        Ok(map)
    }

    /// `(channels, h, w)`.
    pub fn dims3(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[1], d[2], d[3])
    }

    /// Per-channel spatial mass, `[B, K+1]`.
    pub fn mass(&self) -> Result<Tensor> {
        Ok(self.0.sum(D::Minus1)?.sum(D::Minus1)?)
    }
}

impl AppearanceFeatureMap {
    pub fn dims3(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[1], d[2], d[3])
    }
}

impl RenderedAppearanceMap {
    pub fn dims3(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[1], d[2], d[3])
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    // x - x is zero for finite x and NaN otherwise
    let probe = t
        .sub(t)?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if probe == 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{what} contains non-finite values"
        )))
    }
}

/// Softmax over the part channel.
pub fn normalize_channels(logits: &Tensor) -> Result<PartSegmentationMap> {
    if logits.rank() != 4 {
        return Err(Error::Shape(format!(
            "logits must be [B, K+1, H, W], got {:?}",
            logits.dims()
        )));
    }
    ensure_finite(logits, "part logits")?;
    let shift = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&shift)?.exp()?;
    let z = e.sum_keepdim(1)?;
    Ok(PartSegmentationMap(e.broadcast_div(&z)?))
}

/// Pools appearance features per part: `F = diag(mass + eps)^-1 S A^T`.
pub fn squeeze(s: &PartSegmentationMap, a: &AppearanceFeatureMap) -> Result<SqueezedPartFeatures> {
    let (b, k, h, w) = s.0.dims4()?;
    let (ba, l, ha, wa) = a.0.dims4()?;
    if b != ba || h != ha || w != wa {
        return Err(Error::Shape(format!(
            "squeeze needs matching batch and grid, got S {:?} and A {:?}",
            s.0.dims(),
            a.0.dims()
        )));
    }
    let s_flat = s.0.reshape((b, k, h * w))?;
    let a_flat = a.0.reshape((b, l, h * w))?;
    let pooled = s_flat.matmul(&a_flat.transpose(1, 2)?.contiguous()?)?;
    let mass = (s_flat.sum_keepdim(2)? + MASS_EPS)?;
    Ok(SqueezedPartFeatures(pooled.broadcast_div(&mass)?))
}

/// Paints part features onto a layout: `A = F^T S`, reshaped to `[B, L, H, W]`.
pub fn expand(f: &SqueezedPartFeatures, s: &PartSegmentationMap) -> Result<RenderedAppearanceMap> {
    let (b, k, l) = f.0.dims3()?;
    let (bs, ks, h, w) = s.0.dims4()?;
    if b != bs || k != ks {
        return Err(Error::Shape(format!(
            "expand needs matching batch and part count, got F {:?} and S {:?}",
            f.0.dims(),
            s.0.dims()
        )));
    }
    let s_flat = s.0.reshape((b, k, h * w))?;
    let rendered = f.0.transpose(1, 2)?.contiguous()?.matmul(&s_flat)?;
    Ok(RenderedAppearanceMap(rendered.reshape((b, l, h, w))?))
}

/// Part centers in grid units together with the masses and loss normalizers.
#[derive(Debug, Clone)]
pub struct PartCenters {
    /// `[B, K+1, 2]`, `(u, v)` per channel; `u` runs along the width.
    pub centers: Tensor,
    /// Raw spatial mass per channel, `[B, K+1]`.
    pub mass: Tensor,
    /// Loss normalizer `z_k` per channel, `[B, K+1]`.
    pub normalizer: Tensor,
}

impl PartCenters {
    /// Host copy of the centers, `[batch][channel] -> (u, v)`, with `None`
    /// for channels whose mass is below the stabilizer.
    pub fn to_host(&self) -> Result<Vec<Vec<Option<(f64, f64)>>>> {
        let centers = self.centers.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let mass = self.mass.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(centers
            .into_iter()
            .zip(mass)
            .map(|(cs, ms)| {
                cs.into_iter()
                    .zip(ms)
                    .map(|(c, m)| (m >= MASS_EPS).then(|| (c[0], c[1])))
                    .collect()
            })
            .collect())
    }
}

/// `(u, v)` coordinate planes of an `h x w` grid, each `[h, w]`.
pub fn coordinate_planes(
    h: usize,
    w: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let u = Tensor::arange(0u32, w as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, w))?
        .broadcast_as((h, w))?
        .contiguous()?;
    let v = Tensor::arange(0u32, h as u32, device)?
        .to_dtype(dtype)?
        .reshape((h, 1))?
        .broadcast_as((h, w))?
        .contiguous()?;
    Ok((u, v))
}

/// Mass-weighted part centers. The normalizer follows `mode`; the center
/// itself is always the weighted mean so it stays inside the grid.
pub fn part_centers(s: &PartSegmentationMap, mode: MassNormalization) -> Result<PartCenters> {
    let t = &s.0;
    let (_, _, h, w) = t.dims4()?;
    let (u, v) = coordinate_planes(h, w, t.dtype(), t.device())?;
    let mass = s.mass()?;
    let first_moment = |plane: &Tensor| -> Result<Tensor> {
        Ok(t.broadcast_mul(plane)?.sum(D::Minus1)?.sum(D::Minus1)?)
    };
    let safe_mass = mass.maximum(MASS_EPS)?;
    let cu = first_moment(&u)?.div(&safe_mass)?;
    let cv = first_moment(&v)?.div(&safe_mass)?;
    let centers = Tensor::stack(&[cu, cv], 2)?;
    let normalizer = match mode {
        MassNormalization::Capped => mass.clamp(0.0, 1.0)?,
        MassNormalization::Sum => mass.clone(),
    };
    Ok(PartCenters {
        centers,
        mass,
        normalizer,
    })
}

/// Appends `u` and `v` coordinate channels rescaled to `[-1, 1]`.
pub fn append_coordinate_channels(r: &RenderedAppearanceMap) -> Result<Tensor> {
    let t = &r.0;
    let (b, _, h, w) = t.dims4()?;
    let (u, v) = coordinate_planes(h, w, t.dtype(), t.device())?;
    let u = u.affine(2.0 / (w - 1) as f64, -1.0)?;
    let v = v.affine(2.0 / (h - 1) as f64, -1.0)?;
    let coords = Tensor::stack(&[u, v], 0)?
        .unsqueeze(0)?
        .broadcast_as((b, 2, h, w))?;
    Ok(Tensor::cat(&[t, &coords.contiguous()?], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t4(data: Vec<f64>, dims: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
    }

    fn random_probs(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> PartSegmentationMap {
        let normal = rand_distr::StandardNormal;
        let logits: Vec<f64> = (0..k * h * w).map(|_| rng.sample(normal)).collect();
        normalize_channels(&t4(logits, (1, k, h, w))).unwrap()
    }

    fn random_feats(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize) -> AppearanceFeatureMap {
        let normal = rand_distr::StandardNormal;
        let v: Vec<f64> = (0..l * h * w).map(|_| rng.sample(normal)).collect();
        AppearanceFeatureMap::try_from(t4(v, (1, l, h, w))).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_probabilities() {
        let s = normalize_channels(&Tensor::zeros((1, 4, 3, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        assert!(flat(s.tensor()).iter().all(|p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_of_opposed_logits() {
        let s = normalize_channels(&t4(vec![10.0, -10.0], (1, 2, 1, 1))).unwrap();
        let p = flat(s.tensor());
        let expected_small = (-20f64).exp() / (1.0 + (-20f64).exp());
        assert!((p[0] - (1.0 - expected_small)).abs() < 1e-12);
        assert!((p[1] - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = normalize_channels(&t4(logits.clone(), (1, 3, 2, 2))).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + 7.5).collect();
        let b = normalize_channels(&t4(shifted, (1, 3, 2, 2))).unwrap();
        for (x, y) in flat(a.tensor()).iter().zip(flat(b.tensor())) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let err = normalize_channels(&t4(vec![0.0, f64::NAN], (1, 2, 1, 1))).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn squeeze_with_one_hot_selects_pixels() {
        let s =
            PartSegmentationMap::from_probs(t4(vec![1.0, 0.0, 0.0, 1.0], (1, 2, 1, 2))).unwrap();
        let a = AppearanceFeatureMap::try_from(t4(vec![3.0, -5.0], (1, 1, 1, 2))).unwrap();
        let f = flat(squeeze(&s, &a).unwrap().tensor());
        assert!((f[0] - 3.0 / (1.0 + MASS_EPS)).abs() < 1e-12);
        assert!((f[1] + 5.0 / (1.0 + MASS_EPS)).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_give_spatial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_feats(&mut rng, 3, 4, 5);
        let s = normalize_channels(&Tensor::zeros((1, 4, 4, 5), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let f = squeeze(&s, &a)
            .unwrap()
            .into_tensor()
            .to_vec3::<f64>()
            .unwrap();
        let mean = a.tensor().mean((2, 3)).unwrap().to_vec2::<f64>().unwrap();
        for row in &f[0] {
            for (x, m) in row.iter().zip(&mean[0]) {
                assert!((x - m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = normalize_channels(&Tensor::zeros((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let a = AppearanceFeatureMap::try_from(
            Tensor::zeros((1, 2, 3, 4), DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert!(matches!(squeeze(&s, &a), Err(Error::Shape(_))));
        let f = SqueezedPartFeatures::try_from(
            Tensor::zeros((1, 3, 2), DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert!(matches!(expand(&f, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn expand_routes_one_hot() {
        let f = SqueezedPartFeatures::try_from(
            Tensor::from_vec(vec![1.5, -2.0], (1, 2, 1), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let s =
            PartSegmentationMap::from_probs(t4(vec![0.0, 1.0, 1.0, 0.0], (1, 2, 1, 2))).unwrap();
        assert_eq!(flat(expand(&f, &s).unwrap().tensor()), vec![-2.0, 1.5]);
    }

    #[test]
    fn expand_of_identical_rows_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_probs(&mut rng, 3, 4, 4);
        let row = [0.3, -1.2];
        let f = SqueezedPartFeatures::try_from(
            Tensor::from_vec([row, row, row].concat(), (1, 3, 2), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let out = flat(expand(&f, &s).unwrap().tensor());
        for (i, x) in out.iter().enumerate() {
            assert!((x - row[i / 16]).abs() < 1e-12);
        }
    }

    #[test]
    fn centers_of_point_masses_and_pairs() {
        let mut data = vec![0.0; 2 * 8 * 6];
        // channel 1: delta at u=3, v=5 on an 8 (h) x 6 (w) grid
        data[8 * 6 + 5 * 6 + 3] = 1.0;
        for i in 0..48 {
            data[i] = 1.0 - data[48 + i];
        }
        let s = PartSegmentationMap::from_probs(t4(data, (1, 2, 8, 6))).unwrap();
        let pc = part_centers(&s, MassNormalization::Capped).unwrap();
        let host = pc.to_host().unwrap();
        let (u, v) = host[0][1].unwrap();
        assert!((u - 3.0).abs() < 1e-12 && (v - 5.0).abs() < 1e-12);
        assert!((flat(&pc.normalizer)[1] - 1.0).abs() < 1e-12);

        let mut data = vec![0.0; 2 * 3 * 3];
        data[9] = 0.5;
        data[9 + 2] = 0.5;
        for i in 0..9 {
            data[i] = 1.0 - data[9 + i];
        }
        let s = PartSegmentationMap::from_probs(t4(data, (1, 2, 3, 3))).unwrap();
        let pc = part_centers(&s, MassNormalization::Capped).unwrap();
        let (u, v) = pc.to_host().unwrap()[0][1].unwrap();
        assert!((u - 1.0).abs() < 1e-12 && v.abs() < 1e-12);
        assert!((flat(&pc.normalizer)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_mass_uses_the_mass_itself() {
        let mut data = vec![0.0; 2 * 4 * 4];
        data[16 + 5] = 0.25;
        data[16 + 10] = 0.15;
        for i in 0..16 {
            data[i] = 1.0 - data[16 + i];
        }
        let s = PartSegmentationMap::from_probs(t4(data, (1, 2, 4, 4))).unwrap();
        for mode in [MassNormalization::Capped, MassNormalization::Sum] {
            let pc = part_centers(&s, mode).unwrap();
            assert!((flat(&pc.normalizer)[1] - 0.4).abs() < 1e-12);
        }
        let pc = part_centers(&s, MassNormalization::Sum).unwrap();
        assert!((flat(&pc.normalizer)[0] - 15.6).abs() < 1e-9);
        let pc = part_centers(&s, MassNormalization::Capped).unwrap();
        assert!((flat(&pc.normalizer)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_channel_is_flagged() {
        let s = normalize_channels(&t4(vec![0.0, -1e4], (1, 2, 1, 1))).unwrap();
        let host = part_centers(&s, MassNormalization::Capped)
            .unwrap()
            .to_host()
            .unwrap();
        assert!(host[0][0].is_some());
        assert!(host[0][1].is_none());
    }

    #[test]
    fn coordinate_channels_span_unit_square() {
        let r = RenderedAppearanceMap::try_from(
            Tensor::ones((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let out = append_coordinate_channels(&r)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        assert_eq!(out.len(), 4);
        assert!(out[..2].iter().flatten().flatten().all(|x| *x == 1.0));
        assert_eq!((out[2][0][0], out[3][0][0]), (-1.0, -1.0));
        assert_eq!((out[2][2][2], out[3][2][2]), (1.0, 1.0));
        assert_eq!((out[2][1][1], out[3][1][1]), (0.0, 0.0));
        // u runs along the width
        assert_eq!((out[2][0][2], out[3][0][2]), (1.0, -1.0));
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::new(0, 4, 4, 4, 16).is_err());
        assert!(ModelDims::new(2, 0, 4, 4, 16).is_err());
        assert!(ModelDims::new(2, 4, 1, 4, 16).is_err());
        assert_eq!(ModelDims::new(4, 8, 4, 4, 16).unwrap().channels(), 5);
    }

    #[test]
    fn one_hot_squeeze_inverts_expand() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (k, l, h, w) = (3, 4, 3, 3);
        let mut data = vec![0.0; k * h * w];
        for p in 0..h * w {
            // every label used at least once
            let label = if p < k { p } else { rng.random_range(0..k) };
            data[label * h * w + p] = 1.0;
        }
        let s = PartSegmentationMap::from_probs(t4(data, (1, k, h, w))).unwrap();
        let fv: Vec<f64> = (0..k * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = SqueezedPartFeatures::try_from(
            Tensor::from_vec(fv.clone(), (1, k, l), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let rendered = expand(&f, &s).unwrap();
        let back = squeeze(
            &s,
            &AppearanceFeatureMap::try_from(rendered.into_tensor()).unwrap(),
        )
        .unwrap();
        for (x, y) in flat(back.tensor()).iter().zip(&fv) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
