//! Geometric concentration penalties on the part map.

use candle_core::{DType, Device, Tensor, D};

use crate::bottleneck::{
    coordinate_planes, part_centers, MassNormalization, PartSegmentationMap, MASS_EPS,
};
use crate::error::{Error, Result};

/// Spread of every foreground part around its own center, averaged over
/// parts and the batch.
pub fn foreground_concentration(
    s: &PartSegmentationMap,
    mode: MassNormalization,
) -> Result<Tensor> {
    let t = s.tensor();
    let (b, k, h, w) = t.dims4()?;
    if k < 2 {
        return Err(Error::Shape(
            "foreground concentration needs at least one foreground part".into(),
        ));
    }
    let pc = part_centers(s, mode)?;
    let (u, v) = coordinate_planes(h, w, t.dtype(), t.device())?;
    let cu = pc.centers.narrow(2, 0, 1)?.reshape((b, k, 1, 1))?;
    let cv = pc.centers.narrow(2, 1, 1)?.reshape((b, k, 1, 1))?;
    let du = u.reshape((1, 1, h, w))?.broadcast_sub(&cu)?;
    let dv = v.reshape((1, 1, h, w))?.broadcast_sub(&cv)?;
    let dist2 = (du.sqr()? + dv.sqr()?)?;
    let spread = dist2.mul(t)?.sum(D::Minus1)?.sum(D::Minus1)?;
    let per_part = spread.div(&pc.normalizer.maximum(MASS_EPS)?)?;
    Ok(per_part.narrow(1, 1, k - 1)?.mean_all()?)
}

/// `h(u, v) = min{u, W - u, v, H - v}`: distance of each pixel to its
/// nearest image border, `[H, W]`.
pub fn boundary_distance(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..h)
        .flat_map(|v| (0..w).map(move |u| u.min(w - u).min(v).min(h - v) as f64))
        .collect();
    Ok(Tensor::from_vec(data, (h, w), device)?.to_dtype(dtype)?)
}

/// Squared border distance of the background mass, averaged over the batch.
pub fn background_concentration(
    s: &PartSegmentationMap,
    mode: MassNormalization,
) -> Result<Tensor> {
    let t = s.tensor();
    let (b, _, h, w) = t.dims4()?;
    let hmap = boundary_distance(h, w, t.dtype(), t.device())?.sqr()?;
    let bg = t.narrow(1, 0, 1)?.reshape((b, h, w))?;
    let mass = bg.sum(D::Minus1)?.sum(D::Minus1)?;
    let z = match mode {
        MassNormalization::Capped => mass.clamp(0.0, 1.0)?,
        MassNormalization::Sum => mass,
    };
    let weighted = bg.broadcast_mul(&hmap)?.sum(D::Minus1)?.sum(D::Minus1)?;
    Ok(weighted.div(&z.maximum(MASS_EPS)?)?.mean_all()?)
}
