//! Additive angular margin classification of the squeezed part features.
//!
//! Every foreground part feature `F_k` should be closest (in angle) to the
//! basis vector `W_k`. The background row is never classified.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::bottleneck::SqueezedPartFeatures;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-8;
const COS_LIMIT: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceConfig {
    /// Radius scale `s`.
    pub scale: f64,
    /// Angular margin `m` in radians.
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self {
            scale: 20.0,
            margin: 0.5,
        }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "arcface.scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::Config(format!(
                "arcface.margin must lie in [0, pi), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + NORM_EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Cosines between foreground part features and basis vectors,
/// `[B, K, K]` with entry `(b, i, j)` comparing `F_i` against `W_j`.
pub fn part_cosines(f: &SqueezedPartFeatures, basis: &Tensor) -> Result<Tensor> {
    let t = f.tensor();
    let (_, kp, l) = t.dims3()?;
    let (k, lb) = basis.dims2()?;
    if kp != k + 1 || l != lb {
        return Err(Error::Shape(format!(
            "classifier basis {:?} does not match part features {:?}",
            basis.dims(),
            t.dims()
        )));
    }
    let fg = l2_normalize(&t.narrow(1, 1, k)?)?;
    let w = l2_normalize(basis)?;
    Ok(fg.broadcast_matmul(&w.t()?)?.clamp(-COS_LIMIT, COS_LIMIT)?)
}

/// Margin-softmax logits: `s cos(theta_ii + m)` on the diagonal and
/// `s cos(theta_ij)` elsewhere.
pub fn arcface_logits(cos: &Tensor, cfg: &ArcFaceConfig) -> Result<Tensor> {
    let k = cos.dim(D::Minus1)?;
    let eye = Tensor::eye(k, cos.dtype(), cos.device())?;
    // cos(theta + m) with sin(theta) >= 0 on [0, pi]
    let sin = (1.0 - cos.sqr()?)?.sqrt()?;
    let target = (cos.affine(cfg.margin.cos(), 0.0)? - sin.affine(cfg.margin.sin(), 0.0)?)?;
    let logits = (cos + target.sub(cos)?.broadcast_mul(&eye)?)?;
    Ok(logits.affine(cfg.scale, 0.0)?)
}

/// Negative mean log-probability of each part being assigned its own class.
pub fn arcface_loss(
    f: &SqueezedPartFeatures,
    basis: &Tensor,
    cfg: &ArcFaceConfig,
) -> Result<Tensor> {
    let cos = part_cosines(f, basis)?;
    let logits = arcface_logits(&cos, cfg)?;
    softmax_cross_entropy_diag(&logits)
}

/// `-mean_i log softmax(logits[i])[i]` over the last two dims.
pub(crate) fn softmax_cross_entropy_diag(logits: &Tensor) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    let peak = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&peak)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let eye = Tensor::eye(k, logits.dtype(), logits.device())?;
    let picked = log_probs.broadcast_mul(&eye)?.sum(D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Host-side helper for reporting: the fraction of parts whose own basis
/// vector is the most similar one.
pub fn part_accuracy(f: &SqueezedPartFeatures, basis: &Tensor) -> Result<f64> {
    let cos = part_cosines(f, basis)?
        .to_dtype(DType::F64)?
        .to_vec3::<f64>()?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in &cos {
        for (i, row) in sample.iter().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            hits += usize::from(best == i);
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}
