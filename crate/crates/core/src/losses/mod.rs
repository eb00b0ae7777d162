//! Training objectives and their weighted combination.

mod arcface;
mod concentration;
mod perceptual;

pub use arcface::{arcface_logits, arcface_loss, part_accuracy, part_cosines, ArcFaceConfig};
pub use concentration::{background_concentration, boundary_distance, foreground_concentration};
pub use perceptual::{
    perceptual_loss, ConvTapNet, LayerWeights, PerceptualExtractor, PerceptualTerms,
    LAYER_WEIGHT_WINDOW, TAP_NAMES, VGG19_STAGE_DEPTHS, VGG19_STAGE_WIDTHS,
};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Combination weights `lambda_rec, lambda_cls, lambda_fg, lambda_bg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub cls: f64,
    pub fg: f64,
    pub bg: f64,
}

impl LossWeights {
    pub const fn new(rec: f64, cls: f64, fg: f64, bg: f64) -> Self {
        Self { rec, cls, fg, bg }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.rec * c, self.cls * c, self.fg * c, self.bg * c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rec", self.rec),
            ("cls", self.cls),
            ("fg", self.fg),
            ("bg", self.bg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss.{name} must be a non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The four loss components of one batch, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub rec: Tensor,
    pub cls: Tensor,
    pub fg: Tensor,
    pub bg: Tensor,
}

/// Scalar loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub cls: f64,
    pub fg: f64,
    pub bg: f64,
    pub total: f64,
}

fn host(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted sum of the components. Fails with the offending component named
/// when any of them is not finite.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let values = [
        ("rec", host(&c.rec)?),
        ("cls", host(&c.cls)?),
        ("fg", host(&c.fg)?),
        ("bg", host(&c.bg)?),
    ];
    if let Some((component, value)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            component,
            value: *value,
            last_checkpoint: None,
        });
    }
    let total = (((c.rec.affine(w.rec, 0.0)? + c.cls.affine(w.cls, 0.0)?)?
        + c.fg.affine(w.fg, 0.0)?)?
        + c.bg.affine(w.bg, 0.0)?)?;
    let [rec, cls, fg, bg] = values.map(|(_, v)| v);
    let report = LossReport {
        rec,
        cls,
        fg,
        bg,
        total: host(&total)?,
    };
    Ok((total, report))
}
