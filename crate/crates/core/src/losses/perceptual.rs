//! Feature-space reconstruction loss and its per-layer balancing.

use std::collections::VecDeque;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool_2x2, Conv2d, ParamKind, ParamStore};

/// Names of the feature taps compared by the reconstruction loss.
pub const TAP_NAMES: [&str; 6] = [
    "input", "conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2",
];

/// A frozen feature function with a fixed set of taps.
pub trait PerceptualExtractor {
    fn tap_names(&self) -> &[&'static str] {
        &TAP_NAMES
    }

    /// Activations at every tap for an image batch `[B, 3, H, W]` in `[0, 1]`.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// VGG-style stack: stages of 3x3 convolutions with ReLU, 2x2 max pooling in
/// between, tapping the ReLU output of the second convolution of each stage.
#[derive(Debug, Clone)]
pub struct ConvTapNet {
    stages: Vec<Vec<Conv2d>>,
    mean: Tensor,
    std: Tensor,
    store: ParamStore,
}

/// Convolutions per stage for the 19-layer VGG configuration.
pub const VGG19_STAGE_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];
pub const VGG19_STAGE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl ConvTapNet {
    /// Builds the topology with zero weights. `depths[i] >= 2` for every stage;
    /// only the first two convolutions of the last stage are materialized
    /// since nothing after `conv5_2` is tapped.
    pub fn new(
        depths: &[usize; 5],
        widths: &[usize; 5],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if depths.iter().any(|d| *d < 2) {
            return Err(Error::InvalidInput(
                "every stage needs at least two convolutions".into(),
            ));
        }
        let mut store = ParamStore::new(dtype, device);
        let mut stages = Vec::new();
        let mut c_in = 3;
        // torchvision numbering: each conv is followed by a ReLU, each stage by a pool
        let mut index = 0;
        for (s, (&depth, &width)) in depths.iter().zip(widths).enumerate() {
            let depth = if s == 4 { 2 } else { depth };
            let mut convs = Vec::new();
            for _ in 0..depth {
                convs.push(Conv2d::new(
                    &mut store,
                    &format!("features.{index}"),
                    c_in,
                    width,
                    3,
                    1,
                    1,
                    true,
                )?);
                c_in = width;
                index += 2;
            }
            index += 1;
            stages.push(convs);
        }
        let mean =
            Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(Self {
            stages,
            mean,
            std,
            store,
        })
    }

    /// Pretrained VGG-19 from a safetensors file using torchvision's
    /// `features.{index}.{weight,bias}` names. Stage widths are read from
    /// the file, so narrow test doubles load the same way.
    pub fn vgg19_from_file(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "perceptual weights file {} not found",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let mut widths = [0usize; 5];
        let mut index = 0;
        for (s, depth) in VGG19_STAGE_DEPTHS.iter().enumerate() {
            let key = format!("features.{index}.weight");
            let w = tensors
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("{} lacks {key}", path.display())))?;
            widths[s] = w.dims()[0];
            index += 2 * depth + 1;
        }
        let net = Self::new(&VGG19_STAGE_DEPTHS, &widths, dtype, device)?;
        net.store.assign(&tensors)?;
        Ok(net)
    }

    /// A fixed random extractor with He-scaled Gaussian weights; stands in
    /// for pretrained weights when none are available.
    pub fn random(widths: &[usize; 5], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let net = Self::new(&[2; 5], widths, dtype, device)?;
        net.store.initialize_scaled(seed, |dims| {
            let fan_in: usize = dims[1..].iter().product();
            (2.0 / fan_in as f64).sqrt()
        })?;
        Ok(net)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel(|_, k| k != ParamKind::RunningMean)
    }
}

impl PerceptualExtractor for ConvTapNet {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = vec![x.clone()];
        let mut h = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                h = max_pool_2x2(&h)?;
            }
            for (i, conv) in convs.iter().enumerate() {
                h = conv.frozen().forward(&h)?.relu()?;
                if i == 1 {
                    taps.push(h.clone());
                }
            }
        }
        Ok(taps)
    }
}

/// Per-tap balancing weights refreshed from recent loss statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub weights: Vec<f64>,
    /// Most recent per-tap losses, oldest first.
    pub history: VecDeque<Vec<f64>>,
    pub window: usize,
}

pub const LAYER_WEIGHT_WINDOW: usize = 100;
const LAYER_WEIGHT_FLOOR: f64 = 1e-8;

impl LayerWeights {
    pub fn new(taps: usize) -> Self {
        Self {
            weights: vec![1.0; taps],
            history: VecDeque::new(),
            window: LAYER_WEIGHT_WINDOW,
        }
    }

    pub fn record(&mut self, tap_losses: &[f64]) {
        self.history.push_back(tap_losses.to_vec());
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    /// On every multiple of the window, resets each weight to the reciprocal
    /// of that tap's mean loss over the window.
    pub fn refresh(&mut self, step: u64) -> bool {
        if step == 0 || !step.is_multiple_of(self.window as u64) || self.history.is_empty() {
            return false;
        }
        let n = self.history.len() as f64;
        for (t, w) in self.weights.iter_mut().enumerate() {
            let mean = self.history.iter().map(|h| h[t]).sum::<f64>() / n;
            *w = 1.0 / mean.max(LAYER_WEIGHT_FLOOR);
        }
        true
    }
}

/// Weighted loss plus the unweighted per-tap distances.
#[derive(Debug, Clone)]
pub struct PerceptualTerms {
    pub loss: Tensor,
    pub per_tap: Vec<f64>,
}

/// `sum_t w_t * mean((P_t(x) - P_t(x_hat))^2)`; the target branch is not
/// differentiated.
pub fn perceptual_loss(
    x: &Tensor,
    x_hat: &Tensor,
    extractor: &dyn PerceptualExtractor,
    weights: &LayerWeights,
) -> Result<PerceptualTerms> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "perceptual loss compares {:?} against {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let target = extractor.features(&x.detach())?;
    let recon = extractor.features(x_hat)?;
    if target.len() != weights.weights.len() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} taps",
            weights.weights.len(),
            target.len()
        )));
    }
    let mut loss: Option<Tensor> = None;
    let mut per_tap = Vec::with_capacity(target.len());
    for ((t, r), w) in target.iter().zip(&recon).zip(&weights.weights) {
        let d = r.sub(&t.detach())?.sqr()?.mean_all()?;
        per_tap.push(d.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        let term = d.affine(*w, 0.0)?;
        loss = Some(match loss {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    let loss = loss.ok_or_else(|| Error::InvalidInput("extractor produced no taps".into()))?;
    Ok(PerceptualTerms { loss, per_tap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dtype: DType) -> ConvTapNet {
        ConvTapNet::random(&[4, 4, 4, 4, 4], 1, dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_inputs_cost_nothing() {
        let net = tiny(DType::F64);
        let x = Tensor::rand(0.0, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let t = perceptual_loss(&x, &x, &net, &LayerWeights::new(6)).unwrap();
        assert_eq!(t.loss.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn taps_have_expected_shapes() {
        let net = tiny(DType::F32);
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let f = net.features(&x).unwrap();
        let dims: Vec<_> = f.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims[0], vec![1, 3, 32, 32]);
        assert_eq!(dims[1], vec![1, 4, 32, 32]);
        assert_eq!(dims[5], vec![1, 4, 2, 2]);
        assert_eq!(net.tap_names().len(), f.len());
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let net = tiny(DType::F64);
        let x = Tensor::rand(0.0, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let y = Tensor::rand(0.0, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let mut w = LayerWeights::new(6);
        let a = perceptual_loss(&x, &y, &net, &w)
            .unwrap()
            .loss
            .to_scalar::<f64>()
            .unwrap();
        w.weights.iter_mut().for_each(|v| *v *= 2.0);
        let b = perceptual_loss(&x, &y, &net, &w)
            .unwrap()
            .loss
            .to_scalar::<f64>()
            .unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn layer_weight_schedule() {
        let mut w = LayerWeights::new(3);
        for _ in 0..50 {
            w.record(&[2.0, 0.5, 0.0]);
        }
        assert!(!w.refresh(50));
        assert_eq!(w.weights, vec![1.0; 3]);
        for _ in 0..50 {
            w.record(&[2.0, 0.5, 0.0]);
        }
        assert!(w.refresh(100));
        assert_eq!(w.weights, vec![0.5, 2.0, 1e8]);
        assert!(!w.refresh(0));
    }

    #[test]
    fn history_keeps_only_the_window() {
        let mut w = LayerWeights::new(1);
        for i in 0..250 {
            w.record(&[i as f64]);
        }
        assert_eq!(w.history.len(), 100);
        assert!(w.refresh(200));
        assert!((w.weights[0] - 1.0 / 199.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_images_are_rejected() {
        let net = tiny(DType::F32);
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 3, 8, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            perceptual_loss(&x, &y, &net, &LayerWeights::new(6)),
            Err(Error::Shape(_))
        ));
    }
}
