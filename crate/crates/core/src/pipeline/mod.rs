//! One optimization step of the exchange model and the state it mutates.

mod checkpoint;
mod driver;
mod evaluate;

pub use checkpoint::{
    checkpoint_path, latest_checkpoint, load_checkpoint, load_model, read_meta, save_checkpoint,
    CheckpointMeta, META_FILE, MODEL_FILE, OPTIMIZER_FILE,
};
pub use driver::{build_extractor, train, TrainOutcome, Trainer, METRICS_FILE, METRICS_HEADER};
pub use evaluate::{constant_center_error, equivariance_score, evaluate, normalizer_for, predict_centers, segment_images};

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{
    append_coordinate_channels, expand, squeeze, MassNormalization, PartSegmentationMap,
    SqueezedPartFeatures,
};
use crate::error::{Error, Result};
use crate::losses::{
    arcface_loss, background_concentration, foreground_concentration, perceptual_loss, total_loss,
    ArcFaceConfig, LayerWeights, LossComponents, LossReport, LossWeights, PerceptualExtractor,
};
use crate::networks::PartSegModel;
use crate::optim::{Adam, AdamConfig};
use crate::tps::ImagePair;

/// Everything that shapes the objective apart from the model itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: LossWeights,
    pub arcface: ArcFaceConfig,
    pub mass_normalization: MassNormalization,
}

/// Forward products of one batch of pairs.
#[derive(Debug)]
pub struct ExchangeOutput {
    pub total: Tensor,
    pub components: LossComponents,
    pub report: LossReport,
    /// Unweighted per-tap perceptual distances averaged over both directions.
    pub per_tap: Vec<f64>,
    pub parts: PartSegmentationMap,
    pub reconstructions: Tensor,
}

/// Swaps the two halves of a `[2B, ...]` batch along dim 0.
fn swap_halves(t: &Tensor) -> Result<Tensor> {
    let n = t.dim(0)? / 2;
    Ok(Tensor::cat(&[t.narrow(0, n, n)?, t.narrow(0, 0, n)?], 0)?)
}

/// Runs both views through the encoders, exchanges part appearance across
/// the pair, decodes, and scores all four losses. `x1` and `x2` are
/// `[B, 3, N, N]`.
pub fn exchange_forward(
    model: &PartSegModel,
    extractor: &dyn PerceptualExtractor,
    layer_weights: &LayerWeights,
    objective: &Objective,
    x1: &Tensor,
    x2: &Tensor,
    train: bool,
) -> Result<ExchangeOutput> {
    if x1.dims() != x2.dims() {
        return Err(Error::Shape(format!(
            "pair views differ: {:?} vs {:?}",
            x1.dims(),
            x2.dims()
        )));
    }
    // one batch of 2B images keeps normalization statistics symmetric in the pair
    let x = Tensor::cat(&[x1, x2], 0)?;
    let appearance = model.encode_appearance(&x, train)?;
    let parts = model.encode_segmentation(&x, train)?;
    let features = squeeze(&parts, &appearance)?;
    // row b of the first half now carries view 2's appearance, and vice versa
    let exchanged = SqueezedPartFeatures::try_from(swap_halves(features.tensor())?)?;
    let rendered = expand(&exchanged, &parts)?;
    let reconstructions = model.decode(&append_coordinate_channels(&rendered)?, train)?;

    let perceptual = perceptual_loss(&x, &reconstructions, extractor, layer_weights)?;
    // the mean over 2B equals half the sum of the two per-direction means
    let rec = perceptual.loss.affine(2.0, 0.0)?;
    let cls = arcface_loss(&features, model.basis(), &objective.arcface)?;
    let fg = foreground_concentration(&parts, objective.mass_normalization)?;
    let bg = background_concentration(&parts, objective.mass_normalization)?;
    let components = LossComponents { rec, cls, fg, bg };
    let (total, report) = total_loss(&components, &objective.weights)?;
    Ok(ExchangeOutput {
        total,
        components,
        report,
        per_tap: perceptual.per_tap,
        parts,
        reconstructions,
    })
}

/// Appearance transfer: `cells[i][j]` decodes the part features of
/// `appearance[i]` rendered onto the part map of `shape[j]`.
pub fn transfer(
    model: &PartSegModel,
    appearance: &[Array3<f32>],
    shape: &[Array3<f32>],
) -> Result<Vec<Vec<Array3<f32>>>> {
    let dtype = model.params().dtype();
    let device = model.params().device().clone();
    let xa = images_to_tensor(appearance, dtype, &device)?;
    let xs = images_to_tensor(shape, dtype, &device)?;
    let features = squeeze(
        &model.encode_segmentation(&xa, false)?,
        &model.encode_appearance(&xa, false)?,
    )?;
    let parts = model.encode_segmentation(&xs, false)?;
    let (k1, l) = (features.tensor().dim(1)?, features.tensor().dim(2)?);
    let mut cells = Vec::with_capacity(appearance.len());
    for i in 0..appearance.len() {
        let f = features
            .tensor()
            .narrow(0, i, 1)?
            .broadcast_as((shape.len(), k1, l))?
            .contiguous()?;
        let rendered = expand(&SqueezedPartFeatures::try_from(f)?, &parts)?;
        let out = model
            .decode(&append_coordinate_channels(&rendered)?, false)?
            .to_dtype(DType::F32)?;
        let n = out.dim(2)?;
        let data = out.flatten_all()?.to_vec1::<f32>()?;
        let all = Array3::from_shape_vec((shape.len() * 3, n, n), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        cells.push(
            (0..shape.len())
                .map(|j| all.slice(ndarray::s![3 * j..3 * j + 3, .., ..]).to_owned())
                .collect(),
        );
    }
    Ok(cells)
}

/// Mutable training state; restorable exactly from a checkpoint.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PartSegModel,
    pub optimizer: Adam,
    pub layer_weights: LayerWeights,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub data: DataCursor,
}

/// Position in the shuffled pass over the training set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    /// Completed shuffles, i.e. the current epoch counting from 1.
    pub epoch: u64,
    pub order: Vec<usize>,
    pub position: usize,
}

impl DataCursor {
    /// Next `batch` indices of a `len`-item dataset, reshuffling with `rng`
    /// when a pass is exhausted. The last batch of an epoch may be short.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R, len: usize, batch: usize) -> Vec<usize> {
        if self.position >= self.order.len() || self.order.len() != len {
            self.order = (0..len).collect();
            self.order.shuffle(rng);
            self.position = 0;
            self.epoch += 1;
        }
        let end = (self.position + batch).min(self.order.len());
        let out = self.order[self.position..end].to_vec();
        self.position = end;
        out
    }
}

impl TrainState {
    pub fn new(model: PartSegModel, optimizer: AdamConfig, taps: usize, seed: u64) -> Self {
        Self {
            model,
            optimizer: Adam::new(optimizer),
            layer_weights: LayerWeights::new(taps),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            data: DataCursor::default(),
        }
    }
}

/// One optimizer update on an already-paired batch.
pub fn train_step_tensors(
    state: &mut TrainState,
    extractor: &dyn PerceptualExtractor,
    objective: &Objective,
    x1: &Tensor,
    x2: &Tensor,
) -> Result<LossReport> {
    let out = exchange_forward(
        &state.model,
        extractor,
        &state.layer_weights,
        objective,
        x1,
        x2,
        true,
    )?;
    let grads = out.total.backward()?;
    state.optimizer.step(state.model.params(), &grads)?;
    state.layer_weights.record(&out.per_tap);
    state.step += 1;
    state.layer_weights.refresh(state.step);
    Ok(out.report)
}

/// One optimizer update on a batch of image pairs.
pub fn train_step(
    state: &mut TrainState,
    extractor: &dyn PerceptualExtractor,
    objective: &Objective,
    batch: &[ImagePair],
) -> Result<LossReport> {
    let device = state.model.params().device().clone();
    let dtype = state.model.params().dtype();
    let (x1, x2) = pairs_to_tensors(batch, dtype, &device)?;
    train_step_tensors(state, extractor, objective, &x1, &x2)
}

/// Stacks host images `[3, N, N]` into a `[B, 3, N, N]` tensor.
pub fn images_to_tensor<'a>(
    images: impl IntoIterator<Item = &'a Array3<f32>>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for img in images {
        let dim = img.dim();
        if *shape.get_or_insert(dim) != dim {
            return Err(Error::Shape(format!(
                "batch mixes image shapes {:?} and {dim:?}",
                shape.unwrap()
            )));
        }
        data.extend(img.iter().copied());
        n += 1;
    }
    let (c, h, w) = shape.ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), device)?.to_dtype(dtype)?)
}

pub fn pairs_to_tensors(
    batch: &[ImagePair],
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    Ok((
        images_to_tensor(batch.iter().map(|p| &p.x1), dtype, device)?,
        images_to_tensor(batch.iter().map(|p| &p.x2), dtype, device)?,
    ))
}
