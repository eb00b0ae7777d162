//! Encoders, decoder and classifier basis.
//!
//! Both encoders are residual trunks truncated before their fourth stage;
//! the segmentation encoder adds a 1x1 head producing `K + 1` logits. The
//! decoder is seven conv/BN/ReLU blocks (blocks 2 and 4 upsample with 4x4
//! transposed convolutions) followed by a 3x3 convolution to RGB.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bottleneck::{normalize_channels, AppearanceFeatureMap, ModelDims, PartSegmentationMap};
use crate::error::{Error, Result};
use crate::nn::{max_pool_3x3_s2, BatchNorm2d, Conv2d, ConvTranspose2d, ParamKind, ParamStore};

/// A residual trunk: 7x7 stride-2 stem, 3x3 stride-2 max pool, then three
/// stages of basic blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub stem_width: usize,
    pub stage_widths: [usize; 3],
    pub stage_blocks: [usize; 3],
    pub stage_strides: [usize; 3],
}

impl EncoderSpec {
    /// First three stages of the 34-layer residual network.
    pub fn resnet34_trunk() -> Self {
        Self {
            stem_width: 64,
            stage_widths: [64, 128, 256],
            stage_blocks: [3, 4, 6],
            stage_strides: [1, 1, 1],
        }
    }

    /// First three stages of the 18-layer residual network.
    pub fn resnet18_trunk() -> Self {
        Self {
            stage_blocks: [2, 2, 2],
            ..Self::resnet34_trunk()
        }
    }

    pub fn out_width(&self) -> usize {
        self.stage_widths[2]
    }

    /// Overall downsampling factor.
    pub fn stride(&self) -> usize {
        4 * self.stage_strides.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    /// Output channels of the seven blocks.
    pub widths: [usize; 7],
}

impl DecoderSpec {
    /// Widths tapering geometrically from `first` to `last`.
    pub fn tapered(first: usize, last: usize) -> Self {
        let ratio = (last as f64 / first as f64).powf(1.0 / 6.0);
        let mut widths = [0; 7];
        for (i, w) in widths.iter_mut().enumerate() {
            *w = ((first as f64) * ratio.powi(i as i32)).round().max(1.0) as usize;
        }
        Self { widths }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub appearance: EncoderSpec,
    pub segmentation: EncoderSpec,
    pub decoder: DecoderSpec,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_sigma: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            appearance: EncoderSpec::resnet34_trunk(),
            segmentation: EncoderSpec::resnet18_trunk(),
            decoder: DecoderSpec::tapered(256, 32),
            init_sigma: 0.01,
        }
    }
}

impl NetworkConfig {
    /// Narrow single-block variant for CPU-scale experiments.
    pub fn compact(base: usize) -> Self {
        let enc = EncoderSpec {
            stem_width: base,
            stage_widths: [base, 2 * base, 4 * base],
            stage_blocks: [1, 1, 1],
            stage_strides: [1, 1, 1],
        };
        Self {
            appearance: enc.clone(),
            segmentation: enc,
            decoder: DecoderSpec::tapered(4 * base, base),
            init_sigma: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.appearance.stride() != self.segmentation.stride() {
            return Err(Error::Config(
                "encoders must share one output resolution".into(),
            ));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "network.init_sigma must be non-negative, got {}",
                self.init_sigma
            )));
        }
        let specs = [&self.appearance, &self.segmentation];
        if specs.iter().any(|s| {
            s.stem_width == 0 || s.stage_widths.contains(&0) || s.stage_blocks.contains(&0)
        }) {
            return Err(Error::Config(
                "encoder widths and block counts must be positive".into(),
            ));
        }
        if self.decoder.widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Model dimensions implied by this architecture for `parts` foreground
    /// parts at the given input resolution.
    pub fn dims(&self, parts: usize, image_size: usize) -> Result<ModelDims> {
        self.validate()?;
        let stride = self.appearance.stride();
        if !image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image size {image_size} is not a multiple of the encoder stride {stride}"
            )));
        }
        let grid = image_size / stride;
        ModelDims::new(parts, self.appearance.out_width(), grid, grid, image_size)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            stride,
            1,
            false,
        )?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            1,
            1,
            false,
        )?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), c_out)?;
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(
                    store,
                    &format!("{name}.downsample.0"),
                    c_in,
                    c_out,
                    1,
                    stride,
                    0,
                    false,
                )?,
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    head: Option<Conv2d>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &EncoderSpec,
        head_channels: Option<usize>,
    ) -> Result<Self> {
        let stem = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            3,
            spec.stem_width,
            7,
            2,
            3,
            false,
        )?;
        let stem_bn = BatchNorm2d::new(store, &format!("{name}.bn1"), spec.stem_width)?;
        let mut blocks = Vec::new();
        let mut c_in = spec.stem_width;
        for s in 0..3 {
            for b in 0..spec.stage_blocks[s] {
                let stride = if b == 0 { spec.stage_strides[s] } else { 1 };
                let block_name = format!("{name}.layer{}.{b}", s + 1);
                blocks.push(BasicBlock::new(
                    store,
                    &block_name,
                    c_in,
                    spec.stage_widths[s],
                    stride,
                )?);
                c_in = spec.stage_widths[s];
            }
        }
        let head = match head_channels {
            Some(c) => Some(Conv2d::new(
                store,
                &format!("{name}.head"),
                c_in,
                c,
                1,
                1,
                0,
                true,
            )?),
            None => None,
        };
        Ok(Self {
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self
            .stem_bn
            .forward(&self.stem.forward(x)?, train)?
            .relu()?;
        let mut h = max_pool_3x3_s2(&h)?;
        for block in &self.blocks {
            h = block.forward(&h, train)?;
        }
        match &self.head {
            Some(head) => head.forward(&h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
enum DecoderLayer {
    Conv(Conv2d),
    Up(ConvTranspose2d),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    blocks: Vec<(DecoderLayer, BatchNorm2d)>,
    output: Conv2d,
    in_channels: usize,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        spec: &DecoderSpec,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (i, &w) in spec.widths.iter().enumerate() {
            let layer_name = format!("{name}.block{i}.conv");
            let layer = if i == 1 || i == 3 {
                DecoderLayer::Up(ConvTranspose2d::new(
                    store,
                    &layer_name,
                    c_in,
                    w,
                    4,
                    2,
                    1,
                    false,
                )?)
            } else {
                DecoderLayer::Conv(Conv2d::new(store, &layer_name, c_in, w, 3, 1, 1, false)?)
            };
            let bn = BatchNorm2d::new(store, &format!("{name}.block{i}.bn"), w)?;
            blocks.push((layer, bn));
            c_in = w;
        }
        let output = Conv2d::new(store, &format!("{name}.output"), c_in, 3, 3, 1, 1, true)?;
        Ok(Self {
            blocks,
            output,
            in_channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (layer, bn) in &self.blocks {
            h = match layer {
                DecoderLayer::Conv(c) => c.forward(&h)?,
                DecoderLayer::Up(u) => u.forward(&h)?,
            };
            h = bn.forward(&h, train)?.relu()?;
        }
        self.output.forward(&h)
    }
}

/// Every learned component of the model.
#[derive(Debug, Clone)]
pub struct PartSegModel {
    pub dims: ModelDims,
    pub config: NetworkConfig,
    store: ParamStore,
    appearance: Encoder,
    segmentation: Encoder,
    decoder: Decoder,
    basis: Tensor,
}

pub const BASIS_PARAM: &str = "classifier.basis";

impl PartSegModel {
    /// Builds the model with zeroed weights; call [`init_all`](Self::init_all).
    pub fn new(
        config: &NetworkConfig,
        parts: usize,
        image_size: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let dims = config.dims(parts, image_size)?;
        let mut store = ParamStore::new(dtype, device);
        let appearance = Encoder::new(&mut store, "appearance", &config.appearance, None)?;
        let segmentation = Encoder::new(
            &mut store,
            "segmentation",
            &config.segmentation,
            Some(dims.channels()),
        )?;
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            dims.appearance_dim + 2,
            &config.decoder,
        )?;
        let basis = store.register(BASIS_PARAM, &[parts, dims.appearance_dim], ParamKind::Basis)?;
        Ok(Self {
            dims,
            config: config.clone(),
            store,
            appearance,
            segmentation,
            decoder,
            basis,
        })
    }

    /// Gaussian weights with the configured sigma, zero biases.
    pub fn init_all(&self, seed: u64) -> Result<()> {
        self.store.initialize(seed, self.config.init_sigma)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        let n = self.dims.image_size;
        if d.len() != 4 || d[1] != 3 || d[2] != n || d[3] != n {
            return Err(Error::InvalidInput(format!(
                "expected images [B, 3, {n}, {n}], got {d:?}"
            )));
        }
        Ok(())
    }

    pub fn encode_appearance(&self, x: &Tensor, train: bool) -> Result<AppearanceFeatureMap> {
        self.check_image(x)?;
        AppearanceFeatureMap::try_from(self.appearance.forward(x, train)?)
    }

    pub fn segmentation_logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_image(x)?;
        self.segmentation.forward(x, train)
    }

    pub fn encode_segmentation(&self, x: &Tensor, train: bool) -> Result<PartSegmentationMap> {
        normalize_channels(&self.segmentation_logits(x, train)?)
    }

    /// Decodes `[B, L + 2, H, W]` (coordinates appended) to `[B, 3, 4H, 4W]`.
    pub fn decode(&self, input: &Tensor, train: bool) -> Result<Tensor> {
        let d = input.dims();
        if d.len() != 4 || d[1] != self.decoder.in_channels {
            return Err(Error::InvalidInput(format!(
                "decoder expects {} input channels, got {d:?}",
                self.decoder.in_channels
            )));
        }
        self.decoder.forward(input, train)
    }
}
