//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names, which keeps
//! initialization order, checkpointing and weight-decay selection under our
//! control (batch-norm running statistics included).

mod kernels;

pub use kernels::{batch_norm_train, conv2d, conv_transpose2d};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running mean; not trained.
    RunningMean,
    /// Batch-norm running variance; not trained.
    RunningVar,
    /// Classifier basis vectors.
    Basis,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Whether L2 weight decay applies.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named parameters of a model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter holding its kind's default value.
    pub fn register(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidInput(format!(
                "parameter {name} registered twice"
            )));
        }
        let t = match kind {
            ParamKind::NormScale | ParamKind::RunningVar => {
                Tensor::ones(shape, self.dtype, &self.device)?
            }
            _ => Tensor::zeros(shape, self.dtype, &self.device)?,
        };
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, kind });
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self, filter: impl Fn(&str, ParamKind) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, p)| filter(n, p.kind))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    /// Resets every parameter: Gaussian weights and basis vectors, zero
    /// biases, unit/zero normalization, fresh running statistics. Draws are
    /// made in name order from one stream seeded by `seed`.
    pub fn initialize(&self, seed: u64, sigma: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidInput(format!("invalid init sigma {sigma}: {e}")))?;
        for p in self.params.values() {
            let shape = p.var.shape().clone();
            let t = match p.kind {
                ParamKind::Weight | ParamKind::Basis => {
                    let n = shape.elem_count();
                    let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
                }
                ParamKind::NormScale | ParamKind::RunningVar => {
                    Tensor::ones(shape, self.dtype, &self.device)?
                }
                ParamKind::Bias | ParamKind::NormShift | ParamKind::RunningMean => {
                    Tensor::zeros(shape, self.dtype, &self.device)?
                }
            };
            p.var.set(&t)?;
        }
        Ok(())
    }

    /// Fills every weight with draws from `make(name, fan_in)` standard
    /// deviations; used for fixed random feature extractors.
    pub fn initialize_scaled(&self, seed: u64, std_for: impl Fn(&[usize]) -> f64) -> Result<()> {
        self.initialize(seed, 1.0)?;
        for p in self.params.values() {
            if p.kind == ParamKind::Weight {
                let scaled = p.var.as_tensor().affine(std_for(p.var.dims()), 0.0)?;
                p.var.set(&scaled)?;
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }

    /// Overwrites every parameter from `tensors`, refusing missing names and
    /// shape changes.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Shape(format!("parameter {name} missing from stored weights"))
            })?;
            if t.dims() != p.var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored shape {:?} does not match model shape {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var
                .set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&tensors)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), &[c_out], ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Same layer with its parameters cut from the graph, for frozen use.
    pub fn frozen(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            ..*self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel],
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), &[c_out], ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::conv_transpose2d(x, &self.weight, self.stride, self.padding)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?),
        None => Ok(y),
    }
}

/// Spatial batch normalization with PyTorch's default momentum and epsilon.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    scale: Tensor,
    shift: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let scale = store.register(&format!("{name}.weight"), &[channels], ParamKind::NormScale)?;
        let shift = store.register(&format!("{name}.bias"), &[channels], ParamKind::NormShift)?;
        store.register(
            &format!("{name}.running_mean"),
            &[channels],
            ParamKind::RunningMean,
        )?;
        store.register(
            &format!("{name}.running_var"),
            &[channels],
            ParamKind::RunningVar,
        )?;
        let running_mean = store
            .get(&format!("{name}.running_mean"))
            .expect("just registered")
            .var
            .clone();
        let running_var = store
            .get(&format!("{name}.running_var"))
            .expect("just registered")
            .var
            .clone();
        Ok(Self {
            scale,
            shift,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running estimates; inference mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if train {
            let (y, stats) = batch_norm_train(x, &self.scale, &self.shift, self.eps)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (stats.get(0)? * m)?)?;
            let rv =
                ((self.running_var.as_tensor() * (1.0 - m))? + (stats.get(1)? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            return Ok(y);
        }
        let inv = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = (&self.scale * &inv)?;
        let offset = (&self.shift - (self.running_mean.as_tensor() * &scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&offset.reshape((1, c, 1, 1))?)?)
    }
}

/// 2x2 max pooling with stride 2, dropping a trailing odd row or column.
/// candle's own pooling backward scales gradients by the window size, so
/// the max is taken over views instead.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let blocks = x
        .narrow(2, 0, 2 * oh)?
        .narrow(3, 0, 2 * ow)?
        .contiguous()?
        .reshape((b, c, oh, 2, ow, 2))?;
    let mut out: Option<Tensor> = None;
    for dy in 0..2 {
        for dx in 0..2 {
            let view = blocks.narrow(3, dy, 1)?.narrow(5, dx, 1)?;
            out = Some(match out {
                Some(m) => m.maximum(&view)?,
                None => view,
            });
        }
    }
    Ok(out.expect("four taps").contiguous()?.reshape((b, c, oh, ow))?)
}

/// 3x3 max pooling with stride 2 and padding 1, as in the residual stem.
/// Built from shifted strided views so that it is differentiable.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    // inputs are post-ReLU, so zero padding never wins the max
    let padded = x
        .pad_with_zeros(2, 1, 2 * oh + 1 - h)?
        .pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = padded
            .narrow(2, dy, 2 * oh)?
            .reshape((b, c, oh, 2, 2 * ow + 2))?
            .narrow(3, 0, 1)?;
        for dx in 0..3 {
            let view = rows.narrow(4, dx, 2 * ow)?.reshape((b, c, oh, 2 * ow))?;
            let view = view
                .reshape((b, c, oh, ow, 2))?
                .narrow(4, 0, 1)?
                .squeeze(4)?;
            out = Some(match out {
                Some(m) => m.maximum(&view)?,
                None => view,
            });
        }
    }
    Ok(out.expect("nine taps").contiguous()?)
}
