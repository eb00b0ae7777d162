//! Direct CPU kernels with explicit gradients: convolution (im2col + GEMM)
//! and training-mode batch normalization.
//!
//! Convolution geometry: an image `[C, H, W]` is correlated with
//! `k x k` windows at stride `s` and zero padding `p`, giving
//! `OH = (H + 2p - k) / s + 1` rows. The transposed convolution is the
//! input-gradient of that correlation.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

/// Scalar types with a GEMM routine.
pub(crate) trait GemmScalar: Float + WithDType {
    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

impl GemmScalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: the caller-provided strides describe views inside the slices
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl GemmScalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: as above
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> candle_core::Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("kernel {k} larger than padded input {h}x{w}");
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Whether im2col is the identity.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source column range `[lo, hi)` of output columns for kernel offset `kx`.
    fn valid_range(&self, kx: usize, out: usize, size: usize) -> (usize, usize) {
        // ox valid when 0 <= ox*s + kx - p < size
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if size + self.pad > kx {
            ((size + self.pad - kx - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Float>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.ow, g.w);
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                row[..oy_lo * g.ow].fill(T::zero());
                row[oy_hi * g.ow..].fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &x[(c * g.h + iy) * g.w..][..g.w];
                    let dst = &mut row[oy * g.ow..][..g.ow];
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix = ox_lo + kx - g.pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix..ix + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.oh, g.h);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.ow, g.w);
                let row = &cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut x[(c * g.h + iy) * g.w..][..g.w];
                    let src = &row[oy * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let ix = ox_lo + kx - g.pad;
                        for (d, v) in dst[ix..ix + ox_hi - ox_lo].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *d = *d + *v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W * im2col(x[b])`, `W` is `[co, rows]`.
fn forward<T: GemmScalar>(x: &[T], w: &[T], batch: usize, co: usize, g: &Geometry) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let mut y = vec![T::zero(); batch * co * n];
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { rows * n }];
    for b in 0..batch {
        let xb = &x[b * g.c * g.h * g.w..][..g.c * g.h * g.w];
        let src = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(
            co,
            rows,
            n,
            (w, rows as isize, 1),
            (src, n as isize, 1),
            T::zero(),
            &mut y[b * co * n..],
        );
    }
    y
}

/// `gx[b] = col2im(W^T * gy[b])`.
fn input_grad<T: GemmScalar>(gy: &[T], w: &[T], batch: usize, co: usize, g: &Geometry) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let plane = g.c * g.h * g.w;
    let mut gx = vec![T::zero(); batch * plane];
    let mut cols = vec![T::zero(); rows * n];
    for b in 0..batch {
        let gyb = &gy[b * co * n..][..co * n];
        if g.pointwise() {
            T::gemm(
                rows,
                co,
                n,
                (w, 1, rows as isize),
                (gyb, n as isize, 1),
                T::zero(),
                &mut gx[b * plane..],
            );
        } else {
            T::gemm(
                rows,
                co,
                n,
                (w, 1, rows as isize),
                (gyb, n as isize, 1),
                T::zero(),
                &mut cols,
            );
            col2im(&cols, g, &mut gx[b * plane..][..plane]);
        }
    }
    gx
}

/// `gW = sum_b gy[b] * im2col(x[b])^T`.
fn weight_grad<T: GemmScalar>(x: &[T], gy: &[T], batch: usize, co: usize, g: &Geometry) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let mut gw = vec![T::zero(); co * rows];
    let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { rows * n }];
    for b in 0..batch {
        let xb = &x[b * g.c * g.h * g.w..][..g.c * g.h * g.w];
        let src = if g.pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let beta = if b == 0 { T::zero() } else { T::one() };
        T::gemm(
            co,
            n,
            rows,
            (&gy[b * co * n..], n as isize, 1),
            (src, 1, n as isize),
            beta,
            &mut gw,
        );
    }
    gw
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("convolution kernels need contiguous inputs"),
    }
}

macro_rules! dispatch {
    ($s1:expr, $f:ident :: <T> ($($arg:tt)*)) => {
        match $s1 {
            CpuStorage::F32(_) => $f::<f32>($($arg)*),
            CpuStorage::F64(_) => $f::<f64>($($arg)*),
            _ => candle_core::bail!("convolution kernels support f32 and f64 only"),
        }
    };
}

/// Correlation `x [B, C, H, W]` with `w [Co, C, k, k]`.
struct Conv {
    stride: usize,
    pad: usize,
}

/// Transposed convolution `x [B, Ci, H, W]` with `w [Ci, Co, k, k]` onto an
/// output of the given spatial size.
struct ConvTranspose {
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Weight gradient of [`Conv`]: `(input, grad_out) -> [Co, C, k, k]`.
struct ConvWeightGrad {
    stride: usize,
    pad: usize,
    k: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_conv::<T>(self, s1, l1, s2, l2))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        gy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let gy = gy.contiguous()?;
        let gx = gy.apply_op2_no_bwd(
            w,
            &ConvTranspose {
                stride: self.stride,
                pad: self.pad,
                out_h: h,
                out_w: wd,
            },
        )?;
        let k = w.dim(2)?;
        let gw = x.apply_op2_no_bwd(
            &gy,
            &ConvWeightGrad {
                stride: self.stride,
                pad: self.pad,
                k,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

fn run_conv<T: GemmScalar>(
    op: &Conv,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, h, w) = l1.shape().dims4()?;
    let (co, ci, k, k2) = l2.shape().dims4()?;
    if ci != c || k != k2 {
        candle_core::bail!(
            "conv weight {:?} does not fit input {:?}",
            l2.shape(),
            l1.shape()
        );
    }
    let g = Geometry::new(c, h, w, k, op.stride, op.pad)?;
    let y = forward(
        contiguous::<T>(s1, l1)?,
        contiguous::<T>(s2, l2)?,
        b,
        co,
        &g,
    );
    Ok((T::to_cpu_storage_owned(y), Shape::from((b, co, g.oh, g.ow))))
}

fn run_conv_t<T: GemmScalar>(
    op: &ConvTranspose,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, ci, h, w) = l1.shape().dims4()?;
    let (wi, co, k, k2) = l2.shape().dims4()?;
    if wi != ci || k != k2 {
        candle_core::bail!(
            "transposed conv weight {:?} does not fit input {:?}",
            l2.shape(),
            l1.shape()
        );
    }
    let g = Geometry::new(co, op.out_h, op.out_w, k, op.stride, op.pad)?;
    if (g.oh, g.ow) != (h, w) {
        candle_core::bail!(
            "transposed conv output {}x{} inconsistent with input {h}x{w}",
            op.out_h,
            op.out_w
        );
    }
    let y = input_grad(
        contiguous::<T>(s1, l1)?,
        contiguous::<T>(s2, l2)?,
        b,
        ci,
        &g,
    );
    Ok((
        T::to_cpu_storage_owned(y),
        Shape::from((b, co, op.out_h, op.out_w)),
    ))
}

fn run_weight_grad<T: GemmScalar>(
    op: &ConvWeightGrad,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, h, w) = l1.shape().dims4()?;
    let (_, co, _, _) = l2.shape().dims4()?;
    let g = Geometry::new(c, h, w, op.k, op.stride, op.pad)?;
    let gw = weight_grad(
        contiguous::<T>(s1, l1)?,
        contiguous::<T>(s2, l2)?,
        b,
        co,
        &g,
    );
    Ok((
        T::to_cpu_storage_owned(gw),
        Shape::from((co, c, op.k, op.k)),
    ))
}

impl CustomOp2 for ConvTranspose {
    fn name(&self) -> &'static str {
        "conv-transpose2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_conv_t::<T>(self, s1, l1, s2, l2))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        gy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gy = gy.contiguous()?;
        let gx = gy.apply_op2_no_bwd(
            w,
            &Conv {
                stride: self.stride,
                pad: self.pad,
            },
        )?;
        let k = w.dim(2)?;
        // roles swap: the correlation input is the transposed output
        let gw = gy.apply_op2_no_bwd(
            x,
            &ConvWeightGrad {
                stride: self.stride,
                pad: self.pad,
                k,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_weight_grad::<T>(self, s1, l1, s2, l2))
    }
}

/// Differentiable 2-D correlation.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let op = Conv { stride, pad };
    x.contiguous()?.apply_op2(&w.contiguous()?, op)
}

/// Differentiable transposed convolution; output size `(H - 1) s - 2p + k`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (_, _, h, wd) = x.dims4()?;
    let k = w.dim(2)?;
    if (h - 1) * stride + k <= 2 * pad {
        candle_core::bail!("transposed conv output would be empty");
    }
    let op = ConvTranspose {
        stride,
        pad,
        out_h: (h - 1) * stride + k - 2 * pad,
        out_w: (wd - 1) * stride + k - 2 * pad,
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, op)
}

/// Per-channel mean and biased variance of `[B, C, H, W]`, accumulated in f64.
fn channel_stats<T: WithDType>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|v| WithDType::to_f64(*v))
                .sum::<f64>();
        }
        let m = s / n;
        let mut q = 0.0;
        for bi in 0..b {
            q += x[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = WithDType::to_f64(*v) - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / n;
    }
    (mean, var)
}

fn cast<T: WithDType>(v: f64) -> T {
    T::from_f64(v)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` with batch statistics.
struct BatchNormTrain {
    eps: f64,
}

/// Input gradient of [`BatchNormTrain`]: `(x, gamma, grad_out) -> grad_x`.
struct BatchNormInputGrad {
    eps: f64,
}

/// Parameter gradients of [`BatchNormTrain`]: `(x, grad_out) -> [2, C]`
/// holding the scale gradient then the shift gradient.
struct BatchNormParamGrad {
    eps: f64,
}

/// `[2, C]` per-channel batch mean and biased variance.
struct ChannelStats;

fn dims_bchw(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (b, c, h, w) = l.shape().dims4()?;
    Ok((b, c, h * w))
}

fn run_bn<T: GemmScalar>(
    eps: f64,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, hw) = dims_bchw(l1)?;
    let (x, gamma, beta) = (
        contiguous::<T>(s1, l1)?,
        contiguous::<T>(s2, l2)?,
        contiguous::<T>(s3, l3)?,
    );
    if gamma.len() != c || beta.len() != c {
        candle_core::bail!("batch norm parameters do not match {c} channels");
    }
    let (mean, var) = channel_stats(x, b, c, hw);
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = 1.0 / (var[ch] + eps).sqrt();
            let scale: T = cast(WithDType::to_f64(gamma[ch]) * r);
            let offset: T = cast(
                WithDType::to_f64(beta[ch])
                    - mean[ch] * WithDType::to_f64(gamma[ch]) * r,
            );
            let off = (bi * c + ch) * hw;
            for (o, v) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *o = *v * scale + offset;
            }
        }
    }
    Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
}

/// Per-channel `sum g` and `sum g * x_hat`.
fn grad_sums<T: WithDType>(
    x: &[T],
    g: &[T],
    b: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    r: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for (xv, gv) in x[off..off + hw].iter().zip(&g[off..off + hw]) {
                let gv = WithDType::to_f64(*gv);
                sg[ch] += gv;
                sgx[ch] += gv * (WithDType::to_f64(*xv) - mean[ch]) * r[ch];
            }
        }
    }
    (sg, sgx)
}

fn inv_std(var: &[f64], eps: f64) -> Vec<f64> {
    var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
}

fn run_bn_input_grad<T: GemmScalar>(
    eps: f64,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, hw) = dims_bchw(l1)?;
    let (x, gamma, g) = (
        contiguous::<T>(s1, l1)?,
        contiguous::<T>(s2, l2)?,
        contiguous::<T>(s3, l3)?,
    );
    let (mean, var) = channel_stats(x, b, c, hw);
    let r = inv_std(&var, eps);
    let (sg, sgx) = grad_sums(x, g, b, c, hw, &mean, &r);
    let n = (b * hw) as f64;
    let mut gx = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let k = WithDType::to_f64(gamma[ch]) * r[ch];
            let off = (bi * c + ch) * hw;
            for ((o, xv), gv) in gx[off..off + hw]
                .iter_mut()
                .zip(&x[off..off + hw])
                .zip(&g[off..off + hw])
            {
                let xhat = (WithDType::to_f64(*xv) - mean[ch]) * r[ch];
                *o = cast(k * (WithDType::to_f64(*gv) - sg[ch] / n - xhat * sgx[ch] / n));
            }
        }
    }
    Ok((T::to_cpu_storage_owned(gx), l1.shape().clone()))
}

fn run_bn_param_grad<T: GemmScalar>(
    eps: f64,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, hw) = dims_bchw(l1)?;
    let (x, g) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
    let (mean, var) = channel_stats(x, b, c, hw);
    let (sg, sgx) = grad_sums(x, g, b, c, hw, &mean, &inv_std(&var, eps));
    let out: Vec<T> = sgx.iter().chain(&sg).map(|v| cast(*v)).collect();
    Ok((T::to_cpu_storage_owned(out), Shape::from((2, c))))
}

fn run_channel_stats<T: GemmScalar>(
    s1: &CpuStorage,
    l1: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, hw) = dims_bchw(l1)?;
    let (mean, var) = channel_stats(contiguous::<T>(s1, l1)?, b, c, hw);
    let out: Vec<T> = mean.iter().chain(&var).map(|v| cast(*v)).collect();
    Ok((T::to_cpu_storage_owned(out), Shape::from((2, c))))
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_bn::<T>(self.eps, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let gx = x.apply_op3_no_bwd(gamma, &g, &BatchNormInputGrad { eps: self.eps })?;
        let p = x.apply_op2_no_bwd(&g, &BatchNormParamGrad { eps: self.eps })?;
        Ok((Some(gx), Some(p.get(0)?), Some(p.get(1)?)))
    }
}

impl CustomOp3 for BatchNormInputGrad {
    fn name(&self) -> &'static str {
        "batch-norm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_bn_input_grad::<T>(self.eps, s1, l1, s2, l2, s3, l3))
    }
}

impl CustomOp2 for BatchNormParamGrad {
    fn name(&self) -> &'static str {
        "batch-norm-param-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_bn_param_grad::<T>(self.eps, s1, l1, s2, l2))
    }
}

impl CustomOp1 for ChannelStats {
    fn name(&self) -> &'static str {
        "channel-stats"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, run_channel_stats::<T>(s1, l1))
    }
}

/// Training-mode batch normalization of `[B, C, H, W]`; returns the output
/// and the `[2, C]` batch mean / biased variance (detached).
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> candle_core::Result<(Tensor, Tensor)> {
    let x = x.contiguous()?;
    let stats = x.detach().apply_op1_no_bwd(&ChannelStats)?;
    let y = x.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        BatchNormTrain { eps },
    )?;
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_reference_convolutions() {
        let dev = Device::Cpu;
        for (c, co, h, w, k, s, p) in [
            (3, 4, 7, 6, 3, 1, 1),
            (2, 3, 9, 9, 7, 2, 3),
            (4, 2, 5, 5, 1, 1, 0),
            (3, 2, 6, 8, 4, 2, 1),
        ] {
            let x =
                Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, c, h, w), &dev).unwrap()).unwrap();
            let wt =
                Var::from_tensor(&Tensor::randn(0f64, 1.0, (co, c, k, k), &dev).unwrap()).unwrap();
            let ours = conv2d(&x, &wt, s, p).unwrap();
            let reference = x.conv2d(&wt, p, s, 1, 1).unwrap();
            assert!(max_diff(&ours, &reference) < 1e-10);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let g1 = (ours * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let g2 = (reference * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(g1.get(&wt).unwrap(), g2.get(&wt).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn matches_reference_transposed_convolutions() {
        let dev = Device::Cpu;
        for (ci, co, h, w, k, s, p) in [(3, 2, 4, 5, 4, 2, 1), (2, 3, 3, 3, 3, 1, 1)] {
            let x =
                Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, ci, h, w), &dev).unwrap()).unwrap();
            let wt =
                Var::from_tensor(&Tensor::randn(0f64, 1.0, (ci, co, k, k), &dev).unwrap()).unwrap();
            let ours = conv_transpose2d(&x, &wt, s, p).unwrap();
            let reference = x.conv_transpose2d(&wt, p, 0, s, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-10);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let g1 = (ours * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let g2 = (reference * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(g1.get(&wt).unwrap(), g2.get(&wt).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn inexact_stride_gradient_matches_finite_differences() {
        // output size does not tile the input exactly, so trailing pixels are unused
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 10, 9), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 7, 7), &dev).unwrap();
        let f = |x: &Tensor| {
            conv2d(x, &w, 2, 3)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let g = conv2d(&x, &w, 2, 3)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g = g.get(&x).unwrap().clone();
        let dir = Tensor::randn(0f64, 1.0, x.dims(), &dev).unwrap();
        let eps = 1e-5;
        let plus = f(&(x.as_tensor() + (&dir * eps).unwrap()).unwrap());
        let minus = f(&(x.as_tensor() - (&dir * eps).unwrap()).unwrap());
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = (g * dir)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(
            (numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0),
            "{numeric} vs {analytic}"
        );
    }

    fn reference_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let c = gamma.dim(0).unwrap();
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let centered = x.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        let xhat = centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap();
        xhat.broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(
            &(Tensor::randn(0f64, 2.0, (3, 4, 5, 2), &dev).unwrap() + 1.0).unwrap(),
        )
        .unwrap();
        let gamma = Var::from_tensor(&Tensor::randn(1f64, 0.3, 4, &dev).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::randn(0f64, 0.3, 4, &dev).unwrap()).unwrap();
        let (ours, stats) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        let reference = reference_bn(&x, &gamma, &beta);
        assert!(max_diff(&ours, &reference) < 1e-10);
        let mean = x.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap();
        assert!(max_diff(&stats.get(0).unwrap(), &mean) < 1e-12);
        let probe = Tensor::randn(0f64, 1.0, x.dims(), &dev).unwrap();
        let g1 = (ours * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g2 = (reference * &probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [x.as_tensor(), gamma.as_tensor(), beta.as_tensor()] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn single_precision_runs() {
        let dev = Device::Cpu;
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &dev).unwrap();
        let w = Tensor::ones((1, 2, 3, 3), DType::F32, &dev).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(
            y.to_dtype(DType::F64)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[5],
            18.0
        );
    }
}
