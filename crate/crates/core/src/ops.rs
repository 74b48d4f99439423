//! Tensor building blocks shared by both students and the losses.
//!
//! Convolutions run channels-last: an im2col gather feeds a single matmul.
//! The gather is a custom op whose backward pass is the matching col2im
//! scatter-add, so gradients flow to both the input and the kernel.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Result, TccError};

/// Geometry of a square-kernel convolution over a channels-last input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> (usize, usize) {
        let out = |n: usize| {
            (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
        };
        (out(self.height), out(self.width))
    }

    fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn check(&self) -> Result<()> {
        let reach = self.dilation * (self.kernel - 1) + 1;
        if self.stride == 0 || self.kernel == 0 || self.dilation == 0 {
            return Err(TccError::Config(
                "kernel, stride and dilation must be positive".into(),
            ));
        }
        if self.height + 2 * self.padding < reach || self.width + 2 * self.padding < reach {
            return Err(TccError::shape(
                "conv2d",
                format!(
                    "kernel reach {reach} exceeds padded input {}x{}",
                    self.height + 2 * self.padding,
                    self.width + 2 * self.padding
                ),
            ));
        }
        Ok(())
    }

    /// Visits every (column-row offset, input offset) pair that lands inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.output_hw();
        let row = self.row_len();
        for b in 0..self.batch {
            for oi in 0..ho {
                for oj in 0..wo {
                    let base = ((b * ho + oi) * wo + oj) * row;
                    for ki in 0..self.kernel {
                        let ii = (oi * self.stride + ki * self.dilation) as isize
                            - self.padding as isize;
                        if ii < 0 || ii >= self.height as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let jj = (oj * self.stride + kj * self.dilation) as isize
                                - self.padding as isize;
                            if jj < 0 || jj >= self.width as isize {
                                continue;
                            }
                            let src =
                                ((b * self.height + ii as usize) * self.width + jj as usize)
                                    * self.channels;
                            f(base + (ki * self.kernel + kj) * self.channels, src);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.output_hw();
    let c = g.channels;
    let mut out = vec![T::zero(); g.batch * ho * wo * g.row_len()];
    g.for_each_tap(|dst, src| out[dst..dst + c].copy_from_slice(&input[src..src + c]));
    out
}

fn col2im<T: WithDType>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let c = g.channels;
    let mut out = vec![T::zero(); g.batch * g.height * g.width * c];
    g.for_each_tap(|col, img| {
        for (o, v) in out[img..img + c].iter_mut().zip(&cols[col..col + c]) {
            *o += *v;
        }
    });
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous tensor"),
    }
}

macro_rules! map_float_storage {
    ($storage:expr, $layout:expr, $f:ident, $g:expr) => {
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous_slice(v, $layout)?, $g)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous_slice(v, $layout)?, $g)),
            other => { let _ = other; candle_core::bail!("conv supports f32 and f64 only") },
        }
    };
}

struct Im2Col(ConvGeometry);
struct Col2Im(ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (ho, wo) = g.output_hw();
        let out = map_float_storage!(storage, layout, im2col, g);
        Ok((out, Shape::from((g.batch * ho * wo, g.row_len()))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = map_float_storage!(storage, layout, col2im, g);
        Ok((out, Shape::from((g.batch, g.height, g.width, g.channels))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Channels-last convolution.
///
/// `input` is `[B, H, W, C]`, `weight` is `[C_out, k*k*C]` with the kernel
/// laid out as `(ki, kj, c)`, `bias` is `[C_out]`. Returns `[B, H_out, W_out, C_out]`.
pub fn conv2d_nhwc(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let (batch, height, width, channels) = input.dims4()?;
    let geometry = ConvGeometry {
        batch,
        height,
        width,
        channels,
        kernel,
        stride,
        padding,
        dilation,
    };
    geometry.check()?;
    let (out_ch, row) = weight.dims2()?;
    if row != geometry.row_len() {
        return Err(TccError::shape(
            "conv2d",
            format!(
                "weight row {row} != k*k*C = {} for input {:?}",
                geometry.row_len(),
                input.dims()
            ),
        ));
    }
    let (ho, wo) = geometry.output_hw();
    let cols = input.contiguous()?.apply_op1(Im2Col(geometry))?;
    let out = cols.matmul(&weight.t()?)?.broadcast_add(bias)?;
    Ok(out.reshape((batch, ho, wo, out_ch))?)
}

/// Interpolation matrix `[out, in]` for 1-D linear resampling with half-pixel
/// centres (the `align_corners = false` convention).
pub fn linear_resize_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

fn resize_matrix_tensor(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = linear_resize_matrix(in_len, out_len);
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a `[B, C, h, w]` map to `[B, C, out_h, out_w]`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let aw = resize_matrix_tensor(w, out_w, x.dtype(), x.device())?;
    let ah = resize_matrix_tensor(h, out_h, x.dtype(), x.device())?;
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw.t()?)?;
    let cols = rows
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ah.t()?)?;
    Ok(cols
        .reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?)
}

/// `e^x` for f32 by range reduction and a degree-6 polynomial (max relative
/// error about 2e-7); unlike `f32::exp` it vectorizes.
#[inline]
#[allow(clippy::manual_clamp)]
fn fast_exp(x: f32) -> f32 {
    let x = if x < -87.3 { -87.3 } else if x > 88.7 { 88.7 } else { x };
    // round to nearest via the 1.5 * 2^23 trick
    const SHIFT: f32 = 12_582_912.0;
    let n = (x * std::f32::consts::LOG2_E + SHIFT) - SHIFT;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67
                    + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

trait SoftmaxFloat: WithDType + num_traits::Float {
    fn exp_fast(self) -> Self;
}

impl SoftmaxFloat for f32 {
    fn exp_fast(self) -> Self {
        fast_exp(self)
    }
}

impl SoftmaxFloat for f64 {
    fn exp_fast(self) -> Self {
        self.exp()
    }
}

fn softmax_rows<T: SoftmaxFloat>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mut max = T::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp_fast();
        }
        let inv = T::one() / dst.iter().fold(T::zero(), |acc, &d| acc + d);
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

fn softmax_grad_rows<T: SoftmaxFloat>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dst) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    out
}

/// Softmax over the last dimension of a contiguous tensor.
struct SoftmaxLast;
/// `y * (g - sum(g * y))` over the last dimension.
struct SoftmaxLastGrad;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = layout.dims().last().copied().unwrap_or(1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous_slice(v, layout)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous_slice(v, layout)?, n)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxLastGrad)?))
    }
}

impl CustomOp2 for SoftmaxLastGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l1.dims().last().copied().unwrap_or(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous_slice(y, l1)?, contiguous_slice(g, l2)?, n))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous_slice(y, l1)?, contiguous_slice(g, l2)?, n))
            }
            _ => candle_core::bail!("softmax grad: mismatched or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax along `dim`, max-shifted for stability.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    if dim + 1 == x.rank() {
        return Ok(x.contiguous()?.apply_op1(SoftmaxLast)?);
    }
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Per-pixel argmax over dim 1 of `[B, K, H, W]`, ties going to the lowest index.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u32>> {
    let (b, k, h, w) = logits.dims4()?;
    let values: Vec<f64> = logits
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let plane = h * w;
    let mut out = vec![0u32; b * plane];
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            let mut best = values[base + p];
            let mut arg = 0u32;
            for c in 1..k {
                let v = values[base + c * plane + p];
                if v > best {
                    best = v;
                    arg = c as u32;
                }
            }
            out[bi * plane + p] = arg;
        }
    }
    Ok(out)
}

/// One-hot encoding of flat class indices as a `[B, K, P]` float tensor.
pub fn one_hot(labels: &[u32], batch: usize, num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let plane = labels.len() / batch.max(1);
    let mut data = vec![0f64; batch * num_classes * plane];
    for (i, &c) in labels.iter().enumerate() {
        let c = c as usize;
        if c >= num_classes {
            return Err(TccError::ClassOutOfRange {
                class: c as u32,
                num_classes,
            });
        }
        let (b, p) = (i / plane, i % plane);
        data[(b * num_classes + c) * plane + p] = 1.0;
    }
    Ok(Tensor::from_vec(data, (batch, num_classes, plane), device)?.to_dtype(dtype)?)
}
