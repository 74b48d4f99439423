//! The two heterogeneous students of the cohort.
//!
//! Both map an image batch to a stride-4 feature map, full-resolution logits
//! and argmax pseudo labels. The convolutional student stacks 3x3 conv stages
//! (two strided, the rest dilated); the attention student patch-embeds the
//! image and runs pre-norm multi-head self-attention blocks.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TccError};
use crate::ops;
use crate::params::{Initializer, ParamStore};

/// Images `[B, C_in, H, W]` with finite values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(TccError::shape(
                "image batch",
                format!("expected [B, C, H, W], got {:?}", data.dims()),
            ));
        }
        let values: Vec<f64> = data.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TccError::Config("image batch contains non-finite values".into()));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn batch_size(&self) -> usize {
        self.0.dims()[0]
    }
}

/// Per-pixel class indices `[B, H, W]` stored row-major.
///
/// These are plain integers, so nothing computed from them can carry a
/// gradient back into the logits they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub data: Vec<u32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl LabelMap {
    pub fn new(data: Vec<u32>, batch: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(TccError::shape(
                "label map",
                format!("{} values for [{batch}, {height}, {width}]", data.len()),
            ));
        }
        Ok(Self {
            data,
            batch,
            height,
            width,
        })
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> u32 {
        self.data[(b * self.height + i) * self.width + j]
    }

    pub fn image(&self, b: usize) -> &[u32] {
        let plane = self.height * self.width;
        &self.data[b * plane..(b + 1) * plane]
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c as usize >= num_classes) {
            Some(&class) => Err(TccError::ClassOutOfRange { class, num_classes }),
            None => Ok(()),
        }
    }
}

/// Features, logits and pseudo labels emitted by one student.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    /// `[B, D, h, w]`, the last backbone stage.
    pub features: Tensor,
    /// `[B, K, H, W]`.
    pub logits: Tensor,
    /// Argmax of `logits`, `[B, H, W]`.
    pub pseudo_labels: LabelMap,
}

/// Per-pixel argmax of `[B, K, H, W]` logits; ties go to the lowest class.
pub fn pseudo_labels(logits: &Tensor) -> Result<LabelMap> {
    let (b, _, h, w) = logits.dims4()?;
    LabelMap::new(ops::argmax_classes(logits)?, b, h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Conv,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    /// Output channels per stage; the last one is the feature width D.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 64, 64],
            strides: vec![2, 2, 1, 1],
            dilations: vec![1, 1, 2, 2],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEmbedding {
    Learned,
    /// No positional signal; the token mixer is then permutation-equivariant.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub positional: PositionalEmbedding,
    /// Token grid the learned positional table is sized for.
    pub image_size: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            mlp_ratio: 2,
            positional: PositionalEmbedding::Learned,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Conv(ConvConfig),
    Attention(AttentionConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub arch: Architecture,
}

impl StudentConfig {
    pub fn conv(num_classes: usize, conv: ConvConfig) -> Self {
        Self {
            num_classes,
            in_channels: 3,
            arch: Architecture::Conv(conv),
        }
    }

    pub fn attention(num_classes: usize, attention: AttentionConfig) -> Self {
        Self {
            num_classes,
            in_channels: 3,
            arch: Architecture::Attention(attention),
        }
    }

    pub fn kind(&self) -> StudentKind {
        match self.arch {
            Architecture::Conv(_) => StudentKind::Conv,
            Architecture::Attention(_) => StudentKind::Attention,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.arch {
            Architecture::Conv(c) => c.widths.last().copied().unwrap_or(0),
            Architecture::Attention(a) => a.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(TccError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        match &self.arch {
            Architecture::Conv(c) => {
                let n = c.widths.len();
                if n == 0 || c.strides.len() != n || c.dilations.len() != n {
                    return Err(TccError::Config(
                        "conv widths, strides and dilations must be non-empty and equally long"
                            .into(),
                    ));
                }
                if c.kernel % 2 == 0 || c.widths.contains(&0) {
                    return Err(TccError::Config("conv kernel must be odd, widths positive".into()));
                }
            }
            Architecture::Attention(a) => {
                if a.patch_size == 0 || a.num_heads == 0 || a.embed_dim % a.num_heads != 0 {
                    return Err(TccError::Config(format!(
                        "embed_dim {} must be divisible by num_heads {}",
                        a.embed_dim, a.num_heads
                    )));
                }
                if a.image_size % a.patch_size != 0 {
                    return Err(TccError::Config(format!(
                        "image size {} not divisible by patch size {}",
                        a.image_size, a.patch_size
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_channels(batch: &ImageBatch, expected: usize) -> Result<()> {
    let (_, c, _, _) = batch.dims();
    if c != expected {
        return Err(TccError::shape(
            "student forward",
            format!("expected {expected} input channels, got {c}"),
        ));
    }
    Ok(())
}

/// Splits `[B, C, H, W]` into non-overlapping `p x p` patches: `[B, N, C*p*p]`,
/// tokens in raster order, each patch flattened channel-major.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(TccError::Config(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(images
        .reshape(&[b, c, gh, p, gw, p][..])?
        .permute(&[0, 2, 4, 1, 3, 5][..])?
        .contiguous()?
        .reshape((b, gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Tensor,
    patch_size: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (b, n, len) = tokens.dims3()?;
    let p = patch_size;
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) || n != (height / p) * (width / p) || len != channels * p * p {
        return Err(TccError::shape(
            "unpatchify",
            format!("tokens {:?} do not tile {channels}x{height}x{width} with patch {p}", tokens.dims()),
        ));
    }
    let (gh, gw) = (height / p, width / p);
    Ok(tokens
        .reshape(&[b, gh, gw, channels, p, p][..])?
        .permute(&[0, 3, 1, 4, 2, 5][..])?
        .contiguous()?
        .reshape((b, channels, height, width))?)
}

struct ConvStage {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    dilation: usize,
}

pub struct ConvStudent {
    config: StudentConfig,
    kernel: usize,
    stages: Vec<ConvStage>,
    head_weight: Tensor,
    head_bias: Tensor,
    params: ParamStore,
}

impl ConvStudent {
    pub fn new(config: StudentConfig, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let conv = match &config.arch {
            Architecture::Conv(c) => c.clone(),
            Architecture::Attention(_) => {
                return Err(TccError::Config("ConvStudent needs a conv config".into()))
            }
        };
        let mut init = Initializer { rng, dtype, device };
        let mut params = ParamStore::new();
        let k = conv.kernel;
        let mut in_ch = config.in_channels;
        let mut stages = Vec::with_capacity(conv.widths.len());
        for (i, ((&width, &stride), &dilation)) in conv
            .widths
            .iter()
            .zip(&conv.strides)
            .zip(&conv.dilations)
            .enumerate()
        {
            let fan_in = k * k * in_ch;
            let weight = params.insert(
                format!("cnn.stage{i}.weight"),
                init.fan_in_normal(&[width, fan_in], fan_in)?,
            );
            let bias = params.insert(format!("cnn.stage{i}.bias"), init.zeros(&[width])?);
            stages.push(ConvStage {
                weight,
                bias,
                stride,
                dilation,
            });
            in_ch = width;
        }
        let head_weight = params.insert(
            "cnn.head.weight",
            init.fan_in_normal(&[config.num_classes, in_ch], in_ch)?,
        );
        let head_bias = params.insert("cnn.head.bias", init.zeros(&[config.num_classes])?);
        Ok(Self {
            config,
            kernel: k,
            stages,
            head_weight,
            head_bias,
            params,
        })
    }

    pub fn forward(&self, batch: &ImageBatch) -> Result<StudentOutput> {
        check_channels(batch, self.config.in_channels)?;
        let (_, _, height, width) = batch.dims();
        let mut x = batch.tensor().permute((0, 2, 3, 1))?.contiguous()?;
        for stage in &self.stages {
            let pad = stage.dilation * (self.kernel / 2);
            x = ops::conv2d_nhwc(&x, &stage.weight, &stage.bias, self.kernel, stage.stride, pad, stage.dilation)?
                .relu()?;
        }
        let (b, h, w, d) = x.dims4()?;
        let k = self.config.num_classes;
        let small = x
            .reshape((b * h * w, d))?
            .matmul(&self.head_weight.t()?)?
            .broadcast_add(&self.head_bias)?
            .reshape((b, h, w, k))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let logits = ops::resize_bilinear(&small, height, width)?;
        let features = x.permute((0, 3, 1, 2))?.contiguous()?;
        let pseudo_labels = pseudo_labels(&logits)?;
        Ok(StudentOutput {
            features,
            logits,
            pseudo_labels,
        })
    }
}

struct AttentionBlock {
    norm1_gamma: Tensor,
    norm1_beta: Tensor,
    qkv_weight: Tensor,
    qkv_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
    norm2_gamma: Tensor,
    norm2_beta: Tensor,
    fc1_weight: Tensor,
    fc1_bias: Tensor,
    fc2_weight: Tensor,
    fc2_bias: Tensor,
}

const LN_EPS: f64 = 1e-6;

fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

impl AttentionBlock {
    /// `x` is `[B, N, E]`.
    fn forward(&self, x: &Tensor, num_heads: usize) -> Result<Tensor> {
        let (b, n, e) = x.dims3()?;
        let dh = e / num_heads;
        let flat = x.reshape((b * n, e))?;
        let h = ops::layer_norm(&flat, &self.norm1_gamma, &self.norm1_beta, LN_EPS)?;
        let qkv = linear(&h, &self.qkv_weight, &self.qkv_bias)?
            .reshape(&[b, n, 3, num_heads, dh][..])?
            .permute(&[2, 0, 3, 1, 4][..])?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let scores = (q.matmul(&k.t()?)? * scale)?;
        let attn = ops::softmax(&scores, 3)?;
        let mixed = attn
            .matmul(&v)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b * n, e))?;
        let x = (flat + linear(&mixed, &self.proj_weight, &self.proj_bias)?)?;
        let h = ops::layer_norm(&x, &self.norm2_gamma, &self.norm2_beta, LN_EPS)?;
        let h = linear(&h, &self.fc1_weight, &self.fc1_bias)?.gelu_erf()?;
        let x = (x + linear(&h, &self.fc2_weight, &self.fc2_bias)?)?;
        Ok(x.reshape((b, n, e))?)
    }
}

pub struct AttentionStudent {
    config: StudentConfig,
    attention: AttentionConfig,
    embed_weight: Tensor,
    embed_bias: Tensor,
    positional: Option<Tensor>,
    blocks: Vec<AttentionBlock>,
    norm_gamma: Tensor,
    norm_beta: Tensor,
    head_weight: Tensor,
    head_bias: Tensor,
    params: ParamStore,
}

impl AttentionStudent {
    pub fn new(config: StudentConfig, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let attention = match &config.arch {
            Architecture::Attention(a) => a.clone(),
            Architecture::Conv(_) => {
                return Err(TccError::Config("AttentionStudent needs an attention config".into()))
            }
        };
        let mut init = Initializer { rng, dtype, device };
        let mut params = ParamStore::new();
        let e = attention.embed_dim;
        let patch_len = config.in_channels * attention.patch_size * attention.patch_size;
        let grid = attention.image_size / attention.patch_size;
        let std = 0.02;

        let embed_weight = params.insert("vit.embed.weight", init.truncated_normal(&[e, patch_len], std)?);
        let embed_bias = params.insert("vit.embed.bias", init.zeros(&[e])?);
        let positional = match attention.positional {
            PositionalEmbedding::Learned => Some(params.insert(
                "vit.pos_embed",
                init.truncated_normal(&[grid * grid, e], std)?,
            )),
            PositionalEmbedding::None => None,
        };
        let hidden = e * attention.mlp_ratio;
        let mut blocks = Vec::with_capacity(attention.num_blocks);
        for i in 0..attention.num_blocks {
            let p = |s: &str| format!("vit.block{i}.{s}");
            blocks.push(AttentionBlock {
                norm1_gamma: params.insert(p("norm1.gamma"), init.ones(&[e])?),
                norm1_beta: params.insert(p("norm1.beta"), init.zeros(&[e])?),
                qkv_weight: params.insert(p("qkv.weight"), init.truncated_normal(&[3 * e, e], std)?),
                qkv_bias: params.insert(p("qkv.bias"), init.zeros(&[3 * e])?),
                proj_weight: params.insert(p("proj.weight"), init.truncated_normal(&[e, e], std)?),
                proj_bias: params.insert(p("proj.bias"), init.zeros(&[e])?),
                norm2_gamma: params.insert(p("norm2.gamma"), init.ones(&[e])?),
                norm2_beta: params.insert(p("norm2.beta"), init.zeros(&[e])?),
                fc1_weight: params.insert(p("fc1.weight"), init.truncated_normal(&[hidden, e], std)?),
                fc1_bias: params.insert(p("fc1.bias"), init.zeros(&[hidden])?),
                fc2_weight: params.insert(p("fc2.weight"), init.truncated_normal(&[e, hidden], std)?),
                fc2_bias: params.insert(p("fc2.bias"), init.zeros(&[e])?),
            });
        }
        let norm_gamma = params.insert("vit.norm.gamma", init.ones(&[e])?);
        let norm_beta = params.insert("vit.norm.beta", init.zeros(&[e])?);
        let head_weight = params.insert(
            "vit.head.weight",
            init.truncated_normal(&[config.num_classes, e], std)?,
        );
        let head_bias = params.insert("vit.head.bias", init.zeros(&[config.num_classes])?);
        Ok(Self {
            config,
            attention,
            embed_weight,
            embed_bias,
            positional,
            blocks,
            norm_gamma,
            norm_beta,
            head_weight,
            head_bias,
            params,
        })
    }

    /// Token features after the final block and norm, `[B, N, E]`, raster order.
    pub fn token_features(&self, batch: &ImageBatch) -> Result<Tensor> {
        check_channels(batch, self.config.in_channels)?;
        let tokens = patchify(batch.tensor(), self.attention.patch_size)?;
        let (b, n, len) = tokens.dims3()?;
        let e = self.attention.embed_dim;
        let mut x = linear(&tokens.reshape((b * n, len))?, &self.embed_weight, &self.embed_bias)?
            .reshape((b, n, e))?;
        if let Some(pos) = &self.positional {
            if pos.dims()[0] != n {
                return Err(TccError::shape(
                    "vit forward",
                    format!("{n} tokens but positional table holds {}", pos.dims()[0]),
                ));
            }
            x = x.broadcast_add(pos)?;
        }
        for block in &self.blocks {
            x = block.forward(&x, self.attention.num_heads)?;
        }
        let x = ops::layer_norm(&x.reshape((b * n, e))?, &self.norm_gamma, &self.norm_beta, LN_EPS)?;
        Ok(x.reshape((b, n, e))?)
    }

    pub fn forward(&self, batch: &ImageBatch) -> Result<StudentOutput> {
        let (_, _, height, width) = batch.dims();
        let p = self.attention.patch_size;
        if height % p != 0 || width % p != 0 {
            return Err(TccError::Config(format!(
                "image {height}x{width} not divisible by patch size {p}"
            )));
        }
        let tokens = self.token_features(batch)?;
        let (b, n, e) = tokens.dims3()?;
        let (gh, gw) = (height / p, width / p);
        let k = self.config.num_classes;
        let small = linear(&tokens.reshape((b * n, e))?, &self.head_weight, &self.head_bias)?
            .reshape((b, gh, gw, k))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let logits = ops::resize_bilinear(&small, height, width)?;
        let features = tokens
            .reshape((b, gh, gw, e))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let pseudo_labels = pseudo_labels(&logits)?;
        Ok(StudentOutput {
            features,
            logits,
            pseudo_labels,
        })
    }
}

/// Either member of the cohort.
pub enum Student {
    Conv(ConvStudent),
    Attention(AttentionStudent),
}

impl Student {
    pub fn new(config: StudentConfig, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        Ok(match config.kind() {
            StudentKind::Conv => Student::Conv(ConvStudent::new(config, rng, dtype, device)?),
            StudentKind::Attention => {
                Student::Attention(AttentionStudent::new(config, rng, dtype, device)?)
            }
        })
    }

    pub fn forward(&self, batch: &ImageBatch) -> Result<StudentOutput> {
        match self {
            Student::Conv(s) => s.forward(batch),
            Student::Attention(s) => s.forward(batch),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Student::Conv(s) => &s.params,
            Student::Attention(s) => &s.params,
        }
    }

    pub fn config(&self) -> &StudentConfig {
        match self {
            Student::Conv(s) => &s.config,
            Student::Attention(s) => &s.config,
        }
    }

    pub fn kind(&self) -> StudentKind {
        self.config().kind()
    }
}
