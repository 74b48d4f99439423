//! Synthetic shapes dataset, label-ratio partitions, CutMix and paired
//! labeled/unlabeled batch sampling.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TccError};
use crate::seed::{self, Stream};
use crate::students::{ImageBatch, LabelMap};

/// Reserved "ignore" value in masks; never produced by the generator.
pub const IGNORE_INDEX: u32 = 255;

const NOISE_STD: f64 = 0.05;

/// One image with its dense class mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: u32,
    /// `[3, H, W]`, values on the 8-bit grid `q / 255`.
    pub image: Vec<f32>,
    /// `[H, W]` class indices.
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<u32>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SegSample>,
    index: HashMap<u32, usize>,
}

impl Dataset {
    pub fn new(manifest: Manifest, samples: Vec<SegSample>) -> Self {
        let index = samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        Self {
            manifest,
            samples,
            index,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.manifest.ids
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: u32) -> Result<&SegSample> {
        self.index
            .get(&id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| TccError::Config(format!("unknown sample id {id}")))
    }

    pub fn images(&self, ids: &[u32], device: &Device) -> Result<ImageBatch> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        let mut data = Vec::with_capacity(ids.len() * 3 * h * w);
        for &id in ids {
            data.extend_from_slice(&self.sample(id)?.image);
        }
        ImageBatch::new(Tensor::from_vec(data, (ids.len(), 3, h, w), device)?)
    }

    pub fn masks(&self, ids: &[u32]) -> Result<LabelMap> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        let mut data = Vec::with_capacity(ids.len() * h * w);
        for &id in ids {
            data.extend(self.sample(id)?.mask.iter().map(|&c| u32::from(c)));
        }
        LabelMap::new(data, ids.len(), h, w)
    }

    pub fn labeled_batch(&self, ids: &[u32], device: &Device) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            ids: ids.to_vec(),
            images: self.images(ids, device)?,
            masks: self.masks(ids)?,
        })
    }

    /// Images only: the masks of unlabeled samples are never touched.
    pub fn unlabeled_batch(&self, ids: &[u32], device: &Device) -> Result<UnlabeledBatch> {
        Ok(UnlabeledBatch {
            ids: ids.to_vec(),
            images: self.images(ids, device)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 3] = [[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.85]];
    if class >= 1 && class <= PALETTE.len() {
        return PALETTE[class - 1];
    }
    // golden-angle hues for extra classes
    let hue = (class as f64 * 0.618_033_988_75).fract();
    let x = |offset: f64| 0.5 + 0.35 * (std::f64::consts::TAU * (hue + offset)).cos();
    [x(0.0), x(1.0 / 3.0), x(2.0 / 3.0)]
}

fn shape_kind(class: usize) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Disk,
        _ => ShapeKind::Triangle,
    }
}

/// Rasterizes one shape centred on pixel `(ci, cj)`; the centre pixel is always covered.
fn shape_pixels(kind: ShapeKind, ci: usize, cj: usize, extent: f64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (cy, cx) = (ci as f64 + 0.5, cj as f64 + 0.5);
    let mut inside: Box<dyn FnMut(f64, f64) -> bool> = match kind {
        ShapeKind::Rectangle => {
            let half_h = (extent * rng.random_range(0.5..1.0)).floor().max(0.0);
            let half_w = (extent * rng.random_range(0.5..1.0)).floor().max(0.0);
            Box::new(move |y, x| (y - cy).abs() <= half_h + 0.5 && (x - cx).abs() <= half_w + 0.5)
        }
        ShapeKind::Disk => {
            let r = (extent * rng.random_range(0.7..1.0)).max(0.5);
            Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        }
        ShapeKind::Triangle => {
            // vertices on a circle around the centre; the centre lies inside
            let r = extent.max(0.5) * 1.3;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let v: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = phase + k as f64 * std::f64::consts::TAU / 3.0;
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Box::new(move |y, x| {
                let edge = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d0 = edge(v[0], v[1]);
                let d1 = edge(v[1], v[2]);
                let d2 = edge(v[2], v[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            })
        }
    };
    let mut pixels = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if inside(i as f64 + 0.5, j as f64 + 0.5) {
                pixels.push(i * w + j);
            }
        }
    }
    pixels
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Generates `n` images, each with one to three coloured shapes on a random background.
///
/// Shape type and base colour follow the class; colour is jittered per shape.
/// The shape painted last always carries class `1 + id % (K - 1)`, so every
/// foreground class occurs once `n >= K - 1`. Masks follow painting order.
pub fn generate_shapes_dataset(n: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || height == 0 || width == 0 {
        return Err(TccError::Config(format!(
            "invalid dataset dimensions n={n} size={height}x{width}"
        )));
    }
    if !(2..IGNORE_INDEX as usize).contains(&num_classes) {
        return Err(TccError::Config(format!(
            "num_classes must be in [2, {IGNORE_INDEX}), got {num_classes}"
        )));
    }
    let mut rng = seed::rng(seed, Stream::Data);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let plane = height * width;
    let base_extent = height.min(width) as f64;
    let mut samples = Vec::with_capacity(n);
    for id in 0..n as u32 {
        let mut rgb = vec![0f64; 3 * plane];
        let mut mask = vec![0u8; plane];
        let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let tilt: [f64; 3] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
        for c in 0..3 {
            for i in 0..height {
                let shade = bg[c] + tilt[c] * (i as f64 / height as f64 - 0.5);
                rgb[c * plane + i * width..c * plane + (i + 1) * width].fill(shade);
            }
        }
        let count = rng.random_range(1..=3usize);
        for s in 0..count {
            let class = if s + 1 == count {
                1 + id as usize % (num_classes - 1)
            } else {
                rng.random_range(1..num_classes)
            };
            let base = class_color(class);
            let color: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.2..0.2)).collect();
            let extent = base_extent * rng.random_range(0.08..0.22);
            let ci = rng.random_range(0..height);
            let cj = rng.random_range(0..width);
            for p in shape_pixels(shape_kind(class), ci, cj, extent, height, width, &mut rng) {
                mask[p] = class as u8;
                for c in 0..3 {
                    rgb[c * plane + p] = color[c];
                }
            }
        }
        let image = rgb.iter().map(|&v| quantize(v + noise.sample(&mut rng))).collect();
        samples.push(SegSample { id, image, mask });
    }
    let manifest = Manifest {
        ids: (0..n as u32).collect(),
        num_classes,
        height,
        width,
        seed,
    };
    Ok(Dataset::new(manifest, samples))
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let (h, w) = (dataset.manifest.height, dataset.manifest.width);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let plane = h * w;
    for s in &dataset.samples {
        let mut rgb = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                rgb[p * 3 + c] = (s.image[c * plane + p] * 255.0).round() as u8;
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized to image");
        img.save(dir.join("images").join(format!("{}.png", s.id)))?;
        let mask = image::GrayImage::from_raw(w as u32, h as u32, s.mask.clone()).expect("buffer sized to mask");
        mask.save(dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&dataset.manifest)? + "\n")?;
    Ok(())
}

/// Generates and saves a dataset into `dir`. A non-empty `dir` is refused
/// unless `force`, in which case previous dataset files are replaced.
pub fn write_generated_dataset(
    dir: &Path,
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    force: bool,
) -> Result<Dataset> {
    let dataset = generate_shapes_dataset(n, size, size, num_classes, seed)?;
    let non_empty = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if non_empty {
        if !force {
            return Err(TccError::Config(format!(
                "{} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
        for sub in ["images", "masks"] {
            if dir.join(sub).is_dir() {
                fs::remove_dir_all(dir.join(sub))?;
            }
        }
    }
    save_dataset(&dataset, dir)?;
    Ok(dataset)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let bad = |reason: String| TccError::Dataset {
        path: dir.to_path_buf(),
        reason,
    };
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(bad("missing manifest.json".into()));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let (h, w) = (manifest.height, manifest.width);
    let plane = h * w;
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for &id in &manifest.ids {
        let rgb = image::open(dir.join("images").join(format!("{id}.png")))?.to_rgb8();
        let mask = image::open(dir.join("masks").join(format!("{id}.png")))?.to_luma8();
        if rgb.dimensions() != (w as u32, h as u32) || mask.dimensions() != (w as u32, h as u32) {
            return Err(bad(format!("sample {id} is not {w}x{h}")));
        }
        let raw = rgb.into_raw();
        let mut image = vec![0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                image[c * plane + p] = f32::from(raw[p * 3 + c]) / 255.0;
            }
        }
        let mask = mask.into_raw();
        if let Some(&c) = mask.iter().find(|&&c| c as usize >= manifest.num_classes && u32::from(c) != IGNORE_INDEX) {
            return Err(bad(format!("sample {id} has class {c} >= {}", manifest.num_classes)));
        }
        samples.push(SegSample { id, image, mask });
    }
    Ok(Dataset::new(manifest, samples))
}

/// A labeled fraction written as `num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(TccError::Config(format!(
                "label ratio must be in (0, 1], got {num}/{den}"
            )));
        }
        Ok(Self { num, den })
    }

    /// `floor(ratio * n)`.
    pub fn of(&self, n: usize) -> usize {
        n * self.num as usize / self.den as usize
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = TccError;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| TccError::Config(format!("invalid ratio `{s}`")))
        };
        match s.split_once('/') {
            Some((n, d)) => Ratio::new(parse(n)?, parse(d)?),
            None => Ratio::new(parse(s)?, 1),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = TccError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labeled_ids: Vec<u32>,
    pub unlabeled_ids: Vec<u32>,
    pub ratio: Ratio,
    pub seed: u64,
}

/// Shuffles `ids` under `seed` and keeps the first `floor(ratio * n)` as labeled.
pub fn partition(ids: &[u32], ratio: Ratio, seed: u64) -> Partition {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seed::rng(seed, Stream::Partition));
    let cut = ratio.of(ids.len());
    let mut labeled_ids = shuffled[..cut].to_vec();
    let mut unlabeled_ids = shuffled[cut..].to_vec();
    labeled_ids.sort_unstable();
    unlabeled_ids.sort_unstable();
    Partition {
        labeled_ids,
        unlabeled_ids,
        ratio,
        seed,
    }
}

const PARTITION_SEPARATOR: &str = "--";

impl Partition {
    /// Labeled ids one per line, a `--` line, then unlabeled ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for id in &self.labeled_ids {
            out.push_str(&format!("{id}\n"));
        }
        out.push_str(PARTITION_SEPARATOR);
        out.push('\n');
        for id in &self.unlabeled_ids {
            out.push_str(&format!("{id}\n"));
        }
        out
    }

    /// Parses [`Partition::to_text`]; ratio and seed are not stored in the file.
    pub fn from_text(text: &str, ratio: Ratio, seed: u64) -> Result<Self> {
        let mut labeled_ids = Vec::new();
        let mut unlabeled_ids = Vec::new();
        let mut seen_separator = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line == PARTITION_SEPARATOR {
                if seen_separator {
                    return Err(TccError::Config("partition file has two separators".into()));
                }
                seen_separator = true;
                continue;
            }
            let id = line
                .parse::<u32>()
                .map_err(|_| TccError::Config(format!("bad id `{line}` in partition file")))?;
            if seen_separator {
                unlabeled_ids.push(id);
            } else {
                labeled_ids.push(id);
            }
        }
        if !seen_separator {
            return Err(TccError::Config("partition file lacks the `--` separator".into()));
        }
        Ok(Self {
            labeled_ids,
            unlabeled_ids,
            ratio,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }
}

/// Axis-aligned box `[y0, y0+h) x [x0, x0+w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl MixBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.y0 && i < self.y0 + self.h && j >= self.x0 && j < self.x0 + self.w
    }

    /// Area fraction `beta ~ U(0, 1)`, side lengths `sqrt(beta)` of the image sides,
    /// placed uniformly so the box lies fully inside.
    pub fn sample(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let beta: f64 = rng.random();
        let side = beta.sqrt();
        let h = ((height as f64 * side).floor() as usize).min(height);
        let w = ((width as f64 * side).floor() as usize).min(width);
        let y0 = rng.random_range(0..=height - h);
        let x0 = rng.random_range(0..=width - w);
        Self { y0, x0, h, w }
    }
}

/// Per-image boxes used to paste image `perm[b]` into image `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutMix {
    pub boxes: Vec<MixBox>,
}

impl CutMix {
    pub fn sample(batch: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            boxes: (0..batch).map(|_| MixBox::sample(height, width, rng)).collect(),
        }
    }

    fn box_mask(&self, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut m = vec![0f32; self.boxes.len() * h * w];
        for (b, bx) in self.boxes.iter().enumerate() {
            for i in bx.y0..bx.y0 + bx.h {
                m[(b * h + i) * w + bx.x0..(b * h + i) * w + bx.x0 + bx.w].fill(1.0);
            }
        }
        Ok(Tensor::from_vec(m, (self.boxes.len(), 1, h, w), device)?.to_dtype(dtype)?)
    }

    /// `a` outside each box, `b` inside, for `[B, C, H, W]` tensors.
    pub fn mix_tensor(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(TccError::shape("cutmix", format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let (n, _, h, w) = a.dims4()?;
        if n != self.boxes.len() {
            return Err(TccError::shape("cutmix", format!("{n} images but {} boxes", self.boxes.len())));
        }
        let m = self.box_mask(h, w, a.dtype(), a.device())?;
        let keep = m.affine(-1.0, 1.0)?;
        Ok((a.broadcast_mul(&keep)? + b.broadcast_mul(&m)?)?)
    }

    pub fn mix_labels(&self, a: &LabelMap, b: &LabelMap) -> Result<LabelMap> {
        if (a.batch, a.height, a.width) != (b.batch, b.height, b.width) || a.batch != self.boxes.len() {
            return Err(TccError::shape("cutmix", "label maps and boxes disagree".to_string()));
        }
        let mut data = a.data.clone();
        for (n, bx) in self.boxes.iter().enumerate() {
            for i in bx.y0..bx.y0 + bx.h {
                for j in bx.x0..bx.x0 + bx.w {
                    data[(n * a.height + i) * a.width + j] = b.get(n, i, j);
                }
            }
        }
        LabelMap::new(data, a.batch, a.height, a.width)
    }

    pub fn mix_images(&self, a: &ImageBatch, b: &ImageBatch) -> Result<ImageBatch> {
        ImageBatch::new(self.mix_tensor(a.tensor(), b.tensor())?)
    }
}

/// Rotates the batch by one so image `b` is paired with image `b + 1`.
pub fn roll_batch(t: &Tensor) -> Result<Tensor> {
    let n = t.dims()[0];
    if n < 2 {
        return Ok(t.clone());
    }
    Ok(Tensor::cat(&[t.narrow(0, 1, n - 1)?, t.narrow(0, 0, 1)?], 0)?)
}

pub fn roll_labels(l: &LabelMap) -> LabelMap {
    let plane = l.height * l.width;
    let mut data = l.data[plane.min(l.data.len())..].to_vec();
    data.extend_from_slice(&l.data[..plane.min(l.data.len())]);
    LabelMap {
        data,
        ..l.clone()
    }
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub ids: Vec<u32>,
    pub images: ImageBatch,
    pub masks: LabelMap,
}

/// Unlabeled images; there is deliberately no mask field.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub ids: Vec<u32>,
    pub images: ImageBatch,
}

/// Endless sampling without replacement within an epoch; each epoch is a
/// fresh permutation and batches may straddle epoch boundaries.
///
/// The batch at iteration `t` is a pure function of `(seed, t)`, so a resumed
/// run continues the exact sequence.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    ids: Vec<u32>,
    batch_size: usize,
    seed: u64,
    stream: Stream,
    cached: Option<(u64, Vec<u32>)>,
}

impl EpochSampler {
    pub fn new(ids: Vec<u32>, batch_size: usize, seed: u64, stream: Stream) -> Result<Self> {
        if ids.is_empty() || batch_size == 0 {
            return Err(TccError::Config(
                "sampler needs a non-empty set and a positive batch size".into(),
            ));
        }
        if batch_size > ids.len() {
            log::warn!(
                "batch size {batch_size} exceeds set size {}; samples repeat within a batch",
                ids.len()
            );
        }
        Ok(Self {
            ids,
            batch_size,
            seed,
            stream,
            cached: None,
        })
    }

    fn epoch_order(&mut self, epoch: u64) -> &[u32] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order = self.ids.clone();
            order.shuffle(&mut seed::rng_at(self.seed, self.stream, epoch));
            self.cached = Some((epoch, order));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    pub fn batch_ids(&mut self, iteration: u64) -> Vec<u32> {
        let n = self.ids.len() as u64;
        let start = iteration * self.batch_size as u64;
        (start..start + self.batch_size as u64)
            .map(|pos| self.epoch_order(pos / n)[(pos % n) as usize])
            .collect()
    }
}

/// Per-iteration pairs of one labeled batch and (in semi-supervised mode) one unlabeled batch.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    labeled: EpochSampler,
    unlabeled: Option<EpochSampler>,
    device: Device,
    iteration: u64,
}

impl<'a> BatchIterator<'a> {
    /// `unlabeled_ids` may be empty only when `use_unlabeled` is false.
    pub fn new(
        dataset: &'a Dataset,
        partition: &Partition,
        batch_size: usize,
        unlabeled_batch_size: usize,
        use_unlabeled: bool,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        let labeled = EpochSampler::new(partition.labeled_ids.clone(), batch_size, seed, Stream::LabeledOrder)?;
        let unlabeled = if use_unlabeled {
            if partition.unlabeled_ids.is_empty() {
                return Err(TccError::Config(
                    "semi-supervised training needs a non-empty unlabeled set".into(),
                ));
            }
            Some(EpochSampler::new(
                partition.unlabeled_ids.clone(),
                unlabeled_batch_size,
                seed,
                Stream::UnlabeledOrder,
            )?)
        } else {
            None
        };
        Ok(Self {
            dataset,
            labeled,
            unlabeled,
            device: device.clone(),
            iteration: 0,
        })
    }

    /// Positions the stream so the next item is iteration `t`.
    pub fn seek(&mut self, t: u64) {
        self.iteration = t;
    }

    pub fn batch_at(&mut self, t: u64) -> Result<(LabeledBatch, Option<UnlabeledBatch>)> {
        let lab_ids = self.labeled.batch_ids(t);
        let labeled = self.dataset.labeled_batch(&lab_ids, &self.device)?;
        let unlabeled = match self.unlabeled.as_mut() {
            Some(s) => {
                let ids = s.batch_ids(t);
                Some(self.dataset.unlabeled_batch(&ids, &self.device)?)
            }
            None => None,
        };
        Ok((labeled, unlabeled))
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<(LabeledBatch, Option<UnlabeledBatch>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let t = self.iteration;
        self.iteration += 1;
        Some(self.batch_at(t))
    }
}

/// Directory holding a persisted dataset, validated on access.
pub fn require_dataset_dir(path: &Path) -> Result<PathBuf> {
    if path.join("manifest.json").is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(TccError::Dataset {
            path: path.to_path_buf(),
            reason: "no manifest.json found".into(),
        })
    }
}
