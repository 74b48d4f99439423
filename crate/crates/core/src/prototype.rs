//! Class-aware feature consistency distillation.
//!
//! Each student's features are grouped by the *other* student's pseudo labels
//! (nearest-neighbour downsampled to the feature grid), averaged into one
//! prototype per class, broadcast back onto the class mask, and compared to
//! the pixel feature by cosine similarity. The loss is the mean squared
//! difference between the two students' similarity maps.
//!
//! Prototypes are differentiable means of the features; the labels that
//! select them are integers and carry no gradient.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TccError};
use crate::ops;
use crate::students::{LabelMap, StudentOutput};

/// Guards the cosine denominator against zero-norm features.
pub const COSINE_EPS: f64 = 1e-8;

/// Floor on squared norms so the square root stays differentiable at zero.
const NORM_SQ_FLOOR: f64 = 1e-30;

/// Whether prototypes are averaged within each image or across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeScope {
    #[default]
    Image,
    Batch,
}

/// Nearest-neighbour label downsampling:
/// `out[b, i, j] = labels[b, floor(i*H/h), floor(j*W/w)]`.
pub fn downsample_labels(labels: &LabelMap, h: usize, w: usize) -> Result<LabelMap> {
    if h == 0 || w == 0 {
        return Err(TccError::Config(format!(
            "cannot downsample labels to {h}x{w}"
        )));
    }
    let (src_h, src_w) = (labels.height, labels.width);
    let mut data = Vec::with_capacity(labels.batch * h * w);
    for b in 0..labels.batch {
        for i in 0..h {
            let si = i * src_h / h;
            for j in 0..w {
                data.push(labels.get(b, si, j * src_w / w));
            }
        }
    }
    LabelMap::new(data, labels.batch, h, w)
}

/// Per-class mean features.
#[derive(Debug, Clone)]
pub struct PrototypeTable {
    /// `[B, K, D]`; rows of absent classes are zero and must not be read.
    pub prototypes: Tensor,
    /// `|S_c|` per `(b, c)`, row-major `[B, K]`. Under batch scope every
    /// image row holds the batch-wide count.
    pub counts: Vec<usize>,
    pub num_classes: usize,
    pub scope: PrototypeScope,
}

impl PrototypeTable {
    pub fn count(&self, b: usize, class: usize) -> usize {
        self.counts[b * self.num_classes + class]
    }

    /// The prototype `T_c` for image `b`, if class `c` has members.
    pub fn get(&self, b: usize, class: usize) -> Result<Option<Vec<f64>>> {
        if self.count(b, class) == 0 {
            return Ok(None);
        }
        Ok(Some(
            self.prototypes
                .get(b)?
                .get(class)?
                .to_dtype(DType::F64)?
                .to_vec1()?,
        ))
    }
}

fn check_grid(features: &Tensor, labels: &LabelMap) -> Result<(usize, usize, usize, usize)> {
    let (b, d, h, w) = features.dims4()?;
    if labels.batch != b || labels.height != h || labels.width != w {
        return Err(TccError::shape(
            "class prototypes",
            format!(
                "features {:?} vs labels [{}, {}, {}]",
                features.dims(),
                labels.batch,
                labels.height,
                labels.width
            ),
        ));
    }
    Ok((b, d, h, w))
}

/// Masked average pooling: `T_c = (1/|S_c|) * sum_{i in S_c} f(i)`.
pub fn class_prototypes(
    features: &Tensor,
    labels: &LabelMap,
    num_classes: usize,
    scope: PrototypeScope,
) -> Result<PrototypeTable> {
    let (b, d, h, w) = check_grid(features, labels)?;
    let mask = ops::one_hot(&labels.data, b, num_classes, features.dtype(), features.device())?;
    let flat = features.reshape((b, d, h * w))?;
    // [B, K, P] x [B, P, D] -> [B, K, D]
    let mut sums = mask.matmul(&flat.transpose(1, 2)?)?;
    let mut counts = vec![0usize; b * num_classes];
    for (i, &c) in labels.data.iter().enumerate() {
        counts[(i / (h * w)) * num_classes + c as usize] += 1;
    }
    if scope == PrototypeScope::Batch {
        sums = sums.sum_keepdim(0)?.broadcast_as((b, num_classes, d))?;
        for c in 0..num_classes {
            let total: usize = (0..b).map(|bi| counts[bi * num_classes + c]).sum();
            for bi in 0..b {
                counts[bi * num_classes + c] = total;
            }
        }
    }
    let divisor: Vec<f64> = counts.iter().map(|&n| n.max(1) as f64).collect();
    let divisor = Tensor::from_vec(divisor, (b, num_classes, 1), features.device())?.to_dtype(features.dtype())?;
    Ok(PrototypeTable {
        prototypes: sums.broadcast_div(&divisor)?,
        counts,
        num_classes,
        scope,
    })
}

/// Class-aware feature map: per-pixel cosine between a feature and its class prototype.
#[derive(Debug, Clone)]
pub struct CfMap {
    /// `[B, h, w]`, entries in `[-1, 1]`.
    pub values: Tensor,
}

impl CfMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[1], d[2])
    }

    /// Nearest-neighbour resample to `h x w` using the label-grid index rule.
    pub fn resample(&self, h: usize, w: usize) -> Result<CfMap> {
        let (_, src_h, src_w) = self.dims();
        if (src_h, src_w) == (h, w) {
            return Ok(self.clone());
        }
        let device = self.values.device();
        let rows: Vec<u32> = (0..h).map(|i| (i * src_h / h) as u32).collect();
        let cols: Vec<u32> = (0..w).map(|j| (j * src_w / w) as u32).collect();
        let values = self
            .values
            .index_select(&Tensor::new(rows, device)?, 1)?
            .index_select(&Tensor::new(cols, device)?, 2)?;
        Ok(CfMap { values })
    }
}

fn safe_norm(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum(D::Minus1)?.maximum(NORM_SQ_FLOOR)?.sqrt()?)
}

/// `M(i) = <f(i), T(i)> / (|f(i)| |T(i)| + eps)` where `T(i)` is the
/// prototype of pixel `i`'s class, unpooled onto its mask.
pub fn cf_map(features: &Tensor, labels: &LabelMap, protos: &PrototypeTable) -> Result<CfMap> {
    let (b, d, h, w) = check_grid(features, labels)?;
    let k = protos.num_classes;
    for (i, &c) in labels.data.iter().enumerate() {
        if c as usize >= k || protos.count(i / (h * w), c as usize) == 0 {
            return Err(TccError::Config(format!(
                "pixel {i} has label {c} without a prototype"
            )));
        }
    }
    let mask = ops::one_hot(&labels.data, b, k, features.dtype(), features.device())?;
    // unpool: [B, P, K] x [B, K, D] -> [B, P, D]
    let unpooled = mask.transpose(1, 2)?.matmul(&protos.prototypes)?;
    let pixel = features.reshape((b, d, h * w))?.transpose(1, 2)?;
    let dot = (&pixel * &unpooled)?.sum(D::Minus1)?;
    let denom = ((safe_norm(&pixel)? * safe_norm(&unpooled)?)? + COSINE_EPS)?;
    Ok(CfMap {
        values: dot.div(&denom)?.reshape((b, h, w))?,
    })
}

/// Mean squared difference between two CF maps of equal shape.
pub fn cfcd_loss(a: &CfMap, b: &CfMap) -> Result<Tensor> {
    if a.values.dims() != b.values.dims() {
        return Err(TccError::shape(
            "cfcd loss",
            format!("{:?} vs {:?}", a.values.dims(), b.values.dims()),
        ));
    }
    Ok((&a.values - &b.values)?.sqr()?.mean_all()?)
}

/// CF map of `features` grouped by `labels`, which are brought to the feature grid first.
pub fn cross_cf_map(
    features: &Tensor,
    labels: &LabelMap,
    num_classes: usize,
    scope: PrototypeScope,
) -> Result<CfMap> {
    let (_, _, h, w) = features.dims4()?;
    let labels = downsample_labels(labels, h, w)?;
    let protos = class_prototypes(features, &labels, num_classes, scope)?;
    cf_map(features, &labels, &protos)
}

/// CFCD on two CF maps, aligning the finer one to the coarser grid.
pub fn aligned_cfcd_loss(a: &CfMap, b: &CfMap) -> Result<Tensor> {
    let (_, ha, wa) = a.dims();
    let (_, hb, wb) = b.dims();
    let (h, w) = (ha.min(hb), wa.min(wb));
    cfcd_loss(&a.resample(h, w)?, &b.resample(h, w)?)
}

/// Full CFCD term: each student's features are masked by the other's pseudo labels.
pub fn cfcd_pipeline(
    cnn: &StudentOutput,
    vit: &StudentOutput,
    num_classes: usize,
    scope: PrototypeScope,
) -> Result<Tensor> {
    cfcd_with_labels(
        &cnn.features,
        &vit.pseudo_labels,
        &vit.features,
        &cnn.pseudo_labels,
        num_classes,
        scope,
    )
}

/// CFCD with explicit masking labels (used when targets are mixed by CutMix).
pub fn cfcd_with_labels(
    cnn_features: &Tensor,
    labels_for_cnn: &LabelMap,
    vit_features: &Tensor,
    labels_for_vit: &LabelMap,
    num_classes: usize,
    scope: PrototypeScope,
) -> Result<Tensor> {
    let m_cnn = cross_cf_map(cnn_features, labels_for_cnn, num_classes, scope)?;
    let m_vit = cross_cf_map(vit_features, labels_for_vit, num_classes, scope)?;
    aligned_cfcd_loss(&m_cnn, &m_vit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(data: Vec<u32>, b: usize, h: usize, w: usize) -> LabelMap {
        LabelMap::new(data, b, h, w).unwrap()
    }

    fn feat(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let l = labels(vec![0, 0, 1, 1], 1, 2, 2);
        assert_eq!(downsample_labels(&l, 1, 1).unwrap().data, vec![0]);
        assert_eq!(downsample_labels(&l, 2, 2).unwrap(), l);
        assert!(downsample_labels(&l, 0, 1).is_err());
    }

    #[test]
    fn downsample_block_map_matches_index_formula() {
        // 4x4 map of 2x2 constant blocks with values 0..4
        let mut data = vec![0u32; 16];
        for i in 0..4 {
            for j in 0..4 {
                data[i * 4 + j] = ((i / 2) * 2 + j / 2) as u32;
            }
        }
        let out = downsample_labels(&labels(data.clone(), 1, 4, 4), 2, 2).unwrap();
        let oracle: Vec<u32> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| data[(i * 4 / 2) * 4 + j * 4 / 2])
            .collect();
        assert_eq!(out.data, oracle);
        assert_eq!(out.data, vec![0, 1, 2, 3]);
    }

    #[test]
    fn prototype_mean_of_two_and_singleton() {
        // D=2, 1x3 grid: pixels (1,0) class 0, (3,0) class 0, (5,7) class 2
        let f = feat(vec![1.0, 3.0, 5.0, 0.0, 0.0, 7.0], (1, 2, 1, 3));
        let l = labels(vec![0, 0, 2], 1, 1, 3);
        let t = class_prototypes(&f, &l, 3, PrototypeScope::Image).unwrap();
        assert_eq!(t.get(0, 0).unwrap().unwrap(), vec![2.0, 0.0]);
        assert_eq!(t.get(0, 2).unwrap().unwrap(), vec![5.0, 7.0]);
        assert!(t.get(0, 1).unwrap().is_none());
        assert_eq!(t.count(0, 0), 2);
    }

    #[test]
    fn batch_scope_pools_across_images() {
        let f = feat(vec![1.0, 3.0], (2, 1, 1, 1));
        let l = labels(vec![0, 0], 2, 1, 1);
        let image = class_prototypes(&f, &l, 2, PrototypeScope::Image).unwrap();
        let batch = class_prototypes(&f, &l, 2, PrototypeScope::Batch).unwrap();
        assert_eq!(image.get(1, 0).unwrap().unwrap(), vec![3.0]);
        assert_eq!(batch.get(0, 0).unwrap().unwrap(), vec![2.0]);
        assert_eq!(batch.get(1, 0).unwrap().unwrap(), vec![2.0]);
        assert_eq!(batch.count(1, 0), 2);
    }

    #[test]
    fn cosine_examples() {
        // pixel 0 equals its prototype; pixels 1,2 of class 1 are (1,0),(1,2) -> T=(1,1)
        let f = feat(vec![2.0, 1.0, 1.0, 3.0, 0.0, 2.0], (1, 2, 1, 3));
        let l = labels(vec![0, 1, 1], 1, 1, 3);
        let t = class_prototypes(&f, &l, 2, PrototypeScope::Image).unwrap();
        let m: Vec<f64> = cf_map(&f, &l, &t).unwrap().values.flatten_all().unwrap().to_vec1().unwrap();
        assert!((m[0] - 1.0).abs() < 1e-7);
        assert!((m[1] - 1.0 / 2f64.sqrt()).abs() < 1e-7);

        // orthogonal to prototype: class 0 members (1,1) and (1,-1) -> T=(1,0); feature (0,1)
        let f = feat(vec![1.0, 1.0, 0.0, 1.0, -1.0, 1.0], (1, 2, 1, 3));
        let l = labels(vec![0, 0, 1], 1, 1, 3);
        let t = class_prototypes(&f, &l, 2, PrototypeScope::Image).unwrap();
        let mut protos = t.clone();
        // make class 1's prototype orthogonal to its pixel: reuse class 0's row
        let row = t.prototypes.get(0).unwrap().get(0).unwrap();
        protos.prototypes = Tensor::stack(&[row.clone(), row], 0)
            .unwrap()
            .unsqueeze(0)
            .unwrap();
        let m: Vec<f64> = cf_map(&f, &l, &protos).unwrap().values.flatten_all().unwrap().to_vec1().unwrap();
        assert!(m[2].abs() < 1e-12);
    }

    #[test]
    fn cf_map_rejects_missing_prototype() {
        let f = feat(vec![1.0, 2.0], (1, 1, 1, 2));
        let built_from = labels(vec![0, 0], 1, 1, 2);
        let t = class_prototypes(&f, &built_from, 2, PrototypeScope::Image).unwrap();
        let other = labels(vec![0, 1], 1, 1, 2);
        assert!(cf_map(&f, &other, &t).is_err());
    }

    #[test]
    fn zero_features_do_not_produce_nan() {
        let f = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let var = candle_core::Var::from_tensor(&f).unwrap();
        let l = labels(vec![0, 1, 1, 0], 1, 2, 2);
        let m = cross_cf_map(var.as_tensor(), &l, 2, PrototypeScope::Image).unwrap();
        let v: Vec<f64> = m.values.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        let g = m.values.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gv: Vec<f64> = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(gv.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cfcd_loss_examples() {
        let a = CfMap { values: Tensor::full(0.75f64, (2, 3, 3), &Device::Cpu).unwrap() };
        let b = CfMap { values: Tensor::full(0.25f64, (2, 3, 3), &Device::Cpu).unwrap() };
        assert_eq!(cfcd_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!((cfcd_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap() - 0.25).abs() < 1e-15);
        let c = CfMap { values: Tensor::zeros((2, 3, 4), DType::F64, &Device::Cpu).unwrap() };
        assert!(cfcd_loss(&a, &c).is_err());
    }

    #[test]
    fn cfcd_loss_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2 * 4 * 5;
        let va: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle = va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
        let a = CfMap { values: Tensor::from_vec(va, (2, 4, 5), &Device::Cpu).unwrap() };
        let b = CfMap { values: Tensor::from_vec(vb, (2, 4, 5), &Device::Cpu).unwrap() };
        let got: f64 = cfcd_loss(&a, &b).unwrap().to_scalar().unwrap();
        assert!((got - oracle).abs() < 1e-6);
    }

    #[test]
    fn resample_aligns_finer_map() {
        let fine = CfMap {
            values: Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 4)).unwrap(),
        };
        let coarse = fine.resample(2, 2).unwrap();
        let v: Vec<f64> = coarse.values.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 2.0, 8.0, 10.0]);
    }
}
