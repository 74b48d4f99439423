//! Supervised Dice loss, cross distillation between the students' predictions,
//! the consistency ramp-up and the combined objective.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TccError};
use crate::ops;
use crate::students::LabelMap;

/// Additive smoothing in the soft Dice coefficient.
pub const DICE_SMOOTH: f64 = 1.0;

/// Weight of the feature-consistency term relative to cross distillation.
pub const DEFAULT_LAMBDA: f64 = 1.0;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TccError::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `KL(softmax(target) || softmax(student))` in nats, averaged over all
/// `B*H*W` pixels. The target is detached: only `student_logits` receives gradient.
pub fn kl_divergence(target_logits: &Tensor, student_logits: &Tensor) -> Result<Tensor> {
    same_shape("kl divergence", target_logits, student_logits)?;
    let target = target_logits.detach();
    let log_p = ops::log_softmax(&target, 1)?;
    let log_q = ops::log_softmax(student_logits, 1)?;
    let p = log_p.exp()?;
    let per_pixel = (p * (log_p - log_q)?)?.sum(1)?;
    Ok(per_pixel.mean_all()?)
}

/// Bidirectional cross distillation on one batch: each student is the
/// (detached) teacher of the other.
///
/// Per-image KL terms are summed over the batch and divided by
/// `normalizer`; with `normalizer == B` this is the batch mean.
pub fn ccd_loss(cnn_logits: &Tensor, vit_logits: &Tensor, normalizer: usize) -> Result<Tensor> {
    same_shape("ccd loss", cnn_logits, vit_logits)?;
    if normalizer == 0 {
        return Err(TccError::Config("ccd normalizer must be positive".into()));
    }
    let b = cnn_logits.dims()[0];
    let both = (kl_divergence(cnn_logits, vit_logits)? + kl_divergence(vit_logits, cnn_logits)?)?;
    if b == normalizer {
        Ok(both)
    } else {
        Ok((both * (b as f64 / normalizer as f64))?)
    }
}

/// Soft Dice loss averaged over the batch.
///
/// Per image, `dice_c = (2 sum(s_c y_c) + 1) / (sum s_c + sum y_c + 1)` with `s`
/// the softmax and `y` the one-hot ground truth; the image loss is one minus
/// the mean of `dice_c` over the classes present in that image's ground truth.
pub fn dice_loss(logits: &Tensor, gt: &LabelMap) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if gt.batch != b || gt.height != h || gt.width != w {
        return Err(TccError::shape(
            "dice loss",
            format!("logits {:?} vs gt [{}, {}, {}]", logits.dims(), gt.batch, gt.height, gt.width),
        ));
    }
    gt.check_classes(k)?;
    let dtype = logits.dtype();
    let device = logits.device();
    let probs = ops::softmax(logits, 1)?.reshape((b, k, h * w))?;
    let onehot = ops::one_hot(&gt.data, b, k, dtype, device)?;

    let inter = (&probs * &onehot)?.sum(2)?;
    let prob_mass = probs.sum(2)?;
    let mut present = vec![0f64; b * k];
    let mut gt_mass = vec![0f64; b * k];
    let plane = h * w;
    for (i, &c) in gt.data.iter().enumerate() {
        gt_mass[(i / plane) * k + c as usize] += 1.0;
        present[(i / plane) * k + c as usize] = 1.0;
    }
    let per_image_present: Vec<f64> = present.chunks(k).map(|r| r.iter().sum()).collect();
    let gt_mass = Tensor::from_vec(gt_mass, (b, k), device)?.to_dtype(dtype)?;
    let present = Tensor::from_vec(present, (b, k), device)?.to_dtype(dtype)?;
    let n_present = Tensor::from_vec(per_image_present, b, device)?.to_dtype(dtype)?;

    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&((prob_mass + gt_mass)? + DICE_SMOOTH)?)?;
    let mean_dice = (dice * present)?.sum(1)?.div(&n_present)?;
    Ok(mean_dice.affine(-1.0, 1.0)?.mean_all()?)
}

/// Dice of both students against the same ground truth, summed.
pub fn supervised_loss(cnn_logits: &Tensor, vit_logits: &Tensor, gt: &LabelMap) -> Result<Tensor> {
    Ok((dice_loss(cnn_logits, gt)? + dice_loss(vit_logits, gt)?)?)
}

/// Consistency ramp-up `exp(-5 (1 - min(t, T)/T)^2)`; identically 1 when `T == 0`.
pub fn rampup(t: usize, ramp_iterations: usize) -> f64 {
    if ramp_iterations == 0 {
        return 1.0;
    }
    let phase = 1.0 - t.min(ramp_iterations) as f64 / ramp_iterations as f64;
    (-5.0 * phase * phase).exp()
}

/// Scalar view of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_sup: f64,
    pub l_ccd: f64,
    pub l_cfcd: f64,
    pub g: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    /// `L = L_s + g (L_d + lambda L_f)`.
    pub fn combine(l_sup: f64, l_ccd: f64, l_cfcd: f64, g: f64, lambda: f64) -> Result<Self> {
        for (component, v) in [("loss_sup", l_sup), ("loss_ccd", l_ccd), ("loss_cfcd", l_cfcd)] {
            if !v.is_finite() {
                return Err(TccError::NonFinite { component });
            }
        }
        Ok(Self {
            l_sup,
            l_ccd,
            l_cfcd,
            g,
            lambda,
            total: objective(l_sup, l_ccd, l_cfcd, g, lambda),
        })
    }
}

/// The combination rule shared by the differentiable and the logged paths.
pub fn objective(l_sup: f64, l_ccd: f64, l_cfcd: f64, g: f64, lambda: f64) -> f64 {
    l_sup + g * (l_ccd + lambda * l_cfcd)
}

/// Differentiable loss terms for one iteration; absent terms are treated as zero.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub sup: Tensor,
    pub ccd: Option<Tensor>,
    pub cfcd: Option<Tensor>,
}

fn scalar(t: &Option<Tensor>) -> Result<f64> {
    match t {
        Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
        None => Ok(0.0),
    }
}

impl LossTerms {
    /// Builds the total as a tensor for backpropagation along with its logged components.
    pub fn total(&self, g: f64, lambda: f64) -> Result<(Tensor, LossBundle)> {
        let bundle = LossBundle::combine(
            scalar(&Some(self.sup.clone()))?,
            scalar(&self.ccd)?,
            scalar(&self.cfcd)?,
            g,
            lambda,
        )?;
        let mut unsup: Option<Tensor> = self.ccd.clone();
        if let Some(f) = &self.cfcd {
            let weighted = (f * lambda)?;
            unsup = Some(match unsup {
                Some(d) => (d + weighted)?,
                None => weighted,
            });
        }
        let total = match unsup {
            Some(u) if g != 0.0 => (&self.sup + (u * g)?)?,
            _ => self.sup.clone(),
        };
        Ok((total, bundle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn kl_closed_form() {
        // target (0.5, 0.5), student (0.25, 0.75)
        let target = t(vec![0.0, 0.0], (1, 2, 1, 1));
        let student = t(vec![0.0, 3f64.ln()], (1, 2, 1, 1));
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((s(&kl_divergence(&target, &student).unwrap()) - want).abs() < 1e-12);
        assert!((want - 0.1438).abs() < 1e-4);
        assert_eq!(s(&kl_divergence(&student, &student).unwrap()), 0.0);
    }

    #[test]
    fn kl_gradient_only_reaches_student() {
        let a = candle_core::Var::from_tensor(&t(vec![0.3, -0.2, 1.0, 0.1], (1, 2, 1, 2))).unwrap();
        let b = candle_core::Var::from_tensor(&t(vec![-0.5, 0.4, 0.2, 0.9], (1, 2, 1, 2))).unwrap();
        let g = kl_divergence(a.as_tensor(), b.as_tensor()).unwrap().backward().unwrap();
        assert!(g.get(a.as_tensor()).is_none());
        assert!(g.get(b.as_tensor()).is_some());
    }

    #[test]
    fn ccd_identity_and_swap() {
        let a = t(vec![0.3, -0.2, 1.0, 0.1, 0.0, 2.0, -1.0, 0.5], (2, 2, 1, 2));
        let b = t(vec![-0.5, 0.4, 0.2, 0.9, 1.0, 0.0, 0.3, 0.3], (2, 2, 1, 2));
        assert_eq!(s(&ccd_loss(&a, &a, 2).unwrap()), 0.0);
        let ab = s(&ccd_loss(&a, &b, 2).unwrap());
        let ba = s(&ccd_loss(&b, &a, 2).unwrap());
        assert!((ab - ba).abs() < 1e-15);
        let sum = s(&kl_divergence(&a, &b).unwrap()) + s(&kl_divergence(&b, &a).unwrap());
        assert!((ab - sum).abs() < 1e-15);
        // labeled-set normalizer: sum of per-image terms over |D_l|
        let scaled = s(&ccd_loss(&a, &b, 8).unwrap());
        assert!((scaled - sum * 2.0 / 8.0).abs() < 1e-15);
        assert!(ccd_loss(&a, &t(vec![0.0; 4], (1, 2, 1, 2)), 1).is_err());
    }

    #[test]
    fn dice_uniform_two_by_two() {
        // K=2 uniform softmax on a 2x2 map, gt two pixels of each class.
        // per class: inter = 2 * 0.5 = 1, prob mass = 2, gt mass = 2
        // dice = (2*1 + 1) / (2 + 2 + 1) = 0.6 -> loss 0.4
        let logits = t(vec![0.0; 8], (1, 2, 2, 2));
        let gt = LabelMap::new(vec![0, 1, 0, 1], 1, 2, 2).unwrap();
        assert!((s(&dice_loss(&logits, &gt).unwrap()) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dice_excludes_absent_classes() {
        // gt all class 0, K=3; perfect-ish logits for class 0
        let mut v = vec![0.0; 3 * 4];
        v[..4].iter_mut().for_each(|x| *x = 50.0);
        let logits = t(v, (1, 3, 2, 2));
        let gt = LabelMap::new(vec![0; 4], 1, 2, 2).unwrap();
        let loss = s(&dice_loss(&logits, &gt).unwrap());
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn dice_rejects_out_of_range_gt() {
        let logits = t(vec![0.0; 8], (1, 2, 2, 2));
        let gt = LabelMap::new(vec![0, 1, 2, 1], 1, 2, 2).unwrap();
        assert!(matches!(dice_loss(&logits, &gt), Err(TccError::ClassOutOfRange { .. })));
    }

    #[test]
    fn supervised_is_sum_of_dice() {
        let a = t(vec![0.3, -0.2, 1.0, 0.1, 0.0, 2.0, -1.0, 0.5], (1, 2, 2, 2));
        let b = t(vec![-0.5, 0.4, 0.2, 0.9, 1.0, 0.0, 0.3, 0.3], (1, 2, 2, 2));
        let gt = LabelMap::new(vec![0, 1, 1, 0], 1, 2, 2).unwrap();
        let want = s(&dice_loss(&a, &gt).unwrap()) + s(&dice_loss(&b, &gt).unwrap());
        assert!((s(&supervised_loss(&a, &b, &gt).unwrap()) - want).abs() < 1e-15);
    }

    #[test]
    fn rampup_values() {
        assert_eq!(rampup(100, 100), 1.0);
        assert_eq!(rampup(250, 100), 1.0);
        assert!((rampup(0, 100) - (-5f64).exp()).abs() < 1e-15);
        assert!((rampup(0, 100) - 0.00674).abs() < 1e-5);
        assert!((rampup(50, 100) - 0.2865).abs() < 1e-4);
        assert_eq!(rampup(0, 0), 1.0);
    }

    #[test]
    fn bundle_arithmetic_and_nonfinite() {
        let b = LossBundle::combine(0.5, 0.2, 0.1, 1.0, 1.0).unwrap();
        assert!((b.total - 0.8).abs() < 1e-15);
        assert_eq!(LossBundle::combine(0.5, 0.2, 0.1, 0.0, 1.0).unwrap().total, 0.5);
        assert!((LossBundle::combine(0.5, 0.2, 0.1, 1.0, 0.0).unwrap().total - 0.7).abs() < 1e-15);
        let err = LossBundle::combine(0.5, f64::NAN, 0.1, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, TccError::NonFinite { component: "loss_ccd" }));
    }
}
