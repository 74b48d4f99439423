#![allow(dead_code)]

use std::path::Path;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcc::config::{Mode, RunConfig};
use tcc::data::{generate_shapes_dataset, save_dataset, Ratio};
use tcc::losses::{kl_divergence, supervised_loss};
use tcc::prototype::{cfcd_with_labels, PrototypeScope};
use tcc::students::{AttentionConfig, ConvConfig, LabelMap};

/// A cohort small enough for many steps per second on one core:
/// 16x16 images, 3 classes, both students on a 4x4 feature grid.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.dataset = root.join("train");
    cfg.data.val_dataset = root.join("val");
    cfg.data.ratio = Ratio { num: 1, den: 4 };
    cfg.data.batch_size = 4;
    cfg.students.num_classes = 3;
    cfg.students.conv = ConvConfig {
        widths: vec![8, 8, 8, 8],
        strides: vec![2, 2, 1, 1],
        dilations: vec![1, 1, 2, 2],
        kernel: 3,
    };
    cfg.students.attention = AttentionConfig {
        patch_size: 4,
        embed_dim: 16,
        num_heads: 2,
        num_blocks: 1,
        mlp_ratio: 2,
        image_size: 16,
        ..AttentionConfig::default()
    };
    cfg.training.mode = Mode::Tcc;
    cfg.training.iterations = 20;
    cfg.training.base_lr = 3e-3;
    cfg.training.eval_interval = 10;
    cfg.training.eval_batch_size = 8;
    cfg
}

/// Writes the train (24 images) and val (8 images) sets used by [`tiny_config`].
pub fn tiny_datasets(root: &Path) {
    save_dataset(&generate_shapes_dataset(24, 16, 16, 3, 11).unwrap(), &root.join("train")).unwrap();
    save_dataset(&generate_shapes_dataset(8, 16, 16, 3, 12).unwrap(), &root.join("val")).unwrap();
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Entries uniform in [0.5, 2]: prototype norms stay far from the cosine eps.
pub fn positive_features(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..b * h * w).map(|_| rng.random_range(0..k as u32)).collect();
    LabelMap::new(data, b, h, w).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` for every coordinate.
pub fn numeric_gradient(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let base = values(x);
    let shape = x.dims().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = f(&Tensor::from_vec(plus, shape.as_slice(), &Device::Cpu).unwrap());
            let fm = f(&Tensor::from_vec(minus, shape.as_slice(), &Device::Cpu).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Worst relative error of the feature-consistency gradient over `instances`
/// random problems (labels fixed, both feature maps perturbed).
pub fn cfcd_gradient_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..instances {
        let b = rng.random_range(1..=2);
        let d = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let (h1, w1) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let (h2, w2) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let fc = random_tensor(&mut rng, &[b, d, h1, w1], 1.0);
        let fv = random_tensor(&mut rng, &[b, d, h2, w2], 1.0);
        let lc = random_labels(&mut rng, b, 8, 8, k);
        let lv = random_labels(&mut rng, b, 8, 8, k);
        let scope = if rng.random_bool(0.5) { PrototypeScope::Image } else { PrototypeScope::Batch };
        let loss = |a: &Tensor, v: &Tensor| cfcd_with_labels(a, &lc, v, &lv, k, scope).unwrap();

        let (vc, vv) = (Var::from_tensor(&fc).unwrap(), Var::from_tensor(&fv).unwrap());
        let grads = loss(vc.as_tensor(), vv.as_tensor()).backward().unwrap();
        let gc = values(grads.get(&vc).unwrap());
        let gv = values(grads.get(&vv).unwrap());
        let nc = numeric_gradient(&fc, |x| scalar(&loss(x, &fv)));
        let nv = numeric_gradient(&fv, |x| scalar(&loss(&fc, x)));
        worst = worst.max(relative_error(&gc, &nc)).max(relative_error(&gv, &nv));
    }
    worst
}

/// Cross-distillation gradient with the teacher side held constant.
pub fn ccd_gradient_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..instances {
        let b = rng.random_range(1..=2);
        let k = rng.random_range(2..=4);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let c0 = random_tensor(&mut rng, &[b, k, h, w], 3.0);
        let v0 = random_tensor(&mut rng, &[b, k, h, w], 3.0);
        let (vc, vv) = (Var::from_tensor(&c0).unwrap(), Var::from_tensor(&v0).unwrap());
        let grads = tcc::losses::ccd_loss(vc.as_tensor(), vv.as_tensor(), b)
            .unwrap()
            .backward()
            .unwrap();
        let gc = values(grads.get(&vc).unwrap());
        let gv = values(grads.get(&vv).unwrap());
        // each student only receives gradient as the KL's second argument
        let nc = numeric_gradient(&c0, |x| scalar(&(kl_divergence(&c0, &v0).unwrap() + kl_divergence(&v0, x).unwrap()).unwrap()));
        let nv = numeric_gradient(&v0, |x| scalar(&(kl_divergence(&c0, x).unwrap() + kl_divergence(&v0, &c0).unwrap()).unwrap()));
        worst = worst.max(relative_error(&gc, &nc)).max(relative_error(&gv, &nv));
    }
    worst
}

pub fn dice_gradient_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..instances {
        let b = rng.random_range(1..=2);
        let k = rng.random_range(2..=4);
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let c0 = random_tensor(&mut rng, &[b, k, h, w], 2.0);
        let v0 = random_tensor(&mut rng, &[b, k, h, w], 2.0);
        let gt = random_labels(&mut rng, b, h, w, k);
        let (vc, vv) = (Var::from_tensor(&c0).unwrap(), Var::from_tensor(&v0).unwrap());
        let grads = supervised_loss(vc.as_tensor(), vv.as_tensor(), &gt).unwrap().backward().unwrap();
        let gc = values(grads.get(&vc).unwrap());
        let gv = values(grads.get(&vv).unwrap());
        let nc = numeric_gradient(&c0, |x| scalar(&supervised_loss(x, &v0, &gt).unwrap()));
        let nv = numeric_gradient(&v0, |x| scalar(&supervised_loss(&c0, x, &gt).unwrap()));
        worst = worst.max(relative_error(&gc, &nc)).max(relative_error(&gv, &nv));
    }
    worst
}

/// Per-image class means by explicit pixel loop; `None` for absent classes.
pub fn naive_prototypes(features: &[f64], labels: &LabelMap, d: usize, k: usize) -> Vec<Vec<Option<Vec<f64>>>> {
    let (b, h, w) = (labels.batch, labels.height, labels.width);
    let plane = h * w;
    (0..b)
        .map(|bi| {
            (0..k)
                .map(|c| {
                    let mut sum = vec![0.0; d];
                    let mut n = 0usize;
                    for p in 0..plane {
                        if labels.data[bi * plane + p] as usize == c {
                            n += 1;
                            for (di, s) in sum.iter_mut().enumerate() {
                                *s += features[(bi * d + di) * plane + p];
                            }
                        }
                    }
                    (n > 0).then(|| sum.iter().map(|s| s / n as f64).collect())
                })
                .collect()
        })
        .collect()
}

/// Max abs difference between vectorized and looped prototypes over `instances`
/// random problems (B <= 2, D <= 8, spatial <= 8x8, K <= 5).
pub fn prototype_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..instances {
        let b = rng.random_range(1..=2);
        let d = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k = rng.random_range(2..=5);
        let f = random_tensor(&mut rng, &[b, d, h, w], 5.0);
        let labels = random_labels(&mut rng, b, h, w, k);
        let table = tcc::prototype::class_prototypes(&f, &labels, k, PrototypeScope::Image).unwrap();
        let naive = naive_prototypes(&values(&f), &labels, d, k);
        for (bi, row) in naive.iter().enumerate() {
            for (c, expect) in row.iter().enumerate() {
                let got = table.get(bi, c).unwrap();
                match (expect, got) {
                    (Some(e), Some(g)) => {
                        for (x, y) in e.iter().zip(&g) {
                            worst = worst.max((x - y).abs());
                        }
                    }
                    (None, None) => {}
                    _ => return f64::INFINITY,
                }
            }
        }
    }
    worst
}
