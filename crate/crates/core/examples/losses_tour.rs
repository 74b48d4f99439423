//! Small worked numbers for every piece of the objective: KL direction,
//! cross distillation, Dice, the ramp-up weight, the poly learning rate and
//! how they combine.
//!
//!     cargo run --example losses_tour

use candle_core::{Device, Tensor};
use tcc::losses::{ccd_loss, dice_loss, kl_divergence, rampup, LossBundle};
use tcc::students::LabelMap;
use tcc::train::poly_lr;

fn scalar(t: &Tensor) -> tcc::Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

/// Returns the combined objective at the middle of a 3000-iteration run.
pub fn run() -> tcc::Result<f64> {
    let dev = Device::Cpu;
    // one pixel, two classes: target (0.5, 0.5), student (0.25, 0.75)
    let even = Tensor::from_vec(vec![0.0f64, 0.0], (1, 2, 1, 1), &dev)?;
    let skewed = Tensor::from_vec(vec![0.0f64, 3f64.ln()], (1, 2, 1, 1), &dev)?;
    let forward = scalar(&kl_divergence(&even, &skewed)?)?;
    let backward = scalar(&kl_divergence(&skewed, &even)?)?;
    println!("KL(even || skewed) = {forward:.4}, KL(skewed || even) = {backward:.4}");
    let ccd = scalar(&ccd_loss(&even, &skewed, 1)?)?;
    println!("cross distillation (both directions) = {ccd:.4}");

    // 2x2 image, classes 0 and 1; confident and correct vs. uniform
    let gt = LabelMap::new(vec![0, 0, 1, 1], 1, 2, 2)?;
    let right = Tensor::from_vec(vec![8.0f64, 8.0, -8.0, -8.0, -8.0, -8.0, 8.0, 8.0], (1, 2, 2, 2), &dev)?;
    let flat = right.zeros_like()?;
    println!(
        "Dice loss: confident {:.4}, uniform {:.4}",
        scalar(&dice_loss(&right, &gt)?)?,
        scalar(&dice_loss(&flat, &gt)?)?
    );

    let (total, ramp) = (3000, 1200);
    for t in [0, 300, 600, 1200, 2999] {
        println!(
            "t = {t:>4}: rampup {:.4}, lr {:.3e}",
            rampup(t, ramp),
            poly_lr(t, total, 3e-4)?
        );
    }

    let bundle = LossBundle::combine(0.4, ccd, 0.02, rampup(1500, ramp), 1.0)?;
    println!(
        "L = {:.3} + {:.3} * ({:.3} + {} * {:.3}) = {:.4}",
        bundle.l_sup, bundle.g, bundle.l_ccd, bundle.lambda, bundle.l_cfcd, bundle.total
    );
    Ok(bundle.total)
}

fn main() -> tcc::Result<()> {
    run()?;
    Ok(())
}
