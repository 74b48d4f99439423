//! Mixes a batch of shapes with CutMix and writes a contact sheet: original
//! images on the top row, mixed images below, mixed masks at the bottom.
//!
//!     cargo run --example cutmix_demo -- [out.png] [seed]

use std::path::{Path, PathBuf};

use candle_core::Device;
use tcc::data::{generate_shapes_dataset, roll_batch, roll_labels, CutMix};
use tcc::students::ImageBatch;

const MASK_PALETTE: [[u8; 3]; 5] = [[20, 20, 20], [230, 80, 60], [60, 200, 90], [70, 100, 230], [230, 210, 60]];

/// Returns the pasted area fraction of every image.
pub fn run(out: &Path, seed: u64) -> tcc::Result<Vec<f64>> {
    let (n, size, k) = (4, 64, 4);
    let ds = generate_shapes_dataset(n, size, size, k, seed)?;
    let images = ds.images(ds.ids(), &Device::Cpu)?;
    let masks = ds.masks(ds.ids())?;
    let mix = CutMix::sample(n, size, size, &mut tcc::seed::rng_at(seed, tcc::seed::Stream::CutMix, 0));
    let mixed = mix.mix_images(&images, &ImageBatch::new(roll_batch(images.tensor())?)?)?;
    let mixed_masks = mix.mix_labels(&masks, &roll_labels(&masks))?;

    let mut sheet = image::RgbImage::new((n * size) as u32, (3 * size) as u32);
    let plane = size * size;
    for (row, batch) in [&images, &mixed].into_iter().enumerate() {
        let v: Vec<f32> = batch.tensor().flatten_all()?.to_vec1()?;
        for b in 0..n {
            for p in 0..plane {
                let px: [u8; 3] = std::array::from_fn(|c| (v[(b * 3 + c) * plane + p] * 255.0).round() as u8);
                sheet.put_pixel((b * size + p % size) as u32, (row * size + p / size) as u32, image::Rgb(px));
            }
        }
    }
    for b in 0..n {
        for p in 0..plane {
            let class = mixed_masks.data[b * plane + p] as usize;
            sheet.put_pixel((b * size + p % size) as u32, (2 * size + p / size) as u32, image::Rgb(MASK_PALETTE[class % 5]));
        }
    }
    sheet.save(out)?;

    let fractions: Vec<f64> = mix.boxes.iter().map(|bx| bx.area() as f64 / plane as f64).collect();
    for (b, (bx, f)) in mix.boxes.iter().zip(&fractions).enumerate() {
        println!(
            "image {b}: box {}x{} at ({}, {}) from image {}, {:.0}% pasted",
            bx.h,
            bx.w,
            bx.y0,
            bx.x0,
            (b + 1) % n,
            100.0 * f
        );
    }
    println!("wrote {}", out.display());
    Ok(fractions)
}

fn main() -> tcc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tcc_cutmix.png"));
    let seed = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    run(&out, seed)?;
    Ok(())
}
