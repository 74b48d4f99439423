//! Builds the default cohort and pushes one batch of shapes through both
//! students: parameter counts, output shapes, forward time and how often the
//! two students already agree at initialization.
//!
//!     cargo run --release --example forward_students -- [batch] [image_size]

use std::time::Instant;

use candle_core::{DType, Device};
use tcc::config::CohortConfig;
use tcc::data::generate_shapes_dataset;
use tcc::train::Cohort;

pub struct Summary {
    pub conv_params: usize,
    pub attention_params: usize,
    pub agreement: f64,
}

pub fn run(batch: usize, image_size: usize) -> tcc::Result<Summary> {
    let mut cfg = CohortConfig::default();
    cfg.attention.image_size = image_size;
    let cohort = Cohort::new(&cfg, 0, DType::F32, &Device::Cpu)?;
    let ds = generate_shapes_dataset(batch, image_size, image_size, cfg.num_classes, 1)?;
    let images = ds.images(ds.ids(), &Device::Cpu)?;

    let mut outputs = Vec::new();
    for (name, student) in [("conv", &cohort.cnn), ("attention", &cohort.vit)] {
        let start = Instant::now();
        let out = student.forward(&images)?;
        println!(
            "{name:>9}: {:>7} params, features {:?}, logits {:?}, {:.1} ms",
            student.params().num_elements(),
            out.features.dims(),
            out.logits.dims(),
            start.elapsed().as_secs_f64() * 1e3
        );
        outputs.push(out);
    }

    let (a, b) = (&outputs[0].pseudo_labels.data, &outputs[1].pseudo_labels.data);
    let agreement = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
    println!("pseudo labels agree on {:.1}% of pixels before training", 100.0 * agreement);
    Ok(Summary {
        conv_params: cohort.cnn.params().num_elements(),
        attention_params: cohort.vit.params().num_elements(),
        agreement,
    })
}

fn main() -> tcc::Result<()> {
    let mut args = std::env::args().skip(1);
    let batch = args.next().map(|s| s.parse().expect("batch")).unwrap_or(8);
    let size = args.next().map(|s| s.parse().expect("image size")).unwrap_or(64);
    run(batch, size)?;
    Ok(())
}
