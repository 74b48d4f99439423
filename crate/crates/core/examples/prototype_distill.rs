//! The class-aware feature consistency term, step by step, on a fresh cohort:
//! pseudo labels, per-class prototypes, CF maps, and the loss between them.
//!
//!     cargo run --release --example prototype_distill -- [seed]

use candle_core::{DType, Device};
use tcc::config::CohortConfig;
use tcc::data::generate_shapes_dataset;
use tcc::prototype::{
    aligned_cfcd_loss, cfcd_pipeline, class_prototypes, cross_cf_map, downsample_labels, PrototypeScope,
};
use tcc::train::Cohort;

/// Returns the CFCD value computed by hand and by the library pipeline.
pub fn run(seed: u64) -> tcc::Result<(f64, f64)> {
    let cfg = CohortConfig::default();
    let k = cfg.num_classes;
    let cohort = Cohort::new(&cfg, seed, DType::F64, &Device::Cpu)?;
    let ds = generate_shapes_dataset(2, 64, 64, k, seed)?;
    let images = ds.images(ds.ids(), &Device::Cpu)?;
    let images = tcc::students::ImageBatch::new(images.tensor().to_dtype(DType::F64)?)?;
    let cnn = cohort.cnn.forward(&images)?;
    let vit = cohort.vit.forward(&images)?;

    // each student's features are grouped by the other's predictions
    let (_, d, h, w) = cnn.features.dims4()?;
    let grid = downsample_labels(&vit.pseudo_labels, h, w)?;
    let protos = class_prototypes(&cnn.features, &grid, k, PrototypeScope::Image)?;
    println!("conv features {d}x{h}x{w}; prototypes from attention pseudo labels:");
    for b in 0..grid.batch {
        let counts: Vec<usize> = (0..k).map(|c| protos.count(b, c)).collect();
        println!("  image {b}: pixels per class {counts:?}");
    }

    let m_cnn = cross_cf_map(&cnn.features, &vit.pseudo_labels, k, PrototypeScope::Image)?;
    let m_vit = cross_cf_map(&vit.features, &cnn.pseudo_labels, k, PrototypeScope::Image)?;
    for (name, m) in [("conv", &m_cnn), ("attention", &m_vit)] {
        let v: Vec<f64> = m.values.flatten_all()?.to_vec1()?;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        println!("{name:>9} CF map {:?}: mean {mean:.3}, min {min:.3}", m.dims());
    }

    let by_hand = aligned_cfcd_loss(&m_cnn, &m_vit)?.to_scalar::<f64>()?;
    let pipeline = cfcd_pipeline(&cnn, &vit, k, PrototypeScope::Image)?.to_scalar::<f64>()?;
    println!("L_f = {by_hand:.6} (pipeline {pipeline:.6})");
    Ok((by_hand, pipeline))
}

fn main() -> tcc::Result<()> {
    let seed = std::env::args().nth(1).map(|s| s.parse().expect("seed")).unwrap_or(0);
    run(seed)?;
    Ok(())
}
