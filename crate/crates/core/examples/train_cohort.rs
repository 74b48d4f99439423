//! Trains the cohort on a freshly generated shapes dataset.
//!
//!     cargo run --release --example train_cohort -- [iterations] [mode] [out_dir]

use std::path::{Path, PathBuf};

use tcc::config::{Mode, RunConfig};
use tcc::data::{generate_shapes_dataset, save_dataset};
use tcc::train::{train, TrainOptions, TrainSummary};

/// 200 training and 100 held-out 64x64 images with four classes, default cohort.
pub fn run(iterations: usize, mode: Mode, out: &Path, image_size: usize) -> tcc::Result<TrainSummary> {
    let train_dir = out.join("data/train");
    let val_dir = out.join("data/val");
    save_dataset(&generate_shapes_dataset(200, image_size, image_size, 4, 7)?, &train_dir)?;
    save_dataset(&generate_shapes_dataset(100, image_size, image_size, 4, 1007)?, &val_dir)?;

    let mut cfg = RunConfig::default();
    cfg.data.dataset = train_dir;
    cfg.data.val_dataset = val_dir;
    cfg.students.attention.image_size = image_size;
    cfg.training.mode = mode;
    cfg.training.iterations = iterations;
    cfg.training.eval_interval = iterations.div_ceil(4).max(1);

    let run_dir = out.join(format!("run_{}", mode.name()));
    let summary = train(&cfg, &run_dir, &TrainOptions::default())?;
    let last = summary.records.last().expect("at least one iteration");
    println!(
        "{} iterations in {:.1}s ({:.3}s/iter); final loss {:.4}",
        summary.iterations,
        summary.seconds,
        summary.seconds / summary.iterations as f64,
        last.loss_total
    );
    if let Some(r) = &summary.report {
        println!("attention student mIoU {:.4}", r.miou);
    }
    if let Some(r) = &summary.report_conv {
        println!("conv student mIoU {:.4}", r.miou);
    }
    println!("run directory: {}", run_dir.display());
    Ok(summary)
}

fn main() -> tcc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|s| s.parse().expect("iterations")).unwrap_or(40);
    let mode: Mode = args.next().map(|s| s.parse()).transpose()?.unwrap_or(Mode::Tcc);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tcc_train_cohort"));
    run(iterations, mode, &out, 64)?;
    Ok(())
}
