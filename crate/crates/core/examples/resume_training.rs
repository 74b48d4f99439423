//! Interrupts a run part way, resumes it from `checkpoints/last.ckpt`, and
//! checks the resumed trajectory against an uninterrupted one.
//!
//!     cargo run --release --example resume_training -- [out_dir] [iterations] [stop_at]

use std::path::{Path, PathBuf};

use tcc::config::RunConfig;
use tcc::data::write_generated_dataset;
use tcc::train::{read_metrics, train, TrainOptions};

/// Largest absolute difference in `loss_total` between the two runs.
pub fn run(out: &Path, iterations: usize, stop_at: usize) -> tcc::Result<f64> {
    write_generated_dataset(&out.join("train"), 24, 32, 3, 3, true)?;
    write_generated_dataset(&out.join("val"), 8, 32, 3, 4, true)?;
    let mut cfg = RunConfig::default();
    cfg.data.dataset = out.join("train");
    cfg.data.val_dataset = out.join("val");
    cfg.data.ratio = tcc::data::Ratio::new(1, 4)?;
    cfg.data.batch_size = 4;
    cfg.students.num_classes = 3;
    cfg.students.attention.image_size = 32;
    cfg.students.attention.num_blocks = 1;
    cfg.training.iterations = iterations;
    cfg.training.eval_interval = (iterations / 2).max(1);

    let straight = out.join("straight");
    let broken = out.join("interrupted");
    for dir in [&straight, &broken] {
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
    }
    train(&cfg, &straight, &TrainOptions::default())?;
    let partial = train(&cfg, &broken, &TrainOptions { resume: false, stop_after: Some(stop_at) })?;
    println!("stopped after {} of {iterations} iterations", partial.iterations);
    let resumed = train(&cfg, &broken, &TrainOptions { resume: true, stop_after: None })?;
    println!("resumed to {} iterations", resumed.iterations);

    let a = read_metrics(&straight.join("metrics.csv"))?;
    let b = read_metrics(&broken.join("metrics.csv"))?;
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x.loss_total - y.loss_total).abs())
        .fold(0.0, f64::max);
    println!("{} rows each; max |loss difference| {worst:.2e}", a.len());
    Ok(worst)
}

fn main() -> tcc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tcc_resume"));
    let iterations = args.next().map(|s| s.parse().expect("iterations")).unwrap_or(30);
    let stop_at = args.next().map(|s| s.parse().expect("stop_at")).unwrap_or(iterations / 3);
    run(&out, iterations, stop_at)?;
    Ok(())
}
