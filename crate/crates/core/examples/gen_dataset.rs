//! Generates a synthetic shapes dataset, writes it to disk and prints the
//! class balance and a labeled/unlabeled split.
//!
//!     cargo run --release --example gen_dataset -- [out_dir] [n] [size] [classes] [seed]

use std::path::{Path, PathBuf};

use tcc::data::{load_dataset, partition, write_generated_dataset, Ratio};

/// Pixel share of each class over the whole dataset.
pub fn run(out: &Path, n: usize, size: usize, classes: usize, seed: u64) -> tcc::Result<Vec<f64>> {
    let ds = write_generated_dataset(out, n, size, classes, seed, true)?;
    let reloaded = load_dataset(out)?;
    assert_eq!(reloaded.samples, ds.samples, "png round trip is lossless");

    let mut counts = vec![0usize; classes];
    for s in &ds.samples {
        for &c in &s.mask {
            counts[c as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    println!("{} images of {size}x{size} in {}", ds.len(), out.display());
    for (c, share) in shares.iter().enumerate() {
        println!("  class {c}: {:5.1}% of pixels", 100.0 * share);
    }

    let ratio = Ratio::new(1, 8)?;
    let part = partition(ds.ids(), ratio, seed);
    println!(
        "ratio {ratio}: {} labeled, {} unlabeled (first labeled ids {:?})",
        part.labeled_ids.len(),
        part.unlabeled_ids.len(),
        &part.labeled_ids[..part.labeled_ids.len().min(5)]
    );
    Ok(shares)
}

fn main() -> tcc::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tcc_shapes"));
    let mut num = |default: usize| args.next().map(|s| s.parse().expect("numeric argument")).unwrap_or(default);
    let (n, size, classes, seed) = (num(200), num(64), num(4), num(0) as u64);
    run(&out, n, size, classes, seed)?;
    Ok(())
}
