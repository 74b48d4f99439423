//! Renders loss-component and mIoU curves from one or more `metrics.csv`
//! logs; several logs are overlaid, labelled by their run directory.
//!
//!     cargo run --example plot_metrics -- <out_dir> <run_a/metrics.csv> [run_b/metrics.csv ...]

use std::path::{Path, PathBuf};

use tcc::plot::{plot_series, Series};

pub fn run(csvs: &[PathBuf], out: &Path) -> tcc::Result<Vec<PathBuf>> {
    let series = csvs.iter().map(|p| Series::load(p)).collect::<tcc::Result<Vec<_>>>()?;
    for s in &series {
        let last = s.records.last().expect("non-empty log");
        let best = s.records.iter().filter_map(|r| r.miou_vit).fold(f64::NAN, f64::max);
        println!(
            "{}: {} iterations, final loss {:.4}, best attention mIoU {:.4}",
            s.label,
            s.records.len(),
            last.loss_total,
            best
        );
    }
    let written = plot_series(&series, out)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

fn main() -> tcc::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let out = args.next().expect("usage: plot_metrics <out_dir> <metrics.csv>...");
    let csvs: Vec<PathBuf> = args.collect();
    if csvs.is_empty() {
        eprintln!("no metrics files given");
        std::process::exit(1);
    }
    run(&csvs, &out)?;
    Ok(())
}
