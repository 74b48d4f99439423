//! A small loss-combination sweep ({L_s}, {L_s,L_d}, {L_s,L_d,L_f}) over two
//! label ratios and two seeds on 32x32 shapes, printed as a markdown table.
//! Finished cells are reused when the example is run again.
//!
//!     cargo run --release --example ablation -- [out_dir] [iterations]

use std::path::{Path, PathBuf};

use tcc::ablate::{run_ablation, AblationOutcome, AblationPlan};
use tcc::config::RunConfig;
use tcc::data::{write_generated_dataset, Ratio};

pub fn small_base(root: &Path, iterations: usize) -> tcc::Result<RunConfig> {
    if !root.join("data/train/manifest.json").is_file() {
        write_generated_dataset(&root.join("data/train"), 48, 32, 3, 21, true)?;
        write_generated_dataset(&root.join("data/val"), 24, 32, 3, 22, true)?;
    }
    let mut cfg = RunConfig::default();
    cfg.data.dataset = root.join("data/train");
    cfg.data.val_dataset = root.join("data/val");
    cfg.data.batch_size = 4;
    cfg.students.num_classes = 3;
    cfg.students.conv.widths = vec![16, 32, 32, 32];
    cfg.students.attention.image_size = 32;
    cfg.students.attention.embed_dim = 32;
    cfg.students.attention.num_blocks = 2;
    cfg.training.iterations = iterations;
    cfg.training.eval_interval = iterations;
    cfg.training.base_lr = 1e-3;
    Ok(cfg)
}

pub fn run(out: &Path, iterations: usize, seeds: Vec<u64>) -> tcc::Result<AblationOutcome> {
    let base = small_base(out, iterations)?;
    let plan = AblationPlan::new(base, vec![Ratio::new(1, 8)?, Ratio::new(1, 2)?], seeds);
    let outcome = run_ablation(&plan, out)?;
    print!("{}", outcome.table);
    let reused = outcome.results.iter().filter(|r| r.reused).count();
    println!(
        "{} runs ({reused} reused), {:.1}s of training; results in {}",
        outcome.results.len(),
        outcome.total_seconds(),
        out.join("results.csv").display()
    );
    Ok(outcome)
}

fn main() -> tcc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tcc_ablation"));
    let iterations = args.next().map(|s| s.parse().expect("iterations")).unwrap_or(300);
    run(&out, iterations, vec![0, 1])?;
    Ok(())
}
