//! Evaluates both students of a checkpoint: mIoU on a dataset, per-class IoU,
//! and the labeled/unlabeled halves of the training set. Without arguments a
//! short run is trained first so there is something to evaluate.
//!
//!     cargo run --release --example evaluate -- [checkpoint dataset_dir train_dir]

use std::path::{Path, PathBuf};

use tcc::config::RunConfig;
use tcc::data::write_generated_dataset;
use tcc::eval::EvalReport;
use tcc::students::StudentKind;
use tcc::train::{checkpoint_paths, evaluate_checkpoint, train, Split, TrainOptions};

/// A 32x32 three-class run of `iterations` steps under `root`; returns its last checkpoint.
pub fn quick_checkpoint(root: &Path, iterations: usize) -> tcc::Result<PathBuf> {
    write_generated_dataset(&root.join("train"), 32, 32, 3, 5, true)?;
    write_generated_dataset(&root.join("val"), 16, 32, 3, 6, true)?;
    let mut cfg = RunConfig::default();
    cfg.data.dataset = root.join("train");
    cfg.data.val_dataset = root.join("val");
    cfg.data.ratio = tcc::data::Ratio::new(1, 4)?;
    cfg.data.batch_size = 4;
    cfg.students.num_classes = 3;
    cfg.students.attention.image_size = 32;
    cfg.students.attention.num_blocks = 2;
    cfg.training.iterations = iterations;
    cfg.training.eval_interval = iterations;
    cfg.training.base_lr = 1e-3;
    train(&cfg, &root.join("run"), &TrainOptions::default())?;
    Ok(checkpoint_paths(&root.join("run")).0)
}

fn show(label: &str, r: &EvalReport) {
    let per_class: Vec<String> = r
        .per_class
        .iter()
        .map(|v| v.map_or("-".to_string(), |x| format!("{:.2}", x)))
        .collect();
    println!(
        "{label:<24} mIoU {:.4}  pixel acc {:.4}  per class [{}]",
        r.miou,
        r.pixel_acc,
        per_class.join(" ")
    );
}

/// Attention-student reports on the held-out set and on the labeled and unlabeled training splits.
pub fn run(checkpoint: &Path, dataset: &Path, train_dir: &Path) -> tcc::Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for kind in [StudentKind::Conv, StudentKind::Attention] {
        let r = evaluate_checkpoint(checkpoint, dataset, Split::All, kind)?;
        show(&format!("{kind:?} held-out"), &r);
        if kind == StudentKind::Attention {
            reports.push(r);
        }
    }
    for split in [Split::Labeled, Split::Unlabeled] {
        let r = evaluate_checkpoint(checkpoint, train_dir, split, StudentKind::Attention)?;
        show(&format!("Attention {split:?}"), &r);
        reports.push(r);
    }
    Ok(reports)
}

fn main() -> tcc::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if let [ckpt, dataset, train_dir] = args.as_slice() {
        run(ckpt, dataset, train_dir)?;
    } else {
        let root = std::env::temp_dir().join("tcc_evaluate");
        let ckpt = quick_checkpoint(&root, 60)?;
        run(&ckpt, &root.join("val"), &root.join("train"))?;
    }
    Ok(())
}
