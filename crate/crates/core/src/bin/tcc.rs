use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tcc::ablate::{run_ablation, AblationPlan};
use tcc::config::{Mode, RunConfig};
use tcc::data::{write_generated_dataset, Ratio};
use tcc::students::StudentKind;
use tcc::train::{evaluate_checkpoint, train, Split, TrainOptions};
use tcc::TccError;

#[derive(Parser)]
#[command(name = "tcc", version, about = "Transformer-CNN cohort semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudentArg {
    Attention,
    Conv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the cohort from a config file.
    Train {
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        ratio: Option<Ratio>,
        #[arg(long)]
        cutmix: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Run directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// all, labeled or unlabeled (the latter two use the run's partition).
        #[arg(long, default_value = "all")]
        split: Split,
        #[arg(long, value_enum, default_value = "attention")]
        student: StudentArg,
        #[arg(long, default_value = "report.txt")]
        out: PathBuf,
    },
    /// Plot loss components and mIoU from one or more metrics logs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Sweep loss combinations over label ratios and seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1/8")]
        ratios: Vec<Ratio>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> tcc::Result<()> {
    match cli.command {
        Command::GenData { n, size, classes, seed, out, force } => {
            let ds = write_generated_dataset(&out, n, size, classes, seed, force)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { config, mode, ratio, cutmix, seed, iterations, out, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.training.mode = m;
            }
            if let Some(r) = ratio {
                cfg.data.ratio = r;
            }
            cfg.data.cutmix |= cutmix;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(t) = iterations {
                cfg.training.iterations = t;
            }
            cfg.validate()?;
            let summary = train(&cfg, &out, &TrainOptions { resume, stop_after: None })?;
            if let Some(r) = &summary.report {
                println!("attention mIoU {:.4}", r.miou);
            }
            if let Some(r) = &summary.report_conv {
                println!("conv mIoU {:.4}", r.miou);
            }
            println!("{} iterations in {:.1}s -> {}", summary.iterations, summary.seconds, out.display());
        }
        Command::Eval { checkpoint, dataset, split, student, out } => {
            let kind = match student {
                StudentArg::Attention => StudentKind::Attention,
                StudentArg::Conv => StudentKind::Conv,
            };
            let report = evaluate_checkpoint(&checkpoint, &dataset, split, kind)?;
            report.save(&out)?;
            print!("{}", report.to_text());
        }
        Command::Plot { csv, out } => {
            for p in tcc::plot::plot_metrics(&csv, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { config, ratios, seeds, iterations, out } => {
            let mut base = RunConfig::load(&config)?;
            if let Some(t) = iterations {
                base.training.iterations = t;
            }
            base.validate()?;
            let outcome = run_ablation(&AblationPlan::new(base, ratios, seeds), &out)?;
            print!("{}", outcome.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if TccError::is_validation(&e) { 1 } else { 2 })
        }
    }
}
