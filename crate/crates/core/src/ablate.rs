//! Loss-combination sweep: every mode × label ratio × seed, one run each,
//! summarized as a markdown table of attention-student mIoU.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{Mode, RunConfig};
use crate::data::Ratio;
use crate::error::{Result, TccError};
use crate::eval::EvalReport;
use crate::train::{train, TrainOptions};

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub base: RunConfig,
    pub modes: Vec<Mode>,
    pub ratios: Vec<Ratio>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    pub fn new(base: RunConfig, ratios: Vec<Ratio>, seeds: Vec<u64>) -> Self {
        Self {
            base,
            modes: Mode::ALL.to_vec(),
            ratios,
            seeds,
        }
    }

    pub fn cell_config(&self, mode: Mode, ratio: Ratio, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.training.mode = mode;
        cfg.training.seed = seed;
        cfg.data.ratio = ratio;
        cfg
    }

    pub fn len(&self) -> usize {
        self.modes.len() * self.ratios.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn cell_dir(out_dir: &Path, mode: Mode, ratio: Ratio, seed: u64) -> PathBuf {
    out_dir.join(format!("{}_r{}-{}_s{seed}", mode.name(), ratio.num, ratio.den))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub mode: Mode,
    pub ratio: Ratio,
    pub seed: u64,
    pub miou_vit: f64,
    pub miou_cnn: f64,
    pub seconds: f64,
    /// True when the cell was already complete and not rerun.
    pub reused: bool,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub results: Vec<CellResult>,
    pub table: String,
}

impl AblationOutcome {
    /// Seed-mean attention mIoU for one (mode, ratio) cell.
    pub fn mean(&self, mode: Mode, ratio: Ratio) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.mode == mode && r.ratio == ratio)
            .map(|r| r.miou_vit)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn total_seconds(&self) -> f64 {
        self.results.iter().map(|r| r.seconds).sum()
    }
}

fn read_completed(dir: &Path, cfg: &RunConfig) -> Result<Option<(EvalReport, EvalReport, f64)>> {
    let resolved = dir.join("config.resolved");
    let (vit, conv, timing) = (dir.join("report.txt"), dir.join("report_conv.txt"), dir.join("seconds.txt"));
    if !(resolved.exists() && vit.exists() && conv.exists() && timing.exists()) {
        return Ok(None);
    }
    if std::fs::read_to_string(&resolved)? != cfg.to_text()? {
        return Ok(None);
    }
    let seconds = std::fs::read_to_string(&timing)?
        .trim()
        .parse()
        .map_err(|_| TccError::Config(format!("{}: bad timing", timing.display())))?;
    Ok(Some((
        EvalReport::parse(&std::fs::read_to_string(vit)?)?,
        EvalReport::parse(&std::fs::read_to_string(conv)?)?,
        seconds,
    )))
}

/// Results of the cells under `out_dir` that are already complete; nothing is run.
pub fn completed_cells(plan: &AblationPlan, out_dir: &Path) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for &ratio in &plan.ratios {
        for &mode in &plan.modes {
            for &seed in &plan.seeds {
                let cfg = plan.cell_config(mode, ratio, seed);
                if let Some((vit, conv, seconds)) = read_completed(&cell_dir(out_dir, mode, ratio, seed), &cfg)? {
                    results.push(CellResult {
                        mode,
                        ratio,
                        seed,
                        miou_vit: vit.miou,
                        miou_cnn: conv.miou,
                        seconds,
                        reused: true,
                    });
                }
            }
        }
    }
    Ok(results)
}

/// Runs every missing cell under `out_dir` and writes `table.md` and `results.csv`.
pub fn run_ablation(plan: &AblationPlan, out_dir: &Path) -> Result<AblationOutcome> {
    if plan.is_empty() {
        return Err(TccError::Config("ablation needs at least one mode, ratio and seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut results = Vec::with_capacity(plan.len());
    for &ratio in &plan.ratios {
        for &mode in &plan.modes {
            for &seed in &plan.seeds {
                let cfg = plan.cell_config(mode, ratio, seed);
                let dir = cell_dir(out_dir, mode, ratio, seed);
                let (vit, conv, seconds, reused) = match read_completed(&dir, &cfg)? {
                    Some((v, c, s)) => {
                        log::info!("{}: complete, skipped", dir.display());
                        (v, c, s, true)
                    }
                    None => {
                        log::info!("{}: running", dir.display());
                        let summary = train(&cfg, &dir, &TrainOptions { resume: true, stop_after: None })?;
                        // a resumed cell reports only the time spent in this call
                        std::fs::write(dir.join("seconds.txt"), format!("{}\n", summary.seconds))?;
                        let missing = || TccError::Config(format!("{}: run produced no report", dir.display()));
                        (
                            summary.report.ok_or_else(missing)?,
                            summary.report_conv.ok_or_else(missing)?,
                            summary.seconds,
                            false,
                        )
                    }
                };
                results.push(CellResult {
                    mode,
                    ratio,
                    seed,
                    miou_vit: vit.miou,
                    miou_cnn: conv.miou,
                    seconds,
                    reused,
                });
            }
        }
    }
    let table = render_table(plan, &results);
    std::fs::write(out_dir.join("table.md"), &table)?;
    write_results_csv(&out_dir.join("results.csv"), &results)?;
    Ok(AblationOutcome { results, table })
}

fn write_results_csv(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "ratio", "seed", "miou_vit", "miou_cnn", "seconds"])?;
    for r in results {
        w.write_record([
            r.mode.name().to_string(),
            r.ratio.to_string(),
            r.seed.to_string(),
            r.miou_vit.to_string(),
            r.miou_cnn.to_string(),
            r.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Rows are loss combinations, columns label ratios; cells hold
/// `mean ± std` of attention-student mIoU (percent) and the seeds used.
pub fn render_table(plan: &AblationPlan, results: &[CellResult]) -> String {
    let mut out = String::new();
    let _ = write!(out, "| L_s | L_d | L_f |");
    for r in &plan.ratios {
        let _ = write!(out, " {r} |");
    }
    out.push('\n');
    out.push_str("|:---:|:---:|:---:|");
    for _ in &plan.ratios {
        out.push_str("---|");
    }
    out.push('\n');
    for &mode in &plan.modes {
        let tick = |on: bool| if on { "✓" } else { " " };
        let _ = write!(
            out,
            "| {} | {} | {} |",
            tick(true),
            tick(mode != Mode::Supervised),
            tick(mode == Mode::Tcc)
        );
        for &ratio in &plan.ratios {
            let cell: Vec<&CellResult> = results.iter().filter(|r| r.mode == mode && r.ratio == ratio).collect();
            if cell.is_empty() {
                out.push_str(" - |");
                continue;
            }
            let values: Vec<f64> = cell.iter().map(|r| 100.0 * r.miou_vit).collect();
            let (m, s) = mean_std(&values);
            let seeds: Vec<String> = cell.iter().map(|r| r.seed.to_string()).collect();
            let _ = write!(out, " {m:.2} ± {s:.2} (seeds {}) |", seeds.join(","));
        }
        out.push('\n');
    }
    out
}
