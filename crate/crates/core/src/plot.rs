//! Static SVG curves from one or more metrics logs.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Result, TccError};
use crate::train::{read_metrics, MetricsRecord};

/// A labelled metrics log.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub records: Vec<MetricsRecord>,
}

impl Series {
    /// Reads `path`; the label defaults to the parent directory name.
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_metrics(path)?;
        if records.is_empty() {
            return Err(TccError::Config(format!("{} holds no rows", path.display())));
        }
        let label = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Self { label, records })
    }
}

type Getter = fn(&MetricsRecord) -> Option<f64>;

const PANELS: [(&str, &str, Getter); 4] = [
    ("loss_sup", "supervised Dice loss", |r| Some(r.loss_sup)),
    ("loss_ccd", "cross distillation loss", |r| Some(r.loss_ccd)),
    ("loss_cfcd", "feature consistency loss", |r| Some(r.loss_cfcd)),
    ("loss_total", "total loss", |r| Some(r.loss_total)),
];

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> TccError {
    TccError::Plot(e.to_string())
}

/// Label, points and colour of one curve.
type Curve = (String, Vec<(f64, f64)>, RGBColor);

fn draw_panel(path: &Path, title: &str, lines: &[Curve]) -> Result<()> {
    let points = lines.iter().flat_map(|(_, p, _)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);

    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .draw()
        .map_err(plot_err)?;
    for (label, pts, color) in lines {
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes one SVG per loss component plus `miou.svg` into `out_dir`;
/// several series are overlaid in each panel. Returns the written paths.
pub fn plot_series(series: &[Series], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if series.is_empty() {
        return Err(TccError::Config("nothing to plot".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, title, get) in PANELS {
        let lines: Vec<_> = series
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pts = s.records.iter().filter_map(|r| get(r).map(|v| (r.iter as f64, v))).collect();
                (s.label.clone(), pts, PALETTE[i % PALETTE.len()])
            })
            .collect();
        let path = out_dir.join(format!("{name}.svg"));
        draw_panel(&path, title, &lines)?;
        written.push(path);
    }
    let mut lines = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (student, get) in [("attention", (|r: &MetricsRecord| r.miou_vit) as Getter), ("conv", |r| r.miou_cnn)] {
            let pts: Vec<(f64, f64)> = s.records.iter().filter_map(|r| get(r).map(|v| (r.iter as f64, v))).collect();
            let shade = if student == "conv" { color.mix(0.5).to_rgba() } else { color.to_rgba() };
            let shade = RGBColor(shade.0, shade.1, shade.2);
            lines.push((format!("{} {student}", s.label), pts, shade));
        }
    }
    let path = out_dir.join("miou.svg");
    draw_panel(&path, "validation mIoU", &lines)?;
    written.push(path);
    Ok(written)
}

/// Loads each CSV and plots them together.
pub fn plot_metrics(csvs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let series = csvs.iter().map(|p| Series::load(p)).collect::<Result<Vec<_>>>()?;
    plot_series(&series, out_dir)
}
