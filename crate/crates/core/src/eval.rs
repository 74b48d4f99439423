//! Confusion-matrix accumulation and mean intersection-over-union.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::Device;

use crate::data::{Dataset, IGNORE_INDEX};
use crate::error::{Result, TccError};
use crate::students::{LabelMap, Student};

/// `counts[g * K + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(TccError::shape(
                "confusion matrix",
                format!("{} entries for K={num_classes}", counts.len()),
            ));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair. Ground-truth pixels equal to the
    /// reserved ignore value are skipped.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(TccError::shape(
                "accumulate",
                format!("{} predictions vs {} labels", pred.len(), gt.len()),
            ));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_INDEX {
                continue;
            }
            for class in [p, g] {
                if class as usize >= k {
                    return Err(TccError::ClassOutOfRange { class, num_classes: k });
                }
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(TccError::shape("merge", "class counts differ".to_string()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes with an empty union) and their mean.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        if valid.is_empty() {
            return Err(TccError::UndefinedMiou);
        }
        Ok((valid.iter().sum::<f64>() / valid.len() as f64, per_class))
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        correct as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub student: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub pixel_acc: f64,
    pub pixels: u64,
    pub images: usize,
}

impl EvalReport {
    pub fn from_confusion(student: &str, conf: &ConfusionMatrix, images: usize) -> Result<Self> {
        let (miou, per_class) = conf.miou()?;
        Ok(Self {
            student: student.to_string(),
            miou,
            per_class,
            pixel_acc: conf.pixel_accuracy(),
            pixels: conf.total(),
            images,
        })
    }

    /// `key: value` lines; classes with an empty union are written as `excluded`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "student: {}", self.student);
        let _ = writeln!(out, "miou: {}", self.miou);
        let _ = writeln!(out, "pixel_acc: {}", self.pixel_acc);
        let _ = writeln!(out, "pixels: {}", self.pixels);
        let _ = writeln!(out, "images: {}", self.images);
        let _ = writeln!(out, "num_classes: {}", self.per_class.len());
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(out, "iou_{c}: {v}");
                }
                None => {
                    let _ = writeln!(out, "iou_{c}: excluded");
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| TccError::Config(format!("malformed report line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| TccError::Config(format!("report lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| TccError::Config(format!("report field `{k}` is not a number")))
        };
        let k = num("num_classes")? as usize;
        let per_class = (0..k)
            .map(|c| {
                let v = get(&format!("iou_{c}"))?;
                if v == "excluded" {
                    Ok(None)
                } else {
                    v.parse()
                        .map(Some)
                        .map_err(|_| TccError::Config(format!("bad iou_{c} `{v}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            student: get("student")?,
            miou: num("miou")?,
            per_class,
            pixel_acc: num("pixel_acc")?,
            pixels: num("pixels")? as u64,
            images: num("images")? as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Confusion matrix of `student` over the given samples, single-scale, batched.
pub fn confusion(student: &Student, dataset: &Dataset, ids: &[u32], batch_size: usize, device: &Device) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(student.config().num_classes);
    for chunk in ids.chunks(batch_size.max(1)) {
        let images = dataset.images(chunk, device)?;
        let out = student.forward(&images)?;
        let gt: LabelMap = dataset.masks(chunk)?;
        conf.accumulate(&out.pseudo_labels.data, &gt.data)?;
    }
    Ok(conf)
}

pub fn evaluate(student: &Student, dataset: &Dataset, ids: &[u32], batch_size: usize, device: &Device) -> Result<EvalReport> {
    let conf = confusion(student, dataset, ids, batch_size, device)?;
    let name = match student.kind() {
        crate::students::StudentKind::Conv => "conv",
        crate::students::StudentKind::Attention => "attention",
    };
    EvalReport::from_confusion(name, &conf, ids.len())
}
