//! Joint optimization of the cohort.
//!
//! Each iteration builds `L = L_s + g(t) (L_d + λ L_f)` from one labeled and
//! one unlabeled batch, backpropagates it once, and applies a single AdamW
//! update over the union of both students' parameters.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{CohortConfig, Mode, RunConfig, UnlabeledNormalizer};
use crate::data::{self, BatchIterator, CutMix, Dataset, LabeledBatch, Partition, UnlabeledBatch};
use crate::error::{Result, TccError};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{ccd_loss, kl_divergence, rampup, supervised_loss, LossBundle, LossTerms};
use crate::prototype::{cfcd_pipeline, cfcd_with_labels};
use crate::seed::{self, Stream};
use crate::students::{pseudo_labels, ImageBatch, Student, StudentOutput};

/// `α (1 - t/T)^0.9`.
pub fn poly_lr(t: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(TccError::Config("poly schedule needs T > 0".into()));
    }
    if t > total {
        return Err(TccError::Config(format!("iteration {t} beyond T = {total}")));
    }
    Ok(base_lr * (1.0 - t as f64 / total as f64).powf(0.9))
}

/// The two students trained together.
pub struct Cohort {
    pub cnn: Student,
    pub vit: Student,
}

impl Cohort {
    /// Both students draw their initial weights from the seed's init stream, conv first.
    pub fn new(cfg: &CohortConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = seed::rng(seed, Stream::Init);
        let cnn = Student::new(cfg.conv_student(), &mut rng, dtype, device)?;
        let vit = Student::new(cfg.attention_student(), &mut rng, dtype, device)?;
        Ok(Self { cnn, vit })
    }

    /// Every trainable variable, conv student first.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.cnn
            .params()
            .iter()
            .chain(self.vit.params().iter())
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        let mut all = self.cnn.params().snapshot()?;
        all.extend(self.vit.params().snapshot()?);
        Ok(all)
    }

    pub fn load(&self, values: &[(String, Tensor)]) -> Result<()> {
        self.cnn.params().load_from(values)?;
        self.vit.params().load_from(values)
    }
}

/// Adam with decoupled weight decay, one instance over the whole cohort.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            vars,
            m,
            v,
        })
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// One update at learning rate `lr`. Variables without a gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.eps)?;
            let update = (m.affine(1.0 / bc1, 0.0)? / denom)?;
            let decayed = var.as_tensor().affine(1.0 - lr * self.weight_decay, 0.0)?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.vars.iter().zip(self.m.iter().zip(&self.v)).map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub fn load_moments(&mut self, step: u64, m: &[(String, Tensor)], v: &[(String, Tensor)]) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let find = |set: &[(String, Tensor)], kind: &str| -> Result<Tensor> {
                let t = set
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| TccError::Config(format!("checkpoint lacks {kind} for `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(TccError::shape("load moments", format!("{name}: {:?} vs {:?}", t.dims(), var.dims())));
                }
                Ok(t.to_dtype(var.dtype())?)
            };
            self.m[i] = find(m, "first moment")?;
            self.v[i] = find(v, "second moment")?;
        }
        self.step = step;
        Ok(())
    }
}

/// Everything needed to continue a run.
pub struct TrainState {
    pub config: RunConfig,
    pub cohort: Cohort,
    pub optimizer: AdamW,
    /// Number of completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(config: RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let cohort = Cohort::new(&config.students, config.training.seed, dtype, device)?;
        let t = &config.training;
        let optimizer = AdamW::new(cohort.vars(), t.beta1, t.beta2, t.adam_eps, t.weight_decay)?;
        Ok(Self {
            config,
            cohort,
            optimizer,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut blocks = Vec::new();
        for (name, var) in self.optimizer.vars() {
            blocks.push((format!("param/{name}"), var.as_tensor().copy()?));
        }
        for (name, m, v) in self.optimizer.moments() {
            blocks.push((format!("adam.m/{name}"), m.clone()));
            blocks.push((format!("adam.v/{name}"), v.clone()));
        }
        Ok(Checkpoint {
            iteration: self.iteration as u64,
            adam_step: self.optimizer.step,
            config_text: self.config.to_text()?,
            blocks,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let config = RunConfig::parse(&ckpt.config_text)?;
        let mut state = Self::new(config, dtype, device)?;
        state.cohort.load(&ckpt.group("param"))?;
        state
            .optimizer
            .load_moments(ckpt.adam_step, &ckpt.group("adam.m"), &ckpt.group("adam.v"))?;
        state.iteration = ckpt.iteration as usize;
        if state.iteration > state.config.training.iterations {
            return Err(TccError::Checkpoint {
                path: PathBuf::new(),
                reason: format!("iteration {} beyond T", state.iteration),
            });
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path, device)?, dtype, device).map_err(|e| match e {
            TccError::Checkpoint { reason, .. } => TccError::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub lr: f64,
    pub g: f64,
    pub loss_sup: f64,
    pub loss_ccd: f64,
    pub loss_cfcd: f64,
    pub loss_total: f64,
    pub miou_cnn: Option<f64>,
    pub miou_vit: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,lr,g,loss_sup,loss_ccd,loss_cfcd,loss_total,miou_cnn,miou_vit";

/// Cross-distillation targets on the unlabeled batch, optionally CutMix-ed.
struct UnlabeledView {
    cnn: StudentOutput,
    vit: StudentOutput,
    /// Detached conv logits mixed like the inputs (target for the attention student).
    cnn_target: Tensor,
    vit_target: Tensor,
    /// Pseudo labels used to mask each student's features.
    labels_for_cnn: crate::students::LabelMap,
    labels_for_vit: crate::students::LabelMap,
}

fn unlabeled_view(cohort: &Cohort, batch: &ImageBatch, cutmix: Option<&CutMix>) -> Result<UnlabeledView> {
    match cutmix {
        None => {
            let cnn = cohort.cnn.forward(batch)?;
            let vit = cohort.vit.forward(batch)?;
            Ok(UnlabeledView {
                cnn_target: cnn.logits.detach(),
                vit_target: vit.logits.detach(),
                labels_for_cnn: vit.pseudo_labels.clone(),
                labels_for_vit: cnn.pseudo_labels.clone(),
                cnn,
                vit,
            })
        }
        Some(mix) => {
            // targets come from the unmixed images, then get mixed by the same boxes
            let plain_c = cohort.cnn.forward(batch)?.logits.detach();
            let plain_v = cohort.vit.forward(batch)?.logits.detach();
            let mixed = mix.mix_images(batch, &ImageBatch::new(data::roll_batch(batch.tensor())?)?)?;
            let cnn = cohort.cnn.forward(&mixed)?;
            let vit = cohort.vit.forward(&mixed)?;
            let cnn_target = mix.mix_tensor(&plain_c, &data::roll_batch(&plain_c)?)?;
            let vit_target = mix.mix_tensor(&plain_v, &data::roll_batch(&plain_v)?)?;
            Ok(UnlabeledView {
                labels_for_cnn: pseudo_labels(&vit_target)?,
                labels_for_vit: pseudo_labels(&cnn_target)?,
                cnn_target,
                vit_target,
                cnn,
                vit,
            })
        }
    }
}

/// The differentiable loss terms of iteration `t`, before weighting.
pub fn loss_terms(
    cohort: &Cohort,
    config: &RunConfig,
    t: usize,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
) -> Result<LossTerms> {
    let mode = config.training.mode;
    let k = config.students.num_classes;
    labeled.masks.check_classes(k)?;
    let cnn_l = cohort.cnn.forward(&labeled.images)?;
    let vit_l = cohort.vit.forward(&labeled.images)?;
    let sup = supervised_loss(&cnn_l.logits, &vit_l.logits, &labeled.masks)?;
    if mode == Mode::Supervised {
        return Ok(LossTerms { sup, ccd: None, cfcd: None });
    }
    let unlabeled = unlabeled.ok_or_else(|| TccError::Config(format!("mode {} needs an unlabeled batch", mode.name())))?;
    let b_l = labeled.images.batch_size();
    let b_u = unlabeled.images.batch_size();
    let ccd_l = ccd_loss(&cnn_l.logits, &vit_l.logits, b_l)?;

    let mix = config.data.cutmix.then(|| {
        let (_, _, h, w) = unlabeled.images.dims();
        CutMix::sample(b_u, h, w, &mut seed::rng_at(config.training.seed, Stream::CutMix, t as u64))
    });
    let view = unlabeled_view(cohort, &unlabeled.images, mix.as_ref())?;
    let normalizer = match config.losses.unlabeled_normalizer {
        UnlabeledNormalizer::UnlabeledBatch => b_u,
        UnlabeledNormalizer::LabeledBatch => b_l,
    };
    let kl_u = (kl_divergence(&view.cnn_target, &view.vit.logits)? + kl_divergence(&view.vit_target, &view.cnn.logits)?)?;
    let ccd_u = (kl_u * (b_u as f64 / normalizer as f64))?;
    let ccd = (ccd_l + ccd_u)?;
    if mode == Mode::Ccd {
        return Ok(LossTerms { sup, ccd: Some(ccd), cfcd: None });
    }
    let cfcd = if mix.is_some() {
        cfcd_with_labels(
            &view.cnn.features,
            &view.labels_for_cnn,
            &view.vit.features,
            &view.labels_for_vit,
            k,
            config.losses.prototype_scope,
        )?
    } else {
        cfcd_pipeline(&view.cnn, &view.vit, k, config.losses.prototype_scope)?
    };
    Ok(LossTerms {
        sup,
        ccd: Some(ccd),
        cfcd: Some(cfcd),
    })
}

/// One optimizer update from the single total loss; advances `state.iteration`.
pub fn train_step(state: &mut TrainState, labeled: &LabeledBatch, unlabeled: Option<&UnlabeledBatch>) -> Result<MetricsRecord> {
    let cfg = &state.config;
    let t = state.iteration;
    let total_iters = cfg.training.iterations;
    if t >= total_iters {
        return Err(TccError::Config(format!("run already finished ({t} of {total_iters} iterations)")));
    }
    let lr = poly_lr(t, total_iters, cfg.training.base_lr)?;
    let g = rampup(t, cfg.ramp_iterations());
    let terms = loss_terms(&state.cohort, cfg, t, labeled, unlabeled)?;
    let (total, bundle) = terms.total(g, cfg.losses.lambda)?;
    let grads = total.backward()?;
    state.optimizer.step(&grads, lr)?;
    state.iteration += 1;
    Ok(record(t, lr, &bundle))
}

fn record(t: usize, lr: f64, b: &LossBundle) -> MetricsRecord {
    MetricsRecord {
        iter: t,
        lr,
        g: b.g,
        loss_sup: b.l_sup,
        loss_ccd: b.l_ccd,
        loss_cfcd: b.l_cfcd,
        loss_total: b.total,
        miou_cnn: None,
        miou_vit: None,
    }
}

/// Controls around a training run that are not part of its configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/last.ckpt` when present.
    pub resume: bool,
    /// Stop after this many completed iterations (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub iterations: usize,
    pub records: Vec<MetricsRecord>,
    /// Final evaluation of the attention student (the reported model).
    pub report: Option<EvalReport>,
    pub report_conv: Option<EvalReport>,
    pub best_miou_vit: Option<f64>,
    pub seconds: f64,
}

pub fn checkpoint_paths(run_dir: &Path) -> (PathBuf, PathBuf) {
    let dir = run_dir.join("checkpoints");
    (dir.join("last.ckpt"), dir.join("best.ckpt"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<&str> = reader.headers()?.iter().collect::<Vec<_>>();
    if header.join(",") != METRICS_HEADER {
        return Err(TccError::Config(format!("{}: unexpected metrics header", path.display())));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(TccError::from))
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn append_metrics(path: &Path, row: &MetricsRecord) -> Result<()> {
    let file = OpenOptions::new().append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

fn check_dataset(ds: &Dataset, cfg: &RunConfig, path: &Path) -> Result<()> {
    let m = &ds.manifest;
    if m.num_classes != cfg.students.num_classes {
        return Err(TccError::Config(format!(
            "{} has {} classes but students.num_classes = {}",
            path.display(),
            m.num_classes,
            cfg.students.num_classes
        )));
    }
    let size = cfg.students.attention.image_size;
    if m.height != size || m.width != size {
        return Err(TccError::Config(format!(
            "{} holds {}x{} images but students.attention.image_size = {size}",
            path.display(),
            m.height,
            m.width
        )));
    }
    Ok(())
}

fn evaluate_cohort(state: &TrainState, val: &Dataset, device: &Device) -> Result<(EvalReport, EvalReport)> {
    let bs = state.config.training.eval_batch_size;
    let ids = val.ids().to_vec();
    Ok((
        evaluate(&state.cohort.cnn, val, &ids, bs, device)?,
        evaluate(&state.cohort.vit, val, &ids, bs, device)?,
    ))
}

/// Runs (or resumes) the configured number of iterations, writing
/// `config.resolved`, `partition.txt`, `metrics.csv`, `checkpoints/{last,best}.ckpt`
/// and `report.txt` under `run_dir`.
pub fn train(config: &RunConfig, run_dir: &Path, options: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    let started = Instant::now();
    let device = Device::Cpu;
    let train_path = data::require_dataset_dir(&config.data.dataset)?;
    let val_path = data::require_dataset_dir(&config.data.val_dataset)?;
    let train_set = data::load_dataset(&train_path)?;
    let val_set = data::load_dataset(&val_path)?;
    check_dataset(&train_set, config, &train_path)?;
    check_dataset(&val_set, config, &val_path)?;

    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::write(run_dir.join("config.resolved"), config.to_text()?)?;
    let seed = config.training.seed;
    let part: Partition = data::partition(train_set.ids(), config.data.ratio, seed);
    part.save(&run_dir.join("partition.txt"))?;

    let (last_path, best_path) = checkpoint_paths(run_dir);
    let metrics_path = run_dir.join("metrics.csv");
    let mut state = if options.resume && last_path.exists() {
        let state = TrainState::load(&last_path, DType::F32, &device)?;
        if state.config != *config {
            return Err(TccError::Config(format!(
                "{} was written with a different configuration",
                last_path.display()
            )));
        }
        log::info!("resuming from iteration {}", state.iteration);
        state
    } else {
        TrainState::new(config.clone(), DType::F32, &device)?
    };

    // keep only rows the restored state has already produced
    let mut kept: Vec<MetricsRecord> = if state.iteration > 0 && metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.iter < state.iteration)
            .collect()
    } else {
        Vec::new()
    };
    write_metrics(&metrics_path, &kept)?;
    let mut best = kept.iter().filter_map(|r| r.miou_vit).fold(None, |acc: Option<f64>, m| {
        Some(acc.map_or(m, |a| a.max(m)))
    });

    let mode = config.training.mode;
    let mut batches = BatchIterator::new(
        &train_set,
        &part,
        config.data.batch_size,
        config.unlabeled_batch_size(),
        mode.uses_unlabeled(),
        seed,
        &device,
    )?;
    let total_iters = config.training.iterations;
    let stop = options.stop_after.unwrap_or(total_iters).min(total_iters);
    let mut last_reports = None;
    while state.iteration < stop {
        let t = state.iteration;
        let (labeled, unlabeled) = batches.batch_at(t as u64)?;
        let mut rec = train_step(&mut state, &labeled, unlabeled.as_ref())?;
        let done = state.iteration;
        if done % config.training.eval_interval == 0 || done == total_iters {
            let (rc, rv) = evaluate_cohort(&state, &val_set, &device)?;
            rec.miou_cnn = Some(rc.miou);
            rec.miou_vit = Some(rv.miou);
            log::info!(
                "iter {done}/{total_iters} loss {:.4} miou conv {:.4} attention {:.4}",
                rec.loss_total,
                rc.miou,
                rv.miou
            );
            if best.is_none_or(|b| rv.miou > b) {
                best = Some(rv.miou);
                state.save(&best_path)?;
            }
            state.save(&last_path)?;
            last_reports = Some((rc, rv));
        }
        append_metrics(&metrics_path, &rec)?;
        kept.push(rec);
    }
    if state.iteration < total_iters {
        // interrupted on request: make the resume point exact
        state.save(&last_path)?;
    }

    let (report_conv, report) = match last_reports {
        Some((c, v)) => (Some(c), Some(v)),
        None if state.iteration == total_iters => {
            let (c, v) = evaluate_cohort(&state, &val_set, &device)?;
            (Some(c), Some(v))
        }
        None => (None, None),
    };
    if let (Some(v), Some(c)) = (&report, &report_conv) {
        v.save(&run_dir.join("report.txt"))?;
        c.save(&run_dir.join("report_conv.txt"))?;
    }
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        iterations: state.iteration,
        records: kept,
        report,
        report_conv,
        best_miou_vit: best,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Which images of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    /// The labeled part of the run's partition.
    Labeled,
    Unlabeled,
}

impl std::str::FromStr for Split {
    type Err = TccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(TccError::Config(format!("unknown split `{other}` (all, labeled, unlabeled)"))),
        }
    }
}

/// Evaluates one student of a checkpoint on `dataset_dir`. Partition splits are
/// recomputed from the ratio and seed stored in the checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset_dir: &Path,
    split: Split,
    student: crate::students::StudentKind,
) -> Result<EvalReport> {
    let device = Device::Cpu;
    if !checkpoint.is_file() {
        return Err(TccError::Checkpoint {
            path: checkpoint.to_path_buf(),
            reason: "no such file".into(),
        });
    }
    let state = TrainState::load(checkpoint, DType::F32, &device)?;
    let dataset = data::load_dataset(&data::require_dataset_dir(dataset_dir)?)?;
    check_dataset(&dataset, &state.config, dataset_dir)?;
    let ids = match split {
        Split::All => dataset.ids().to_vec(),
        Split::Labeled | Split::Unlabeled => {
            let part = data::partition(dataset.ids(), state.config.data.ratio, state.config.training.seed);
            if split == Split::Labeled {
                part.labeled_ids
            } else {
                part.unlabeled_ids
            }
        }
    };
    if ids.is_empty() {
        return Err(TccError::Config("selected split is empty".into()));
    }
    let model = match student {
        crate::students::StudentKind::Conv => &state.cohort.cnn,
        crate::students::StudentKind::Attention => &state.cohort.vit,
    };
    evaluate(model, &dataset, &ids, state.config.training.eval_batch_size, &device)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        let a = 3e-4;
        assert_eq!(poly_lr(0, 3000, a).unwrap(), a);
        assert_eq!(poly_lr(3000, 3000, a).unwrap(), 0.0);
        let half = poly_lr(1500, 3000, a).unwrap();
        assert!((half - 0.5f64.powf(0.9) * a).abs() < 1e-12);
        assert!((half / a - 0.5359).abs() < 1e-4);
        assert!(poly_lr(0, 0, a).is_err());
        assert!(poly_lr(4, 3, a).is_err());
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let d = Device::Cpu;
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &d).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), var.clone())], 0.9, 0.999, 1e-8, 0.1).unwrap();
        // loss = sum(w^2) / 2 -> grad = w
        let loss = (var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, 0.01).unwrap();
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        // first bias-corrected step is lr * sign(g) (up to eps), after decay p (1 - lr wd)
        for (g, p0) in got.iter().zip([1.0f64, -2.0]) {
            let expect = p0 * (1.0 - 0.01 * 0.1) - 0.01 * p0 / (p0.abs() + 1e-8);
            assert!((g - expect).abs() < 1e-12, "{g} vs {expect}");
        }
        assert_eq!(opt.step, 1);
    }
}
