mod common;

use candle_core::{DType, Device, Tensor, Var};
use tcc::config::{Mode, RunConfig};
use tcc::data::{generate_shapes_dataset, load_dataset, partition, BatchIterator, LabeledBatch, UnlabeledBatch};
use tcc::eval::evaluate;
use tcc::losses::{ccd_loss, dice_loss, kl_divergence, rampup};
use tcc::students::{ConvConfig, ImageBatch, Student, StudentConfig};
use tcc::train::{
    checkpoint_paths, loss_terms, read_metrics, train, train_step, AdamW, Cohort, TrainOptions, TrainState,
};
use tcc::TccError;

use common::{tiny_config, tiny_datasets};

fn batches(cfg: &RunConfig, t: u64) -> (LabeledBatch, Option<UnlabeledBatch>) {
    let ds = load_dataset(&cfg.data.dataset).unwrap();
    let part = partition(ds.ids(), cfg.data.ratio, cfg.training.seed);
    let mut it = BatchIterator::new(
        &ds,
        &part,
        cfg.data.batch_size,
        cfg.unlabeled_batch_size(),
        cfg.training.mode.uses_unlabeled(),
        cfg.training.seed,
        &Device::Cpu,
    )
    .unwrap();
    it.batch_at(t).unwrap()
}

fn as_f64(
    (labeled, unlabeled): (LabeledBatch, Option<UnlabeledBatch>),
) -> (LabeledBatch, Option<UnlabeledBatch>) {
    let cast = |b: &ImageBatch| ImageBatch::new(b.tensor().to_dtype(DType::F64).unwrap()).unwrap();
    let labeled = LabeledBatch { images: cast(&labeled.images), ..labeled };
    let unlabeled = unlabeled.map(|u| UnlabeledBatch { images: cast(&u.images), ..u });
    (labeled, unlabeled)
}

fn flat(values: &[(String, Tensor)]) -> Vec<f64> {
    values
        .iter()
        .flat_map(|(_, t)| t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_ramp_weight_reduces_to_supervised_step() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let cfg = tiny_config(dir.path());
    let (labeled, unlabeled) = as_f64(batches(&cfg, 0));

    // cohort step with g = 0 applied by hand
    let state = TrainState::new(cfg.clone(), DType::F64, &Device::Cpu).unwrap();
    let mut opt = AdamW::new(state.cohort.vars(), 0.9, 0.999, 1e-8, 0.01).unwrap();
    let terms = loss_terms(&state.cohort, &cfg, 0, &labeled, unlabeled.as_ref()).unwrap();
    assert!(terms.ccd.is_some() && terms.cfcd.is_some());
    let (total, bundle) = terms.total(0.0, cfg.losses.lambda).unwrap();
    assert_eq!(bundle.total, bundle.l_sup);
    opt.step(&total.backward().unwrap(), cfg.training.base_lr).unwrap();

    let mut sup_cfg = cfg.clone();
    sup_cfg.training.mode = Mode::Supervised;
    let mut sup = TrainState::new(sup_cfg, DType::F64, &Device::Cpu).unwrap();
    train_step(&mut sup, &labeled, None).unwrap();

    let a = flat(&state.cohort.snapshot().unwrap());
    let b = flat(&sup.cohort.snapshot().unwrap());
    assert!(max_diff(&a, &b) <= 1e-12, "diff {}", max_diff(&a, &b));
}

#[test]
fn ramp_starts_small_and_saturates() {
    let cfg = RunConfig::default();
    let ramp = cfg.ramp_iterations();
    assert_eq!(ramp, 1200);
    assert!((rampup(0, ramp) - (-5f64).exp()).abs() < 1e-15);
    assert_eq!(rampup(ramp, ramp), 1.0);
    assert_eq!(rampup(ramp + 500, ramp), 1.0);
}

/// Gradients with respect to each student must be exactly those obtained when
/// the other student's predictions come from a disconnected copy.
#[test]
fn distillation_targets_carry_no_gradient() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let mut cfg = tiny_config(dir.path());
    cfg.training.mode = Mode::Ccd;
    let (labeled, unlabeled) = as_f64(batches(&cfg, 3));
    let unlabeled = unlabeled.unwrap();

    let cohort = Cohort::new(&cfg.students, 5, DType::F64, &Device::Cpu).unwrap();
    let twin = Cohort::new(&cfg.students, 5, DType::F64, &Device::Cpu).unwrap();
    let terms = loss_terms(&cohort, &cfg, 3, &labeled, Some(&unlabeled)).unwrap();
    let grads = terms.ccd.unwrap().backward().unwrap();

    let b_l = labeled.images.batch_size();
    let c_l = cohort.cnn.forward(&labeled.images).unwrap().logits;
    let v_l = cohort.vit.forward(&labeled.images).unwrap().logits;
    let c_u = cohort.cnn.forward(&unlabeled.images).unwrap().logits;
    let v_u = cohort.vit.forward(&unlabeled.images).unwrap().logits;
    let tc_l = twin.cnn.forward(&labeled.images).unwrap().logits;
    let tv_l = twin.vit.forward(&labeled.images).unwrap().logits;
    let tc_u = twin.cnn.forward(&unlabeled.images).unwrap().logits;
    let tv_u = twin.vit.forward(&unlabeled.images).unwrap().logits;
    let for_cnn = (ccd_loss(&c_l, &tv_l, b_l).unwrap() + (kl_divergence(&tv_u, &c_u).unwrap() + kl_divergence(&c_u, &tv_u).unwrap()).unwrap()).unwrap();
    let for_vit = (ccd_loss(&tc_l, &v_l, b_l).unwrap() + (kl_divergence(&tc_u, &v_u).unwrap() + kl_divergence(&v_u, &tc_u).unwrap()).unwrap()).unwrap();
    let g_cnn = for_cnn.backward().unwrap();
    let g_vit = for_vit.backward().unwrap();

    let check = |student: &Student, reference: &candle_core::backprop::GradStore| {
        for (name, var) in student.params().iter() {
            let got = grads.get(var).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            let want = reference.get(var).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            match (got, want) {
                (Some(a), Some(b)) => assert!(max_diff(&a, &b) <= 1e-12, "{name}"),
                (None, None) => {}
                _ => panic!("{name}: gradient presence differs"),
            }
        }
    };
    check(&cohort.cnn, &g_cnn);
    check(&cohort.vit, &g_vit);
}

#[test]
fn non_finite_weights_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let cfg = tiny_config(dir.path());
    let (labeled, unlabeled) = batches(&cfg, 0);
    let mut state = TrainState::new(cfg, DType::F32, &Device::Cpu).unwrap();
    // ReLU maps NaN to zero, so poison every weight rather than just one
    let snap: Vec<(String, Tensor)> = state
        .cohort
        .snapshot()
        .unwrap()
        .into_iter()
        .map(|(n, t)| (n, (t * f64::NAN).unwrap()))
        .collect();
    state.cohort.load(&snap).unwrap();
    let err = train_step(&mut state, &labeled, unlabeled.as_ref()).err().unwrap();
    assert!(matches!(err, TccError::NonFinite { .. }), "{err}");
    assert!(!err.is_validation());
    assert_eq!(state.iteration, 0);
}

#[test]
fn conv_student_memorizes_one_image() {
    let ds = generate_shapes_dataset(1, 16, 16, 3, 21).unwrap();
    let conv = ConvConfig {
        widths: vec![32, 32, 32, 32],
        strides: vec![1, 1, 1, 1],
        dilations: vec![1, 1, 2, 2],
        kernel: 3,
    };
    let mut rng = tcc::seed::rng(0, tcc::seed::Stream::Init);
    let student = Student::new(StudentConfig::conv(3, conv), &mut rng, DType::F32, &Device::Cpu).unwrap();
    let vars: Vec<(String, Var)> = student.params().iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
    let mut opt = AdamW::new(vars, 0.9, 0.999, 1e-8, 0.0).unwrap();
    let batch = ds.labeled_batch(ds.ids(), &Device::Cpu).unwrap();
    for _ in 0..200 {
        let loss = dice_loss(&student.forward(&batch.images).unwrap().logits, &batch.masks).unwrap();
        opt.step(&loss.backward().unwrap(), 1e-3).unwrap();
    }
    let report = evaluate(&student, &ds, ds.ids(), 1, &Device::Cpu).unwrap();
    assert!(report.miou > 0.99, "mIoU {}", report.miou);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&cfg, &a, &TrainOptions::default()).unwrap();
    train(&cfg, &b, &TrainOptions::default()).unwrap();
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(checkpoint_paths(&a).0).unwrap(),
        std::fs::read(checkpoint_paths(&b).0).unwrap()
    );
    assert!(a.join("report.txt").is_file() && a.join("report_conv.txt").is_file());

    let rows = read_metrics(&a.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().enumerate().all(|(i, r)| r.iter == i));
    let evals: Vec<usize> = rows.iter().filter(|r| r.miou_vit.is_some()).map(|r| r.iter).collect();
    assert_eq!(evals, vec![9, 19]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let cfg = tiny_config(dir.path());
    let (labeled, unlabeled) = batches(&cfg, 0);
    let mut state = TrainState::new(cfg, DType::F32, &Device::Cpu).unwrap();
    for _ in 0..2 {
        train_step(&mut state, &labeled, unlabeled.as_ref()).unwrap();
    }
    let path = dir.path().join("s.ckpt");
    state.save(&path).unwrap();
    let back = TrainState::load(&path, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(back.iteration, 2);
    assert_eq!(back.optimizer.step, state.optimizer.step);
    assert_eq!(back.config, state.config);
    assert_eq!(flat(&back.cohort.snapshot().unwrap()), flat(&state.cohort.snapshot().unwrap()));
    let moments = |s: &TrainState| -> Vec<f64> {
        s.optimizer
            .moments()
            .flat_map(|(_, m, v)| {
                let mut x = m.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
                x.extend(v.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap());
                x
            })
            .collect()
    };
    assert_eq!(moments(&back), moments(&state));
}

#[test]
fn interrupted_run_resumes_to_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let cfg = tiny_config(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    train(&cfg, &full, &TrainOptions::default()).unwrap();
    let partial = train(&cfg, &split, &TrainOptions { resume: false, stop_after: Some(7) }).unwrap();
    assert_eq!(partial.iterations, 7);
    assert!(partial.report.is_none());
    let resumed = train(&cfg, &split, &TrainOptions { resume: true, stop_after: None }).unwrap();
    assert_eq!(resumed.iterations, 20);

    let a = read_metrics(&full.join("metrics.csv")).unwrap();
    let b = read_metrics(&split.join("metrics.csv")).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.iter, y.iter);
        assert!((x.loss_total - y.loss_total).abs() <= 1e-6, "iter {}", x.iter);
        assert_eq!(x.miou_vit.is_some(), y.miou_vit.is_some());
    }
    let pa = TrainState::load(&checkpoint_paths(&full).0, DType::F32, &Device::Cpu).unwrap();
    let pb = TrainState::load(&checkpoint_paths(&split).0, DType::F32, &Device::Cpu).unwrap();
    let d = max_diff(&flat(&pa.cohort.snapshot().unwrap()), &flat(&pb.cohort.snapshot().unwrap()));
    assert!(d <= 1e-6, "param diff {d}");
}

#[test]
fn resume_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    train(&cfg, &run, &TrainOptions { resume: false, stop_after: Some(2) }).unwrap();
    let mut other = cfg.clone();
    other.training.base_lr = 1e-4;
    let err = train(&other, &run, &TrainOptions { resume: true, stop_after: None }).err().unwrap();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn mismatched_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    tiny_datasets(dir.path());
    let mut cfg = tiny_config(dir.path());
    cfg.students.num_classes = 4;
    let err = train(&cfg, &dir.path().join("run"), &TrainOptions::default()).err().unwrap();
    assert!(err.is_validation(), "{err}");
    assert!(err.to_string().contains("num_classes"));
}
