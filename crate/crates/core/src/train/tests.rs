use super::*;
use crate::arch::{Family, ModelConfig};
use crate::dataprep::{generate_synthetic, prepare, PrepConfig, PreparedDataset, Split, SyntheticConfig, SyntheticTask};
use crate::vocab::{MASK, N_SPECIAL};

fn three_sigma(n: f64, p: f64) -> f64 {
    3.0 * (n * p * (1.0 - p)).sqrt()
}

/// Ten columns with ten ids each, after the specials.
fn ranges() -> Vec<Range<usize>> {
    (0..10).map(|c| N_SPECIAL + 10 * c..N_SPECIAL + 10 * (c + 1)).collect()
}

fn grid_ids(n_cells: usize) -> Vec<usize> {
    (0..n_cells).map(|i| N_SPECIAL + 10 * (i % 10) + i % 7).collect()
}

#[test]
fn selection_rate_is_binomial() {
    let ids = grid_ids(100_000);
    let plan = sample_masking_plan(&ids, &ranges(), &MaskingConfig::default(), &mut Rng::new(1, stream::MASKING));
    let n = ids.len() as f64;
    assert!((plan.cells.len() as f64 - 0.15 * n).abs() <= three_sigma(n, 0.15));

    let small = grid_ids(1000);
    let plan = sample_masking_plan(&small, &ranges(), &MaskingConfig::default(), &mut Rng::new(2, stream::MASKING));
    assert!((plan.cells.len() as f64 - 150.0).abs() <= three_sigma(1000.0, 0.15));
}

#[test]
fn action_split_and_column_ranges() {
    let ids = grid_ids(100_000);
    let r = ranges();
    let plan = sample_masking_plan(&ids, &r, &MaskingConfig::default(), &mut Rng::new(3, stream::MASKING));
    let n = plan.cells.len() as f64;
    let count = |f: fn(&MaskAction) -> bool| plan.cells.iter().filter(|c| f(&c.action)).count() as f64;
    let mask = count(|a| matches!(a, MaskAction::Mask));
    let random = count(|a| matches!(a, MaskAction::Random(_)));
    let keep = count(|a| matches!(a, MaskAction::Keep));
    assert!((mask - 0.8 * n).abs() <= three_sigma(n, 0.8));
    assert!((random - 0.1 * n).abs() <= three_sigma(n, 0.1));
    assert!((keep - 0.1 * n).abs() <= three_sigma(n, 0.1));
    for c in &plan.cells {
        assert_eq!(c.original, ids[c.index]);
        if let MaskAction::Random(id) = c.action {
            assert!(r[c.index % 10].contains(&id));
        }
    }
}

#[test]
fn random_replacements_stay_in_column() {
    let cfg = MaskingConfig { prob: 1.0, mask_frac: 0.0, random_frac: 1.0 };
    let ids = grid_ids(10_000);
    let r = ranges();
    let plan = sample_masking_plan(&ids, &r, &cfg, &mut Rng::new(4, stream::MASKING));
    let out = apply_masking(&ids, &plan);
    assert_eq!(plan.cells.len(), 10_000);
    for (i, &id) in out.iter().enumerate() {
        assert!(r[i % 10].contains(&id), "cell {i} got {id}");
    }
}

#[test]
fn apply_examples() {
    let ids = grid_ids(40);
    assert_eq!(apply_masking(&ids, &MaskingPlan::default()), ids);
    let all = MaskingConfig { prob: 1.0, mask_frac: 1.0, random_frac: 0.0 };
    let plan = sample_masking_plan(&ids, &ranges(), &all, &mut Rng::new(5, 0));
    assert!(apply_masking(&ids, &plan).iter().all(|&x| x == MASK));
    let keep = MaskingConfig { prob: 1.0, mask_frac: 0.0, random_frac: 0.0 };
    let plan = sample_masking_plan(&ids, &ranges(), &keep, &mut Rng::new(5, 0));
    assert_eq!(apply_masking(&ids, &plan), ids);
}

#[test]
fn plan_is_deterministic_per_seed() {
    let ids = grid_ids(500);
    let cfg = MaskingConfig::default();
    let a = sample_masking_plan(&ids, &ranges(), &cfg, &mut Rng::new(9, stream::MASKING));
    let b = sample_masking_plan(&ids, &ranges(), &cfg, &mut Rng::new(9, stream::MASKING));
    let c = sample_masking_plan(&ids, &ranges(), &cfg, &mut Rng::new(10, stream::MASKING));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn masking_config_validation() {
    assert!(MaskingConfig::default().validate().is_ok());
    assert!(MaskingConfig { prob: 1.5, ..Default::default() }.validate().is_err());
    assert!(MaskingConfig { mask_frac: 0.95, random_frac: 0.1, ..Default::default() }.validate().is_err());
}

fn dataset(task: SyntheticTask, entities: usize) -> PreparedDataset {
    let mut cfg = SyntheticConfig::new(task);
    cfg.n_entities = entities;
    cfg.window_length = 4;
    cfg.rows_per_entity = 4;
    cfg.n_categorical = 2;
    cfg.n_numerical = 1;
    cfg.n_bins = 5;
    let (table, schema) = generate_synthetic(&cfg, &mut Rng::new(1, stream::SYNTHETIC)).unwrap();
    prepare(&table, &schema, &PrepConfig::default(), 1).unwrap()
}

fn grids(ds: &PreparedDataset, split: Split) -> Vec<TokenGrid> {
    let samples: Vec<_> = ds.split(split).collect();
    encode_for_training(&samples, &ds.vocab, ds.meta.rows, ds.normalizer.as_ref()).unwrap()
}

fn small_config(family: Family, ds: &PreparedDataset, head: HeadKind) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        layers1: 1,
        ..ModelConfig::tiny(family, ds.vocab.size(), ds.meta.rows, ds.meta.cols, head)
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 40);
    let train = grids(&ds, Split::Train);
    let model: Model<f32> = Model::new(small_config(Family::Fieldy, &ds, HeadKind::MaskedLm), 0).unwrap();
    let refs: Vec<&TokenGrid> = train.iter().take(8).collect();
    let ids = stack_ids(&refs);
    let plan = sample_masking_plan(&ids, &column_ranges(&ds.vocab), &MaskingConfig::default(), &mut Rng::new(0, 2));
    let mut g = Graph::new();
    let loss = pretrain_loss(&model, &mut g, &apply_masking(&ids, &plan), 8, &plan, &mut Ctx::eval()).unwrap();
    let ln_v = (ds.vocab.size() as f64).ln();
    let l = g.value(loss).item() as f64;
    assert!((l - ln_v).abs() < 0.1 * ln_v, "{l} vs ln V {ln_v}");
}

#[test]
fn loss_ignores_unselected_logits() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 20);
    let train = grids(&ds, Split::Train);
    let model: Model<f64> = Model::new(small_config(Family::TabbertRow, &ds, HeadKind::MaskedLm), 0).unwrap();
    let refs: Vec<&TokenGrid> = train.iter().take(2).collect();
    let ids = stack_ids(&refs);
    let cfg = MaskingConfig { prob: 0.3, ..Default::default() };
    let plan = sample_masking_plan(&ids, &column_ranges(&ds.vocab), &cfg, &mut Rng::new(3, 2));
    assert!(!plan.is_empty());
    let corrupted = apply_masking(&ids, &plan);
    let mut g = Graph::new();
    let loss = pretrain_loss(&model, &mut g, &corrupted, 2, &plan, &mut Ctx::eval()).unwrap();
    let loss = g.value(loss).item();

    // Logits for every cell, then zero all unselected rows and score by hand.
    let all: Vec<usize> = (0..ids.len()).collect();
    let mut g2 = Graph::new();
    let logits = model.mlm_logits(&mut g2, &corrupted, 2, &all, &mut Ctx::eval()).unwrap();
    let mut lv = g2.value(logits).clone();
    let v = lv.last_dim();
    let sel = plan.selected();
    for i in (0..ids.len()).filter(|i| !sel.contains(i)) {
        lv.data_mut()[i * v..(i + 1) * v].iter_mut().for_each(|x| *x = 0.0);
    }
    let mut manual = 0.0;
    for c in &plan.cells {
        let row = &lv.data()[c.index * v..(c.index + 1) * v];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        manual += lse - row[c.original];
    }
    manual /= plan.cells.len() as f64;
    assert!((loss - manual).abs() < 1e-12);
}

#[test]
fn empty_plan_skips_step() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 20);
    let train = grids(&ds, Split::Train);
    let mut model: Model<f32> = Model::new(small_config(Family::FtFlat, &ds, HeadKind::MaskedLm), 0).unwrap();
    let before = model.tensors_f32();
    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let none = MaskingConfig { prob: 0.0, ..Default::default() };
    let out = pretrain_step(
        &mut model,
        &mut opt,
        &train[0].ids,
        1,
        &column_ranges(&ds.vocab),
        &none,
        &mut Rng::new(0, 2),
        &mut Rng::new(0, 3),
    )
    .unwrap();
    assert_eq!(out, None);
    assert_eq!(model.tensors_f32(), before);
    assert_eq!(opt.step, 0);
}

#[test]
fn head_dimensions_and_mismatch() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 20);
    let train = grids(&ds, Split::Train);
    assert_eq!(train[0].labels.len(), 4);
    let cfg = small_config(Family::Fieldy, &ds, HeadKind::Regression { k: 4 });
    let mut model: Model<f32> = Model::new(cfg, 0).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    let mut rng = Rng::new(0, 3);
    assert!(finetune_step(&mut model, &mut opt, &train[0].ids, 1, &train[0].labels, false, &mut rng).is_ok());
    let err = finetune_step(&mut model, &mut opt, &train[0].ids, 1, &train[0].labels[..1], false, &mut rng);
    assert!(matches!(err, Err(Error::Config(_))));

    let bin: Model<f32> = Model::new(small_config(Family::Fieldy, &ds, HeadKind::Binary), 0).unwrap();
    let mut g = Graph::new();
    let out = bin.head_output(&mut g, &train[0].ids, 1, &mut Ctx::eval()).unwrap();
    assert_eq!(g.shape(out), &[1, 1]);
    let err = finetune_loss(&bin, &mut Graph::new(), &train[0].ids, 1, &[0.5], &mut Ctx::eval());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn freeze_stage1_keeps_stage1_fixed() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 20);
    let train = grids(&ds, Split::Train);
    let cfg = small_config(Family::TabbertRow, &ds, HeadKind::Regression { k: 4 });
    let mut model: Model<f32> = Model::new(cfg, 0).unwrap();
    let before = model.tensors_f32();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() }, model.params());
    finetune_step(&mut model, &mut opt, &train[0].ids, 1, &train[0].labels, true, &mut Rng::new(0, 3)).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(model.tensors_f32().iter()) {
        if name.starts_with("s1.") {
            assert_eq!(a, b, "{name} moved");
        } else if name.starts_with("head.out") {
            assert_ne!(a, b, "{name} did not move");
        }
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        optimizer: AdamWConfig { lr: 3e-3, ..Default::default() },
        ..Default::default()
    }
}

fn run(
    phase: Phase,
    ds: &PreparedDataset,
    head: HeadKind,
    cfg: &TrainConfig,
    dir: &Path,
    resume: bool,
) -> TrainOutcome {
    let train = grids(ds, Split::Train);
    let val = grids(ds, Split::Val);
    let data = TrainData { train: &train, val: &val, normalizer: ds.normalizer.as_ref(), ranges: column_ranges(&ds.vocab) };
    let mut mc = small_config(Family::Fieldy, ds, head);
    mc.dropout = 0.1;
    let model = Model::new(mc, 7).unwrap();
    run_training(phase, model, cfg, &data, dir, 7, &ds.vocab.hash(), resume).unwrap()
}

#[test]
fn training_is_deterministic_and_selects_best() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 30);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = train_cfg(3);
    let ra = run(Phase::Pretrain, &ds, HeadKind::MaskedLm, &cfg, a.path(), false);
    let rb = run(Phase::Pretrain, &ds, HeadKind::MaskedLm, &cfg, b.path(), false);
    assert_eq!(ra.best_epoch, rb.best_epoch);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), files::BEST), read(b.path(), files::BEST));
    assert_eq!(read(a.path(), files::STATE), read(b.path(), files::STATE));
    assert_eq!(ra.history.len(), 3);
    // Lower-is-better metric: the kept epoch is no worse than any other,
    // and it is the first one reaching that value.
    for e in &ra.history {
        assert!(ra.best_metric <= e.val_metric);
    }
    let first = ra.history.iter().find(|e| e.val_metric == ra.best_metric).unwrap();
    assert_eq!(first.epoch, ra.best_epoch);

    let log = fs::read_to_string(a.path().join(files::LOG)).unwrap();
    assert!(log.starts_with("epoch,step,split,loss,metric,wall_ms\n"));
    assert_eq!(log.lines().filter(|l| l.contains(",val,")).count(), 3);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 30);
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let whole = run(Phase::Finetune, &ds, HeadKind::Regression { k: 4 }, &train_cfg(3), full.path(), false);
    run(Phase::Finetune, &ds, HeadKind::Regression { k: 4 }, &train_cfg(1), split.path(), false);
    let resumed = run(Phase::Finetune, &ds, HeadKind::Regression { k: 4 }, &train_cfg(3), split.path(), true);
    assert_eq!(whole.history, resumed.history);
    assert_eq!(whole.best_epoch, resumed.best_epoch);
    for f in [files::BEST, files::STATE] {
        assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(split.path().join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(split.path().join(files::LOG)).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(",val,")).count(), 3);
}

#[test]
fn resume_rejects_foreign_state() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 30);
    let dir = tempfile::tempdir().unwrap();
    run(Phase::Pretrain, &ds, HeadKind::MaskedLm, &train_cfg(1), dir.path(), false);
    let train = grids(&ds, Split::Train);
    let val = grids(&ds, Split::Val);
    let data = TrainData { train: &train, val: &val, normalizer: None, ranges: column_ranges(&ds.vocab) };
    let model = Model::new(small_config(Family::FtFlat, &ds, HeadKind::MaskedLm), 7).unwrap();
    let err = run_training(Phase::Pretrain, model, &train_cfg(2), &data, dir.path(), 7, &ds.vocab.hash(), true);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn binary_finetune_selects_on_average_precision() {
    let ds = dataset(SyntheticTask::DefaultClassification, 60);
    let dir = tempfile::tempdir().unwrap();
    let out = run(Phase::Finetune, &ds, HeadKind::Binary, &train_cfg(2), dir.path(), false);
    assert!(out.metric == "average_precision" || out.metric == "val_loss");
    if out.metric == "average_precision" {
        for e in &out.history {
            assert!(out.best_metric >= e.val_metric);
        }
    }
}

#[test]
fn phase_head_mismatch_is_rejected() {
    let ds = dataset(SyntheticTask::CrossFieldRegression, 20);
    let train = grids(&ds, Split::Train);
    let val = grids(&ds, Split::Val);
    let data = TrainData { train: &train, val: &val, normalizer: None, ranges: column_ranges(&ds.vocab) };
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small_config(Family::Fieldy, &ds, HeadKind::MaskedLm), 0).unwrap();
    assert!(run_training(Phase::Finetune, model, &train_cfg(1), &data, dir.path(), 0, "", false).is_err());
    let model = Model::new(small_config(Family::FtFlat, &ds, HeadKind::Regression { k: 4 }), 0).unwrap();
    let cfg = TrainConfig { freeze_stage1: true, ..train_cfg(1) };
    assert!(run_training(Phase::Finetune, model, &cfg, &data, dir.path(), 0, "", false).is_err());
}
