//! Masked-token pretraining, head fine-tuning and the epoch loop with
//! validation-based checkpoint selection and resumable state.

mod masking;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use masking::{apply_masking, column_ranges, sample_masking_plan, MaskAction, MaskedCell, MaskingConfig, MaskingPlan};

use std::ops::Range;

use crate::arch::{read_checkpoint, write_checkpoint, CheckpointMeta, Ctx, HeadKind, Model};
use crate::dataprep::TargetNormalizer;
use crate::eval::{higher_is_better, task_metric};
use crate::tensor::rng::stream;
use crate::tensor::{AdamW, AdamWConfig, Graph, Real, Rng, RngState, Tensor, Var};
use crate::vocab::TokenGrid;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    /// Fine-tuning only: keep the stage-1 encoder (`s1.*`) fixed.
    #[serde(default)]
    pub freeze_stage1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            masking: MaskingConfig::default(),
            freeze_stage1: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::config(format!("invalid optimizer settings {o:?}")));
        }
        self.masking.validate()
    }
}

fn stack_ids(grids: &[&TokenGrid]) -> Vec<usize> {
    grids.iter().flat_map(|g| g.ids.iter().copied()).collect()
}

/// Mean cross-entropy at the plan's cells against the original ids.
pub fn pretrain_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    corrupted: &[usize],
    batch: usize,
    plan: &MaskingPlan,
    ctx: &mut Ctx,
) -> Result<Var> {
    let logits = model.mlm_logits(g, corrupted, batch, &plan.selected(), ctx)?;
    g.cross_entropy(logits, &plan.originals())
}

/// MSE over `k` normalized targets, or logistic loss on one logit.
pub fn finetune_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    ids: &[usize],
    batch: usize,
    labels: &[f64],
    ctx: &mut Ctx,
) -> Result<Var> {
    let k = check_labels(model.config().head, labels, batch)?;
    let out = model.head_output(g, ids, batch, ctx)?;
    match model.config().head {
        HeadKind::Binary => g.bce_with_logits(out, labels),
        _ => g.mse(out, &Tensor::new(&[batch, k], labels.iter().map(|&y| T::of(y)).collect())?),
    }
}

fn check_labels(head: HeadKind, labels: &[f64], batch: usize) -> Result<usize> {
    let k = head.out_dim().ok_or_else(|| Error::config("fine-tuning needs a regression or binary head"))?;
    if labels.len() != batch * k {
        return Err(Error::config(format!(
            "{} labels per sample do not fit a {head:?} head",
            labels.len() as f64 / batch as f64
        )));
    }
    if head == HeadKind::Binary && labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::config("binary head needs 0/1 labels"));
    }
    Ok(k)
}

/// Which parameters an update touches.
pub fn trainable(freeze_stage1: bool) -> impl Fn(&str) -> bool {
    move |name: &str| !(freeze_stage1 && name.starts_with("s1."))
}

fn update<T: Real>(model: &mut Model<T>, opt: &mut AdamW<T>, g: &mut Graph<T>, loss: Var, freeze_stage1: bool) -> Result<f64> {
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    g.backward(loss)?;
    model.params_mut().zero_grad();
    g.export_param_grads(model.params_mut());
    let norm = model.params().grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    opt.step_filtered(model.params_mut(), trainable(freeze_stage1));
    Ok(value)
}

/// Samples a plan, corrupts the batch and takes one optimizer step.
/// Returns `None` (after a warning) when no cell was selected.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    ids: &[usize],
    batch: usize,
    ranges: &[Range<usize>],
    masking: &MaskingConfig,
    mask_rng: &mut Rng,
    dropout_rng: &mut Rng,
) -> Result<Option<f64>> {
    let plan = sample_masking_plan(ids, ranges, masking, mask_rng);
    if plan.is_empty() {
        warn!("batch without selected cells; step skipped");
        return Ok(None);
    }
    let corrupted = apply_masking(ids, &plan);
    let mut g = Graph::new();
    let mut ctx = Ctx::train(dropout_rng.clone());
    let loss = pretrain_loss(model, &mut g, &corrupted, batch, &plan, &mut ctx)?;
    *dropout_rng = ctx.rng;
    update(model, opt, &mut g, loss, false).map(Some)
}

pub fn finetune_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    ids: &[usize],
    batch: usize,
    labels: &[f64],
    freeze_stage1: bool,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut ctx = Ctx::train(dropout_rng.clone());
    let loss = finetune_loss(model, &mut g, ids, batch, labels, &mut ctx)?;
    *dropout_rng = ctx.rng;
    update(model, opt, &mut g, loss, freeze_stage1)
}

/// Inputs of [`run_training`]. Fine-tuning labels are in training units
/// (normalized for regression); the validation metric maps them back.
pub struct TrainData<'a> {
    pub train: &'a [TokenGrid],
    pub val: &'a [TokenGrid],
    pub normalizer: Option<&'a TargetNormalizer>,
    /// Vocabulary id range of every grid column (for random replacements).
    pub ranges: Vec<Range<usize>>,
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Everything needed to continue a run where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub metric: String,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub shuffle_rng: RngState,
    pub masking_rng: RngState,
    pub dropout_rng: RngState,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric: String,
    pub history: Vec<EpochRecord>,
    /// Parameters of the selected epoch.
    pub best: Model<f32>,
}

pub mod files {
    pub const BEST: &str = "best.ckpt";
    pub const STATE: &str = "state.ckpt";
    pub const LOG: &str = "log.csv";
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LogRow {
    epoch: usize,
    step: u64,
    split: String,
    loss: f64,
    metric: Option<f64>,
    wall_ms: u64,
}

struct Loop<'a> {
    phase: Phase,
    cfg: &'a TrainConfig,
    data: &'a TrainData<'a>,
    out: PathBuf,
    seed: u64,
    vocab_hash: String,
    batch: usize,
    model: Model<f32>,
    opt: AdamW<f32>,
    shuffle_rng: Rng,
    masking_rng: Rng,
    dropout_rng: Rng,
    state: TrainState,
    log: Vec<LogRow>,
    start: Instant,
}

/// Fixed-epoch training with validation after every epoch. The first epoch
/// reaching the best validation metric is kept as `best.ckpt`; `state.ckpt`
/// and `log.csv` are rewritten after every epoch.
pub fn run_training(
    phase: Phase,
    model: Model<f32>,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    out: &Path,
    seed: u64,
    vocab_hash: &str,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let head = model.config().head;
    match (phase, head) {
        (Phase::Pretrain, HeadKind::MaskedLm) | (Phase::Finetune, HeadKind::Regression { .. } | HeadKind::Binary) => {}
        _ => return Err(Error::config(format!("{phase:?} does not fit a {head:?} head"))),
    }
    if cfg.freeze_stage1 && (phase == Phase::Pretrain || !model.config().family.is_two_stage()) {
        return Err(Error::config("freeze_stage1 applies to fine-tuning two-stage families only"));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("training needs non-empty train and validation splits"));
    }
    if data.ranges.len() != model.config().cols {
        return Err(Error::config("column ranges do not match the grid width"));
    }
    let mut batch = cfg.batch_size;
    if data.train.len() < batch {
        warn!("train split has {} samples; batch size lowered from {batch}", data.train.len());
        batch = data.train.len();
    }
    let metric = match (phase, head) {
        (Phase::Pretrain, _) => "masked_lm_loss",
        (_, HeadKind::Binary) if data.val.iter().all(|g| g.labels.iter().all(|&y| y == 0.0)) => {
            warn!("validation split has no positives; selecting on validation loss");
            "val_loss"
        }
        (_, HeadKind::Binary) => "average_precision",
        _ => "rmse",
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let opt = AdamW::new(cfg.optimizer, model.params());
    let mut lp = Loop {
        phase,
        cfg,
        data,
        out: out.to_path_buf(),
        seed,
        vocab_hash: vocab_hash.to_string(),
        batch,
        model,
        opt,
        shuffle_rng: Rng::new(seed, stream::SHUFFLE),
        masking_rng: Rng::new(seed, stream::MASKING),
        dropout_rng: Rng::new(seed, stream::DROPOUT),
        state: TrainState {
            phase,
            epoch: 0,
            step: 0,
            adam_step: 0,
            metric: metric.to_string(),
            best_metric: None,
            best_epoch: None,
            shuffle_rng: Rng::new(seed, stream::SHUFFLE).state(),
            masking_rng: Rng::new(seed, stream::MASKING).state(),
            dropout_rng: Rng::new(seed, stream::DROPOUT).state(),
            history: Vec::new(),
        },
        log: Vec::new(),
        start: Instant::now(),
    };
    let state_path = out.join(files::STATE);
    if resume {
        if state_path.exists() {
            lp.restore(&state_path)?;
            info!("resumed {phase:?} at epoch {}", lp.state.epoch);
        } else {
            info!("no {} in {}; starting fresh", files::STATE, out.display());
        }
    }
    while lp.state.epoch < cfg.epochs {
        lp.epoch()?;
    }
    lp.finish()
}

impl Loop<'_> {
    fn epoch(&mut self) -> Result<()> {
        let epoch = self.state.epoch + 1;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks_exact(self.batch) {
            let grids: Vec<&TokenGrid> = chunk.iter().map(|&i| &self.data.train[i]).collect();
            let ids = stack_ids(&grids);
            let loss = match self.phase {
                Phase::Pretrain => pretrain_step(
                    &mut self.model,
                    &mut self.opt,
                    &ids,
                    self.batch,
                    &self.data.ranges,
                    &self.cfg.masking,
                    &mut self.masking_rng,
                    &mut self.dropout_rng,
                )?,
                Phase::Finetune => {
                    let labels: Vec<f64> = grids.iter().flat_map(|g| g.labels.iter().copied()).collect();
                    Some(finetune_step(
                        &mut self.model,
                        &mut self.opt,
                        &ids,
                        self.batch,
                        &labels,
                        self.cfg.freeze_stage1,
                        &mut self.dropout_rng,
                    )?)
                }
            };
            self.state.step += 1;
            if let Some(loss) = loss {
                sum += loss;
                n += 1;
                self.push_log(epoch, "train", loss, None);
            }
        }
        let train_loss = if n == 0 { f64::NAN } else { sum / n as f64 };
        let (val_loss, val_metric) = self.validate()?;
        self.push_log(epoch, "val", val_loss, Some(val_metric));
        info!("epoch {epoch}: train loss {train_loss:.5}, val {} {val_metric:.5}", self.state.metric);

        let better = match self.state.best_metric {
            None => true,
            Some(best) if higher_is_better(&self.state.metric) => val_metric > best,
            Some(best) => val_metric < best,
        };
        self.state.epoch = epoch;
        self.state.history.push(EpochRecord { epoch, train_loss, val_metric });
        if better {
            self.state.best_metric = Some(val_metric);
            self.state.best_epoch = Some(epoch);
            self.save_best(epoch, val_metric)?;
        }
        self.save_state()?;
        self.write_log()
    }

    /// Validation loss and selection metric. Pretraining masks the
    /// validation grids with a fixed stream so every epoch sees the same plan.
    fn validate(&self) -> Result<(f64, f64)> {
        let val = self.data.val;
        let bs = self.batch;
        match self.phase {
            Phase::Pretrain => {
                let mut rng = Rng::new(self.seed, stream::VALIDATION_MASKING);
                let (mut total, mut count) = (0.0, 0usize);
                for chunk in val.chunks(bs) {
                    let refs: Vec<&TokenGrid> = chunk.iter().collect();
                    let ids = stack_ids(&refs);
                    let plan = sample_masking_plan(&ids, &self.data.ranges, &self.cfg.masking, &mut rng);
                    if plan.is_empty() {
                        continue;
                    }
                    let mut g = Graph::new();
                    let loss =
                        pretrain_loss(&self.model, &mut g, &apply_masking(&ids, &plan), chunk.len(), &plan, &mut Ctx::eval())?;
                    total += g.value(loss).item() as f64 * plan.cells.len() as f64;
                    count += plan.cells.len();
                }
                if count == 0 {
                    return Err(Error::UndefinedMetric("validation masking selected no cells".into()));
                }
                let loss = total / count as f64;
                Ok((loss, loss))
            }
            Phase::Finetune => {
                let (mut total, mut count) = (0.0, 0usize);
                for chunk in val.chunks(bs) {
                    let refs: Vec<&TokenGrid> = chunk.iter().collect();
                    let labels: Vec<f64> = chunk.iter().flat_map(|g| g.labels.iter().copied()).collect();
                    let mut g = Graph::new();
                    let loss = finetune_loss(&self.model, &mut g, &stack_ids(&refs), chunk.len(), &labels, &mut Ctx::eval())?;
                    total += g.value(loss).item() as f64 * chunk.len() as f64;
                    count += chunk.len();
                }
                let loss = total / count as f64;
                if self.state.metric == "val_loss" {
                    return Ok((loss, loss));
                }
                let raw = raw_labels(val, self.data.normalizer);
                let (_, metric) = task_metric(&self.model, &raw, bs, self.data.normalizer)?;
                Ok((loss, metric))
            }
        }
    }

    fn push_log(&mut self, epoch: usize, split: &str, loss: f64, metric: Option<f64>) {
        self.log.push(LogRow {
            epoch,
            step: self.state.step,
            split: split.to_string(),
            loss,
            metric,
            wall_ms: self.start.elapsed().as_millis() as u64,
        });
    }

    fn meta(&self, epoch: usize, extra: serde_json::Value) -> CheckpointMeta {
        CheckpointMeta { config: self.model.config().clone(), vocab_hash: self.vocab_hash.clone(), seed: self.seed, epoch, extra }
    }

    fn save_best(&self, epoch: usize, value: f64) -> Result<()> {
        let extra = serde_json::json!({ "phase": self.phase, "metric": self.state.metric, "value": value });
        self.model.save(&self.out.join(files::BEST), &self.meta(epoch, extra))
    }

    fn save_state(&mut self) -> Result<()> {
        self.state.adam_step = self.opt.step;
        self.state.shuffle_rng = self.shuffle_rng.state();
        self.state.masking_rng = self.masking_rng.state();
        self.state.dropout_rng = self.dropout_rng.state();
        let mut tensors = self.model.tensors_f32();
        for (prefix, moments) in [("adam.m/", &self.opt.m), ("adam.v/", &self.opt.v)] {
            for (p, m) in self.model.params().iter().zip(moments.iter()) {
                tensors.push((format!("{prefix}{}", p.name), Tensor::new(p.value.shape(), m.clone())?));
            }
        }
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let meta = self.meta(self.state.epoch, serde_json::to_value(&self.state)?);
        write_checkpoint(&self.out.join(files::STATE), &serde_json::to_value(meta)?, &refs)
    }

    fn restore(&mut self, path: &Path) -> Result<()> {
        let (meta, tensors) = read_checkpoint(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if &meta.config != self.model.config() || meta.seed != self.seed || meta.vocab_hash != self.vocab_hash {
            return Err(Error::config(format!(
                "{} belongs to a different run (config, seed or vocabulary differ)",
                path.display()
            )));
        }
        let state: TrainState =
            serde_json::from_value(meta.extra).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if state.phase != self.phase {
            return Err(Error::config(format!("{} holds {:?} state", path.display(), state.phase)));
        }
        let n = self.model.params().len();
        if tensors.len() != 3 * n {
            return Err(Error::Checkpoint(format!("{}: expected {} tensors, found {}", path.display(), 3 * n, tensors.len())));
        }
        let (params, moments) = tensors.split_at(n);
        self.model = Model::from_params(self.model.config().clone(), params.to_vec())?;
        for (i, (p, (name, t))) in self.model.params().iter().zip(moments.iter()).enumerate() {
            if name != &format!("adam.m/{}", p.name) || t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{}: unexpected moment tensor {name}", path.display())));
            }
            self.opt.m[i] = t.data().to_vec();
        }
        for (i, (p, (name, t))) in self.model.params().iter().zip(moments[n..].iter()).enumerate() {
            if name != &format!("adam.v/{}", p.name) || t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{}: unexpected moment tensor {name}", path.display())));
            }
            self.opt.v[i] = t.data().to_vec();
        }
        self.opt.step = state.adam_step;
        self.shuffle_rng = Rng::from_state(&state.shuffle_rng)?;
        self.masking_rng = Rng::from_state(&state.masking_rng)?;
        self.dropout_rng = Rng::from_state(&state.dropout_rng)?;
        let log_path = self.out.join(files::LOG);
        if log_path.exists() {
            let mut reader = csv::Reader::from_path(&log_path)?;
            for row in reader.deserialize::<LogRow>() {
                let row = row?;
                if row.epoch <= state.epoch {
                    self.log.push(row);
                }
            }
        }
        self.state = state;
        Ok(())
    }

    fn write_log(&self) -> Result<()> {
        let path = self.out.join(files::LOG);
        let tmp = path.with_extension("tmp");
        let mut w = csv::Writer::from_path(&tmp)?;
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn finish(self) -> Result<TrainOutcome> {
        let (best_epoch, best_metric) = match (self.state.best_epoch, self.state.best_metric) {
            (Some(e), Some(m)) => (e, m),
            _ => return Err(Error::config("no epoch was run")),
        };
        let (best, _) = Model::load(&self.out.join(files::BEST))?;
        Ok(TrainOutcome { best_epoch, best_metric, metric: self.state.metric, history: self.state.history, best })
    }
}

/// Validation grids with labels mapped back to original units.
fn raw_labels(grids: &[TokenGrid], normalizer: Option<&TargetNormalizer>) -> Vec<TokenGrid> {
    grids
        .iter()
        .map(|g| TokenGrid {
            labels: normalizer.map_or_else(|| g.labels.clone(), |n| n.inverse(&g.labels)),
            ..g.clone()
        })
        .collect()
}

/// Encodes samples and maps their labels into training units.
pub fn encode_for_training(
    samples: &[&crate::dataprep::Sample],
    vocab: &crate::vocab::Vocabulary,
    rows: usize,
    normalizer: Option<&TargetNormalizer>,
) -> Result<Vec<TokenGrid>> {
    samples
        .iter()
        .map(|s| {
            let mut g = vocab.encode_grid(s, rows)?;
            if let Some(n) = normalizer {
                g.labels = n.transform(&g.labels);
            }
            Ok(g)
        })
        .collect()
}

#[cfg(test)]
mod tests;
