//! One function per subcommand. Every function takes a resolved
//! [`RunConfig`] and returns what it wrote, so callers can chain them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use tabform::arch::{count_attention_pairs, Family, HeadKind, Model};
use tabform::dataprep::{self, generate_synthetic, DatasetMeta, LabelKind, PreparedDataset, RawTable, Sample, Split};
use tabform::eval::{
    aggregate_seeds, median, oracle_hour_predictor, probe_with, run_probe, task_metric, uniform_hour_predictor,
    MetricsReport, SeedMetric,
};
use tabform::tensor::{rng::stream, Rng};
use tabform::train::{self, column_ranges, encode_for_training, run_training, Phase, TrainData};
use tabform::vocab::{TokenGrid, Vocabulary};

use crate::config::{Recipe, RunConfig};
use crate::output::{stamp, timing, write_json, METRICS_FILE, RUN_FILE};
use crate::thread_cap;

pub const DATA_DIR: &str = "data";
pub const PROBE_REPORT: &str = "report.json";
pub const BENCH_CSV: &str = "bench.csv";

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join(DATA_DIR)
}

pub fn run_dir(cfg: &RunConfig, phase: &str, family: Family, seed: u64) -> PathBuf {
    cfg.out_dir().join(phase).join(family.name()).join(format!("seed-{seed}"))
}

pub fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = &cfg.dataset;
    let prep = ds.prep.as_ref().expect("resolved config has prep settings");
    let (table, schema) = match ds.recipe {
        Recipe::Synthetic(_) => {
            let syn = ds.synthetic.as_ref().expect("resolved config has generator settings");
            generate_synthetic(syn, &mut Rng::new(ds.seed, stream::SYNTHETIC))?
        }
        Recipe::Pollution | Recipe::Loan => {
            let path = ds.path.as_ref().with_context(|| format!("recipe {} needs dataset.path or --data", ds.recipe))?;
            let table = RawTable::read_csv(path).with_context(|| format!("reading raw data {}", path.display()))?;
            (table, ds.schema.clone().expect("resolved config has a schema"))
        }
    };
    let prepared = dataprep::prepare(&table, &schema, prep, ds.seed).context("preparing dataset")?;
    let dir = data_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    prepared.write(&dir)?;
    stamp(&dir, "prepare", cfg)?;
    info!(
        "prepared {} samples ({} train / {} val / {} test), grid {}x{}, vocabulary {} -> {}",
        prepared.samples.len(),
        prepared.count(Split::Train),
        prepared.count(Split::Val),
        prepared.count(Split::Test),
        prepared.meta.rows,
        prepared.meta.cols,
        prepared.vocab.size(),
        dir.display()
    );
    Ok(dir)
}

/// Reads `<out>/data`, refusing data built from another dataset section.
pub fn load_prepared(cfg: &RunConfig) -> Result<PreparedDataset> {
    let dir = data_dir(cfg);
    let stamp_path = dir.join(RUN_FILE);
    if !stamp_path.exists() {
        bail!("no prepared dataset in {}; run `tabform prepare` first", dir.display());
    }
    let text = fs::read_to_string(&stamp_path).with_context(|| format!("reading {}", stamp_path.display()))?;
    let stamped: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", stamp_path.display()))?;
    if stamped["config"]["dataset"] != serde_json::to_value(&cfg.dataset)? {
        bail!("{} was prepared from a different dataset configuration; re-run `tabform prepare`", dir.display());
    }
    Ok(PreparedDataset::read(&dir)?)
}

fn samples(data: &PreparedDataset, split: Split, labeled_only: bool) -> Vec<&Sample> {
    data.split(split).filter(|s| !labeled_only || s.is_labeled()).collect()
}

fn task_head(meta: &DatasetMeta) -> Result<HeadKind> {
    if meta.n_labels == 0 {
        bail!("the dataset has no target columns to fine-tune on");
    }
    Ok(match meta.schema.label_kind {
        LabelKind::Binary => HeadKind::Binary,
        LabelKind::Regression => HeadKind::Regression { k: meta.n_labels },
    })
}

/// Runs `f` over `jobs` on up to `TABFORM_THREADS` threads; results keep job order.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let n = thread_cap()?.min(jobs.len()).max(1);
    if n == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..n {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().expect("no poisoned slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("no poisoned slot").expect("every job ran")).collect()
}

fn jobs(cfg: &RunConfig) -> Vec<(Family, u64)> {
    cfg.families.iter().flat_map(|&f| cfg.seeds.iter().map(move |&s| (f, s))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub family: Family,
    pub seed: u64,
    pub dir: PathBuf,
    pub metric: String,
    pub best_epoch: usize,
    pub best_metric: f64,
}

pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<Vec<RunSummary>> {
    let data = load_prepared(cfg)?;
    let (rows, cols, vocab_size) = (data.meta.rows, data.meta.cols, data.vocab.size());
    let train = encode_for_training(&samples(&data, Split::Train, false), &data.vocab, rows, None)?;
    let val = encode_for_training(&samples(&data, Split::Val, false), &data.vocab, rows, None)?;
    let td = TrainData { train: &train, val: &val, normalizer: None, ranges: column_ranges(&data.vocab) };
    let hash = data.vocab.hash();
    run_jobs(&jobs(cfg), |&(family, seed)| {
        let mc = cfg.family_model(family, vocab_size, rows, cols, HeadKind::MaskedLm)?;
        let dir = run_dir(cfg, "pretrain", family, seed);
        stamp(&dir, "pretrain", cfg)?;
        let start = Instant::now();
        let model = Model::new(mc, seed)?;
        info!("pretraining {family} seed {seed}: {} parameters", model.param_count());
        let out = run_training(Phase::Pretrain, model, &cfg.pretrain, &td, &dir, seed, &hash, resume)
            .with_context(|| format!("pretraining {family} seed {seed}"))?;
        timing(&dir, start.elapsed().as_secs_f64())?;
        info!("{family} seed {seed}: best {} {:.5} at epoch {}", out.metric, out.best_metric, out.best_epoch);
        Ok(RunSummary { family, seed, dir, metric: out.metric, best_epoch: out.best_epoch, best_metric: out.best_metric })
    })
}

/// Locates the pretrained checkpoint for one fine-tuning run.
fn find_checkpoint(from: &Path, family: Family, seed: u64) -> Result<PathBuf> {
    if from.is_file() {
        return Ok(from.to_path_buf());
    }
    let seed_dir = format!("seed-{seed}");
    let candidates = [
        from.join(family.name()).join(&seed_dir).join(train::files::BEST),
        from.join("pretrain").join(family.name()).join(&seed_dir).join(train::files::BEST),
        from.join(&seed_dir).join(train::files::BEST),
        from.join(train::files::BEST),
    ];
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .with_context(|| format!("no pretrained checkpoint for {family} seed {seed} under {}", from.display()))
}

fn check_vocab(path: &Path, checkpoint_hash: &str, vocab: &Vocabulary) -> Result<()> {
    let hash = vocab.hash();
    if checkpoint_hash != hash {
        bail!(
            "{} was trained on a different vocabulary (hash {} vs prepared data {}); token ids would not line up. \
             Pretrain on this dataset or point --out at the data the checkpoint came from",
            path.display(),
            short(checkpoint_hash),
            short(&hash)
        );
    }
    Ok(())
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn finetune(cfg: &RunConfig, from: Option<&Path>, resume: bool) -> Result<Vec<MetricsReport>> {
    let data = load_prepared(cfg)?;
    let (rows, cols, vocab_size) = (data.meta.rows, data.meta.cols, data.vocab.size());
    let head = task_head(&data.meta)?;
    let norm = data.normalizer.as_ref();
    let train = encode_for_training(&samples(&data, Split::Train, true), &data.vocab, rows, norm)?;
    let val = encode_for_training(&samples(&data, Split::Val, true), &data.vocab, rows, norm)?;
    let mut report_split = Split::Test;
    if data.split(Split::Test).all(|s| !s.is_labeled()) {
        warn!("test split has no labeled samples; reporting on the validation split");
        report_split = Split::Val;
    }
    let scored = encode_for_training(&samples(&data, report_split, true), &data.vocab, rows, None)?;
    let td = TrainData { train: &train, val: &val, normalizer: norm, ranges: column_ranges(&data.vocab) };
    let hash = data.vocab.hash();
    let task = cfg.task_name();
    if from.is_none() {
        warn!("no --from checkpoint given; fine-tuning from random initialization");
    }
    let per_seed = run_jobs(&jobs(cfg), |&(family, seed)| {
        let mc = cfg.family_model(family, vocab_size, rows, cols, head)?;
        let mut model = Model::new(mc.clone(), seed)?;
        if let Some(from) = from {
            let path = find_checkpoint(from, family, seed)?;
            let (pre, meta) = Model::<f32>::load(&path)?;
            check_vocab(&path, &meta.vocab_hash, &data.vocab)?;
            let mut arch = pre.config().clone();
            arch.head = mc.head;
            arch.dropout = mc.dropout;
            if arch != mc {
                bail!("{} holds a {} model that does not match the configured {family} architecture", path.display(), pre.config().family);
            }
            let loaded = model.load_matching(&pre.tensors_f32());
            info!("{family} seed {seed}: loaded {} pretrained tensors from {}", loaded.len(), path.display());
        }
        let dir = run_dir(cfg, "finetune", family, seed);
        stamp(&dir, "finetune", cfg)?;
        let start = Instant::now();
        let out = run_training(Phase::Finetune, model, &cfg.finetune, &td, &dir, seed, &hash, resume)
            .with_context(|| format!("fine-tuning {family} seed {seed}"))?;
        let (metric, value) = task_metric(&out.best, &scored, cfg.finetune.batch_size, norm)?;
        let sm = SeedMetric { task: task.clone(), family: family.name().into(), metric: metric.into(), seed, value };
        write_json(&dir.join(METRICS_FILE), &aggregate_seeds(std::slice::from_ref(&sm))?)?;
        timing(&dir, start.elapsed().as_secs_f64())?;
        info!("{family} seed {seed}: {} {metric} {value:.5} (best epoch {})", report_split.name(), out.best_epoch);
        Ok(sm)
    })?;
    write_family_reports(cfg, &cfg.out_dir().join("finetune"), "finetune", &per_seed)
}

/// Groups per-seed scores by family and writes `<root>/<family>/metrics.json`.
fn write_family_reports(cfg: &RunConfig, root: &Path, command: &str, runs: &[SeedMetric]) -> Result<Vec<MetricsReport>> {
    let mut by_family: BTreeMap<&str, Vec<SeedMetric>> = BTreeMap::new();
    for r in runs {
        by_family.entry(r.family.as_str()).or_default().push(r.clone());
    }
    let mut reports = Vec::new();
    for (family, mut runs) in by_family {
        runs.sort_by_key(|r| r.seed);
        let report = aggregate_seeds(&runs)?;
        let dir = root.join(family);
        stamp(&dir, command, cfg)?;
        write_json(&dir.join(METRICS_FILE), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

fn default_checkpoints(cfg: &RunConfig, phase: &str) -> Vec<PathBuf> {
    jobs(cfg).into_iter().map(|(f, s)| run_dir(cfg, phase, f, s).join(train::files::BEST)).collect()
}

pub fn evaluate(cfg: &RunConfig, split: &str, checkpoints: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    let split = Split::parse(split)?;
    let data = load_prepared(cfg)?;
    let grids = encode_for_training(&samples(&data, split, true), &data.vocab, data.meta.rows, None)?;
    if grids.is_empty() {
        bail!("the {} split has no labeled samples", split.name());
    }
    let paths = if checkpoints.is_empty() { default_checkpoints(cfg, "finetune") } else { checkpoints.to_vec() };
    let task = cfg.task_name();
    let mut runs = Vec::new();
    for path in &paths {
        let (model, meta) = Model::<f32>::load(path)?;
        check_vocab(path, &meta.vocab_hash, &data.vocab)?;
        if model.config().head == HeadKind::MaskedLm {
            bail!("{} is a pretraining checkpoint; evaluate needs a fine-tuned one", path.display());
        }
        let (metric, value) = task_metric(&model, &grids, cfg.finetune.batch_size, data.normalizer.as_ref())?;
        let family = model.config().family;
        info!("{}: {family} seed {} {} {metric} {value:.5}", path.display(), meta.seed, split.name());
        runs.push(SeedMetric { task: task.clone(), family: family.name().into(), metric: metric.into(), seed: meta.seed, value });
    }
    write_family_reports(cfg, &cfg.out_dir().join("evaluate").join(split.name()), "evaluate", &runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    /// A family name, or `oracle_copy` / `uniform` for the reference rows.
    pub model: String,
    pub seeds: Vec<SeedAccuracy>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub column: String,
    pub candidates: crate::config::Candidates,
    pub n_sequences: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn row(&self, model: &str) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

fn probe_row(model: String, seeds: Vec<SeedAccuracy>) -> ProbeRow {
    let acc: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    ProbeRow { model, mean, median: median(&acc).unwrap_or(f64::NAN), seeds }
}

pub fn probe(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<ProbeReport> {
    let data = load_prepared(cfg)?;
    let column = &cfg.probe.column;
    let hour_col = data.vocab.column_index(column).with_context(|| {
        format!("the prepared dataset has no {column:?} column; the probe needs synthetic:hour_probe data or a schema with that column")
    })?;
    let test = samples(&data, Split::Test, false);
    let n = cfg.probe.n_sequences;
    if test.len() < n {
        bail!("the probe needs {n} test sequences; the test split has {}", test.len());
    }
    if data.meta.rows <= tabform::eval::PROBE_MASKED_ROWS {
        bail!("the probe hides the last {} rows; windows of {} rows leave nothing visible", tabform::eval::PROBE_MASKED_ROWS, data.meta.rows);
    }
    let grids: Vec<TokenGrid> = encode_for_training(&test[..n], &data.vocab, data.meta.rows, None)?;
    let paths = if checkpoints.is_empty() { default_checkpoints(cfg, "pretrain") } else { checkpoints.to_vec() };

    let mut by_family: BTreeMap<Family, Vec<SeedAccuracy>> = BTreeMap::new();
    for path in &paths {
        let (model, meta) = Model::<f32>::load(path)?;
        check_vocab(path, &meta.vocab_hash, &data.vocab)?;
        if model.config().head != HeadKind::MaskedLm {
            bail!("{} is not a masked-LM checkpoint", path.display());
        }
        let r = run_probe(&model, &grids, &data.vocab, column, cfg.probe.candidates.into())?;
        info!("{}: {} seed {} accuracy {:.3}", path.display(), model.config().family, meta.seed, r.accuracy);
        by_family.entry(model.config().family).or_default().push(SeedAccuracy { seed: meta.seed, accuracy: r.accuracy });
    }
    // Families in the configured order, then any others found.
    let mut rows = Vec::new();
    let order: Vec<Family> =
        cfg.families.iter().copied().chain(by_family.keys().copied().filter(|f| !cfg.families.contains(f))).collect();
    for f in order {
        if let Some(mut seeds) = by_family.remove(&f) {
            seeds.sort_by_key(|s| s.seed);
            rows.push(probe_row(f.name().into(), seeds));
        }
    }
    let oracle = probe_with(&grids, hour_col, oracle_hour_predictor(&data.vocab, hour_col, data.meta.cols))?;
    rows.push(probe_row("oracle_copy".into(), vec![SeedAccuracy { seed: 0, accuracy: oracle.accuracy }]));
    let mut uniform = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = Rng::new(seed, stream::PROBE);
        let r = probe_with(&grids, hour_col, uniform_hour_predictor(&data.vocab, hour_col, &mut rng))?;
        uniform.push(SeedAccuracy { seed, accuracy: r.accuracy });
    }
    rows.push(probe_row("uniform".into(), uniform));

    let report = ProbeReport {
        task: cfg.task_name(),
        column: column.clone(),
        candidates: cfg.probe.candidates,
        n_sequences: n,
        seeds: cfg.seeds.clone(),
        config_hash: cfg.hash(),
        rows,
    };
    let dir = cfg.out_dir().join("probe");
    stamp(&dir, "probe", cfg)?;
    write_json(&dir.join(PROBE_REPORT), &report)?;
    for r in &report.rows {
        info!("probe {:<12} median {:.3} mean {:.3}", r.model, r.median, r.mean);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: Family,
    pub rows: usize,
    pub cols: usize,
    pub stage: usize,
    pub layers: usize,
    pub heads: usize,
    pub measured: u64,
    pub predicted: u64,
    pub per_layer_head: u64,
    pub wall_ms: f64,
}

pub const BENCH_HEADER: &str = "family,rows,cols,stage,layers,heads,measured_pairs,closed_form_pairs,pairs_per_layer_head,match,wall_ms";

/// Vocabulary size for bench models; attention cost does not depend on it.
const BENCH_VOCAB: usize = 64;

pub fn bench(cfg: &RunConfig, families: &[Family], grids: &[[usize; 2]]) -> Result<Vec<BenchRow>> {
    let grids = if grids.is_empty() { cfg.bench.grids.clone() } else { grids.to_vec() };
    let mut out = Vec::new();
    for &[r, c] in &grids {
        for &family in families {
            let mc = cfg.family_model(family, BENCH_VOCAB, r, c, HeadKind::MaskedLm)?;
            let start = Instant::now();
            let rep = count_attention_pairs(&mc)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if !rep.matches() {
                warn!("{family} {r}x{c}: measured {:?} != closed form {:?}", rep.measured, rep.predicted);
            }
            let stages = [
                (1, mc.layers1, rep.measured.stage1, rep.predicted.stage1, rep.per_layer_head.0),
                (2, mc.layers2, rep.measured.stage2, rep.predicted.stage2, rep.per_layer_head.1),
            ];
            for (stage, layers, measured, predicted, per) in stages {
                if layers == 0 {
                    continue;
                }
                out.push(BenchRow { family, rows: r, cols: c, stage, layers, heads: mc.heads, measured, predicted, per_layer_head: per, wall_ms });
            }
        }
    }
    let dir = cfg.out_dir().join("bench");
    stamp(&dir, "bench", cfg)?;
    let mut csv = String::from(BENCH_HEADER);
    csv.push('\n');
    for b in &out {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            b.family, b.rows, b.cols, b.stage, b.layers, b.heads, b.measured, b.predicted, b.per_layer_head, b.measured == b.predicted, b.wall_ms
        ));
    }
    let path = dir.join(BENCH_CSV);
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {} bench rows to {}", out.len(), path.display());
    Ok(out)
}
