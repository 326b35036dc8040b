//! Run configuration: what data to build, which models to train and how.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tabform::arch::{match_param_counts, Family, HeadKind, ModelConfig, PARITY_TOLERANCE};
use tabform::dataprep::{
    ColumnRole, ColumnSpec, DerivedFeature, LabelKind, LabelMode, OutlierDirection, OutlierFilter, PrepConfig,
    SplitMode, SyntheticConfig, SyntheticTask, TableSchema, TimestampParts,
};
use tabform::eval::ProbeCandidates;
use tabform::train::TrainConfig;

use crate::presets;

/// Where the raw rows come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Pollution,
    Loan,
    Synthetic(SyntheticTask),
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pollution" => Recipe::Pollution,
            "loan" => Recipe::Loan,
            _ => match s.strip_prefix("synthetic:") {
                Some(task) => Recipe::Synthetic(SyntheticTask::parse(task)?),
                None => bail!("unknown dataset recipe {s:?} (expected pollution, loan or synthetic:<task>)"),
            },
        })
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recipe::Pollution => f.write_str("pollution"),
            Recipe::Loan => f.write_str("loan"),
            Recipe::Synthetic(t) => write!(f, "synthetic:{}", t.name()),
        }
    }
}

impl Serialize for Recipe {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Recipe {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Recipe::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub recipe: Recipe,
    /// Raw CSV for the pollution and loan recipes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Replaces the recipe's built-in schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<TableSchema>,
    /// Generator settings for synthetic recipes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prep: Option<PrepConfig>,
    /// Seeds splitting and synthetic generation; independent of model seeds.
    #[serde(default)]
    pub seed: u64,
}

fn default_probe_column() -> String {
    "Hour".into()
}

fn default_probe_sequences() -> usize {
    100
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    #[default]
    FullVocab,
    ColumnRange,
}

impl From<Candidates> for ProbeCandidates {
    fn from(c: Candidates) -> Self {
        match c {
            Candidates::FullVocab => ProbeCandidates::FullVocab,
            Candidates::ColumnRange => ProbeCandidates::ColumnRange,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_column")]
    pub column: String,
    #[serde(default)]
    pub candidates: Candidates,
    #[serde(default = "default_probe_sequences")]
    pub n_sequences: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { column: default_probe_column(), candidates: Candidates::FullVocab, n_sequences: default_probe_sequences() }
    }
}

pub fn default_grids() -> Vec<[usize; 2]> {
    vec![[4, 5], [8, 5], [8, 10], [10, 16]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// `[rows, cols]` grid sizes.
    #[serde(default = "default_grids")]
    pub grids: Vec<[usize; 2]>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { grids: default_grids() }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    /// Base model; `family` names the reference for parity sizing.
    pub model: ModelConfig,
    /// Families to train; `[model.family]` when empty.
    #[serde(default)]
    pub families: Vec<Family>,
    /// Explicit `[layers1, layers2]` per family.
    #[serde(default)]
    pub layers: BTreeMap<Family, [usize; 2]>,
    /// Size families without explicit layers to the reference's parameter count.
    #[serde(default)]
    pub parity: bool,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    /// `preset:<name>` or a path to a JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(name) = spec.strip_prefix("preset:") {
            return presets::preset(name);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills recipe defaults and checks everything that can be checked
    /// before data exists.
    pub fn resolve(mut self) -> Result<Self> {
        let ds = &mut self.dataset;
        match ds.recipe {
            Recipe::Synthetic(task) => {
                let syn = ds.synthetic.get_or_insert_with(|| SyntheticConfig::new(task));
                if syn.task != task {
                    bail!("dataset.synthetic.task {:?} contradicts recipe {}", syn.task.name(), ds.recipe);
                }
                syn.validate()?;
                if ds.schema.is_some() {
                    bail!("synthetic recipes generate their own schema; drop dataset.schema");
                }
                ds.prep.get_or_insert_with(PrepConfig::default);
            }
            Recipe::Pollution | Recipe::Loan => {
                if ds.synthetic.is_some() {
                    bail!("dataset.synthetic only applies to synthetic recipes");
                }
                let schema = ds.schema.get_or_insert_with(|| match ds.recipe {
                    Recipe::Pollution => pollution_schema(),
                    _ => loan_schema(),
                });
                schema.validate()?;
                let r = schema.window_length;
                ds.prep.get_or_insert_with(|| match ds.recipe {
                    Recipe::Pollution => pollution_prep(r),
                    _ => loan_prep(),
                });
            }
        }
        if self.families.is_empty() {
            self.families.push(self.model.family);
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.families.iter().all(|f| seen.insert(*f)) {
            bail!("families list repeats a family");
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            bail!("seeds list repeats a seed");
        }
        for (family, [l1, l2]) in &self.layers {
            if *l1 == 0 || family.is_two_stage() != (*l2 > 0) {
                bail!("layers for {family}: [{l1}, {l2}] do not fit a {} family", if family.is_two_stage() { "two-stage" } else { "single-stage" });
            }
        }
        self.pretrain.validate().context("pretrain")?;
        self.finetune.validate().context("finetune")?;
        if self.probe.n_sequences == 0 {
            bail!("probe.n_sequences must be positive");
        }
        if self.bench.grids.iter().any(|g| g[0] == 0 || g[1] == 0) {
            bail!("bench grids need positive sizes");
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn task_name(&self) -> String {
        self.dataset.recipe.to_string()
    }

    /// Model configuration of `family` on a `rows x cols` grid with
    /// `vocab_size` ids, before the task head is chosen.
    pub fn family_model(&self, family: Family, vocab_size: usize, rows: usize, cols: usize, head: HeadKind) -> Result<ModelConfig> {
        let base = ModelConfig { vocab_size, rows, cols, head, ..self.model.clone() };
        let mut cfg = ModelConfig { family, ..base.clone() };
        if let Some([l1, l2]) = self.layers.get(&family) {
            cfg.layers1 = *l1;
            cfg.layers2 = *l2;
        } else if self.parity && family != base.family {
            let mut reference = base.clone();
            if let Some([l1, l2]) = self.layers.get(&base.family) {
                reference.layers1 = *l1;
                reference.layers2 = *l2;
            }
            let entry = match_param_counts(&reference, &[family], PARITY_TOLERANCE)?;
            cfg = entry.into_iter().next().expect("one family requested").config;
        } else if !family.is_two_stage() {
            cfg.layers2 = 0;
        } else if cfg.layers2 == 0 {
            cfg.layers2 = 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Raw column layout of the hourly multi-site air-quality CSV: ten
/// measurement features, two particulate targets, calendar parts split
/// across columns.
pub fn pollution_schema() -> TableSchema {
    let num = |n: &str| ColumnSpec::new(n, ColumnRole::Numerical);
    let mut columns = vec![ColumnSpec::new("station", ColumnRole::Entity)];
    columns.extend(["SO2", "NO2", "CO", "O3", "TEMP", "PRES", "DEWP", "RAIN"].map(num));
    columns.push(ColumnSpec::new("wd", ColumnRole::Categorical));
    columns.push(num("WSPM"));
    columns.push(ColumnSpec::new("PM2.5", ColumnRole::Target));
    columns.push(ColumnSpec::new("PM10", ColumnRole::Target));
    TableSchema {
        columns,
        window_length: 10,
        derived: vec![
            DerivedFeature::Entity,
            DerivedFeature::Hour,
            DerivedFeature::Day,
            DerivedFeature::Weekday,
            DerivedFeature::Month,
            DerivedFeature::Year,
        ],
        n_bins: 50,
        timestamp_parts: Some(TimestampParts {
            year: "year".into(),
            month: "month".into(),
            day: "day".into(),
            hour: Some("hour".into()),
        }),
        label_mode: LabelMode::PerStep,
        label_kind: LabelKind::Regression,
    }
}

pub fn pollution_prep(window: usize) -> PrepConfig {
    PrepConfig {
        stride: window,
        split: [0.6, 0.2, 0.2],
        split_mode: SplitMode::BySample,
        outlier_filter: Some(OutlierFilter {
            fine: "PM2.5".into(),
            coarse: "PM10".into(),
            remove_when: OutlierDirection::FineExceedsCoarse,
        }),
    }
}

/// Pre-joined bank transactions, one row per transaction. `default` is
/// empty (or `NA`) for accounts without a loan; those windows are
/// unlabeled and only serve pretraining.
pub fn loan_schema() -> TableSchema {
    let cat = |n: &str| ColumnSpec::new(n, ColumnRole::Categorical);
    let num = |n: &str| ColumnSpec::new(n, ColumnRole::Numerical);
    TableSchema {
        columns: vec![
            ColumnSpec::new("account_id", ColumnRole::Entity),
            ColumnSpec::new("date", ColumnRole::Timestamp),
            cat("type"),
            cat("operation"),
            num("amount"),
            num("balance"),
            cat("k_symbol"),
            cat("bank"),
            ColumnSpec::new("default", ColumnRole::Target),
        ],
        window_length: 10,
        derived: vec![DerivedFeature::Day, DerivedFeature::Month, DerivedFeature::Year, DerivedFeature::Weekday],
        n_bins: 50,
        timestamp_parts: None,
        label_mode: LabelMode::PerWindow,
        label_kind: LabelKind::Binary,
    }
}

pub fn loan_prep() -> PrepConfig {
    PrepConfig { stride: 1, split: [0.6, 0.2, 0.2], split_mode: SplitMode::ByEntity, outlier_filter: None }
}
