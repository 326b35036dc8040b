//! Raw tables to windowed, discretized tabular time-series samples.
//!
//! The pipeline is: optional outlier filtering, per-row timestamp expansion,
//! per-entity windowing, train/val/test assignment, quantile binning fitted
//! on the training rows only, label extraction and target normalization,
//! and finally the vocabulary built over the training split.

mod binning;
mod normalize;
pub mod synthetic;
mod time;
mod window;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

pub use binning::{bin_value, QuantileBinner};
pub use normalize::TargetNormalizer;
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticTask};
pub use time::{expand_timestamp, expand_timestamp_str, parse_timestamp, DerivedFeature};
pub use window::{split_samples, window_by_entity, RowKey, Split, SplitMode, Window};

use crate::tensor::{rng::stream, Rng};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// Field value used for missing cells.
pub const MISSING: &str = "NA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Entity,
    Timestamp,
    Categorical,
    Numerical,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binner: Option<QuantileBinner>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, role: ColumnRole) -> Self {
        ColumnSpec { name: name.into(), role, binner: None }
    }
}

/// Timestamp assembled from separate calendar columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestampParts {
    pub year: String,
    pub month: String,
    pub day: String,
    #[serde(default)]
    pub hour: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Every row's targets, step-major.
    #[default]
    PerStep,
    /// Targets of the window's last row.
    PerWindow,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[default]
    Regression,
    Binary,
}

fn default_bins() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    pub columns: Vec<ColumnSpec>,
    pub window_length: usize,
    /// Engineered fields appended after the raw feature columns.
    #[serde(default)]
    pub derived: Vec<DerivedFeature>,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_parts: Option<TimestampParts>,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default)]
    pub label_kind: LabelKind,
}

impl TableSchema {
    pub fn validate(&self) -> Result<()> {
        let count = |role| self.columns.iter().filter(|c| c.role == role).count();
        if count(ColumnRole::Entity) != 1 {
            return Err(Error::config("schema needs exactly one entity column"));
        }
        if count(ColumnRole::Timestamp) > 1 {
            return Err(Error::config("schema allows at most one timestamp column"));
        }
        if count(ColumnRole::Timestamp) == 1 && self.timestamp_parts.is_some() {
            return Err(Error::config("use either a timestamp column or timestamp_parts, not both"));
        }
        if self.window_length == 0 {
            return Err(Error::config("window_length must be at least 1"));
        }
        let needs_time = self.derived.iter().any(|d| *d != DerivedFeature::Entity);
        if needs_time && !self.has_timestamp() {
            return Err(Error::config("derived calendar features need a timestamp"));
        }
        if self.field_names().is_empty() {
            return Err(Error::config("schema has no field columns"));
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::config(format!("column {:?} declared twice", c.name)));
            }
            if let Some(b) = &c.binner {
                if b.boundaries.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::config(format!("binner of {:?} has decreasing boundaries", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn has_timestamp(&self) -> bool {
        self.timestamp_parts.is_some() || self.columns.iter().any(|c| c.role == ColumnRole::Timestamp)
    }

    pub fn entity_column(&self) -> &str {
        self.columns.iter().find(|c| c.role == ColumnRole::Entity).map(|c| c.name.as_str()).unwrap_or("")
    }

    /// Raw categorical and numerical columns, in schema order.
    pub fn feature_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| matches!(c.role, ColumnRole::Categorical | ColumnRole::Numerical))
    }

    pub fn target_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.role == ColumnRole::Target)
    }

    /// Names of the `C` fields of every row: raw features then derived ones.
    pub fn field_names(&self) -> Vec<String> {
        self.feature_columns()
            .map(|c| c.name.clone())
            .chain(self.derived.iter().map(|d| d.column_name().to_string()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierDirection {
    /// Drop rows whose fine-particle reading exceeds the coarse one.
    #[default]
    FineExceedsCoarse,
    CoarseExceedsFine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierFilter {
    pub fine: String,
    pub coarse: String,
    #[serde(default)]
    pub remove_when: OutlierDirection,
}

fn default_stride() -> usize {
    1
}

fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_split_mode() -> SplitMode {
    SplitMode::BySample
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_fractions")]
    pub split: [f64; 3],
    #[serde(default = "default_split_mode")]
    pub split_mode: SplitMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_filter: Option<OutlierFilter>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { stride: 1, split: default_fractions(), split_mode: SplitMode::BySample, outlier_filter: None }
    }
}

/// In-memory CSV table. Cells are kept as strings until the schema says
/// how to read them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let header = reader.headers()?.iter().map(|h| h.trim().to_string()).collect::<Vec<_>>();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::data(format!("{}: line {line}: {e}", path.display()))
            })?;
            rows.push(rec.iter().map(|s| s.to_string()).collect());
        }
        Ok(RawTable { header, rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("column {name:?} not found in header {:?}", self.header)))
    }
}

pub fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null" | "NULL")
}

fn parse_number(cell: &str, column: &str, row: usize) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::data_at(format!("column {column:?}: {cell:?} is not a number"), row))
}

/// Removes physically inconsistent particle readings. Returns the kept
/// table and the removed fraction.
pub fn filter_pollution_outliers(table: &RawTable, filter: &OutlierFilter) -> Result<(RawTable, f64)> {
    let fine = table.column(&filter.fine)?;
    let coarse = table.column(&filter.coarse)?;
    let mut kept = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let (f, c) = (&row[fine], &row[coarse]);
        let drop = if is_missing(f) || is_missing(c) {
            false
        } else {
            let (f, c) = (parse_number(f, &filter.fine, i)?, parse_number(c, &filter.coarse, i)?);
            match filter.remove_when {
                OutlierDirection::FineExceedsCoarse => f > c,
                OutlierDirection::CoarseExceedsFine => c > f,
            }
        };
        if !drop {
            kept.push(row.clone());
        }
    }
    let removed = if table.rows.is_empty() { 0.0 } else { 1.0 - kept.len() as f64 / table.rows.len() as f64 };
    Ok((RawTable { header: table.header.clone(), rows: kept }, removed))
}

/// One windowed sample before tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub entity: String,
    pub window_start: usize,
    /// `R` rows of `C` field strings.
    pub fields: Vec<Vec<String>>,
    /// Empty for unlabeled samples.
    pub labels: Vec<f64>,
    pub split: Split,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }
}

/// Everything about a prepared dataset except the samples themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema: TableSchema,
    pub field_names: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub n_targets: usize,
    pub n_labels: usize,
    pub seed: u64,
    pub prep: PrepConfig,
    pub removed_outlier_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
    pub normalizer: Option<TargetNormalizer>,
    pub vocab: Vocabulary,
}

impl PreparedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

struct ParsedRow {
    key: RowKey,
    features: Vec<String>,
    numeric: Vec<Option<f64>>,
    derived: Vec<String>,
    targets: Option<Vec<f64>>,
}

fn parse_rows(table: &RawTable, schema: &TableSchema) -> Result<Vec<ParsedRow>> {
    let entity = table.column(schema.entity_column())?;
    let ts_col = schema
        .columns
        .iter()
        .find(|c| c.role == ColumnRole::Timestamp)
        .map(|c| table.column(&c.name))
        .transpose()?;
    let parts = schema
        .timestamp_parts
        .as_ref()
        .map(|p| -> Result<_> {
            Ok((
                table.column(&p.year)?,
                table.column(&p.month)?,
                table.column(&p.day)?,
                p.hour.as_ref().map(|h| table.column(h)).transpose()?,
            ))
        })
        .transpose()?;
    let features: Vec<(usize, &ColumnSpec)> =
        schema.feature_columns().map(|c| Ok((table.column(&c.name)?, c))).collect::<Result<_>>()?;
    let targets: Vec<(usize, &str)> =
        schema.target_columns().map(|c| Ok((table.column(&c.name)?, c.name.as_str()))).collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != table.header.len() {
            return Err(Error::data_at(format!("expected {} cells, found {}", table.header.len(), row.len()), i));
        }
        let time: Option<NaiveDateTime> = if let Some(c) = ts_col {
            Some(parse_timestamp(&row[c]).ok_or_else(|| Error::data_at(format!("unparseable timestamp {:?}", row[c]), i))?)
        } else if let Some((y, m, d, h)) = parts {
            let num = |c: usize| row[c].trim().parse::<u32>().ok();
            let date = NaiveDate::from_ymd_opt(num(y).unwrap_or(0) as i32, num(m).unwrap_or(0), num(d).unwrap_or(0));
            let hour = h.map_or(Some(0), num);
            Some(
                date.zip(hour)
                    .and_then(|(dt, hr)| dt.and_hms_opt(hr, 0, 0))
                    .ok_or_else(|| Error::data_at("invalid calendar parts", i))?,
            )
        } else {
            None
        };
        let mut derived = Vec::with_capacity(schema.derived.len());
        for d in &schema.derived {
            match d {
                DerivedFeature::Entity => derived.push(row[entity].clone()),
                other => derived.extend(expand_timestamp(time.as_ref().expect("validated"), &[*other])),
            }
        }
        let mut feats = Vec::with_capacity(features.len());
        let mut numeric = Vec::with_capacity(features.len());
        for &(c, spec) in &features {
            let cell = row[c].trim();
            if is_missing(cell) {
                feats.push(MISSING.to_string());
                numeric.push(None);
            } else if spec.role == ColumnRole::Numerical {
                let v = parse_number(cell, &spec.name, i)?;
                if !v.is_finite() {
                    return Err(Error::data_at(format!("column {:?}: non-finite value", spec.name), i));
                }
                feats.push(String::new());
                numeric.push(Some(v));
            } else {
                feats.push(cell.to_string());
                numeric.push(None);
            }
        }
        let tvals = if targets.is_empty() || targets.iter().any(|&(c, _)| is_missing(&row[c])) {
            None
        } else {
            Some(targets.iter().map(|&(c, name)| parse_number(&row[c], name, i)).collect::<Result<Vec<_>>>()?)
        };
        out.push(ParsedRow {
            key: RowKey { entity: row[entity].clone(), time },
            features: feats,
            numeric,
            derived,
            targets: tvals,
        });
    }
    Ok(out)
}

/// Runs the whole preparation pipeline on an in-memory table.
pub fn prepare(table: &RawTable, schema: &TableSchema, prep: &PrepConfig, seed: u64) -> Result<PreparedDataset> {
    schema.validate()?;
    let (table, removed) = match &prep.outlier_filter {
        Some(f) => filter_pollution_outliers(table, f)?,
        None => (table.clone(), 0.0),
    };
    let rows = parse_rows(&table, schema)?;
    let keys: Vec<RowKey> = rows.iter().map(|r| r.key.clone()).collect();
    let windows = window_by_entity(&keys, schema.window_length, prep.stride)?;
    if windows.is_empty() {
        return Err(Error::data("no entity has enough rows for a single window"));
    }
    let entities: Vec<&str> = windows.iter().map(|w| w.entity.as_str()).collect();
    let splits = split_samples(&entities, prep.split, prep.split_mode, &mut Rng::new(seed, stream::SPLIT))?;

    // Binners see each training row once, even when windows overlap.
    let train_rows: BTreeSet<usize> =
        windows.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).flat_map(|(w, _)| w.rows.iter().copied()).collect();
    let mut schema = schema.clone();
    let feature_idx: Vec<usize> = schema
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(c.role, ColumnRole::Categorical | ColumnRole::Numerical))
        .map(|(i, _)| i)
        .collect();
    for (f, &ci) in feature_idx.iter().enumerate() {
        if schema.columns[ci].role != ColumnRole::Numerical {
            continue;
        }
        let values: Vec<f64> = train_rows.iter().filter_map(|&r| rows[r].numeric[f]).collect();
        let binner = if values.is_empty() {
            QuantileBinner { boundaries: Vec::new() }
        } else {
            QuantileBinner::fit(&values, schema.n_bins)?
        };
        schema.columns[ci].binner = Some(binner);
    }

    let n_targets = schema.target_columns().count();
    let mut samples = Vec::with_capacity(windows.len());
    for (w, &split) in windows.iter().zip(&splits) {
        let mut fields = Vec::with_capacity(w.rows.len());
        for &r in &w.rows {
            let row = &rows[r];
            let mut cells = Vec::with_capacity(row.features.len() + row.derived.len());
            for (f, &ci) in feature_idx.iter().enumerate() {
                match (&schema.columns[ci].binner, row.numeric[f]) {
                    (Some(b), Some(v)) => cells.push(b.bin(v)?.to_string()),
                    _ => cells.push(row.features[f].clone()),
                }
            }
            cells.extend(row.derived.iter().cloned());
            fields.push(cells);
        }
        let labels = if n_targets == 0 {
            Vec::new()
        } else {
            match schema.label_mode {
                LabelMode::PerStep => {
                    let all: Option<Vec<Vec<f64>>> = w.rows.iter().map(|&r| rows[r].targets.clone()).collect();
                    all.map(|v| v.concat()).unwrap_or_default()
                }
                LabelMode::PerWindow => rows[*w.rows.last().expect("non-empty window")].targets.clone().unwrap_or_default(),
            }
        };
        samples.push(Sample { entity: w.entity.clone(), window_start: w.start, fields, labels, split });
    }

    let n_labels = match (n_targets, schema.label_mode) {
        (0, _) => 0,
        (k, LabelMode::PerStep) => k * schema.window_length,
        (k, LabelMode::PerWindow) => k,
    };
    let normalizer = if n_targets > 0 && schema.label_kind == LabelKind::Regression {
        let train: Vec<&[f64]> =
            samples.iter().filter(|s| s.split == Split::Train && s.is_labeled()).map(|s| s.labels.as_slice()).collect();
        Some(TargetNormalizer::fit(&train, n_targets)?)
    } else {
        None
    };
    if schema.label_kind == LabelKind::Binary {
        if let Some(s) = samples.iter().find(|s| s.labels.iter().any(|&y| y != 0.0 && y != 1.0)) {
            return Err(Error::data(format!("binary label outside {{0, 1}} in entity {:?}", s.entity)));
        }
    }

    let field_names = schema.field_names();
    let vocab = Vocabulary::build(samples.iter().filter(|s| s.split == Split::Train), &field_names)?;
    let meta = DatasetMeta {
        rows: schema.window_length,
        cols: field_names.len(),
        field_names,
        n_targets,
        n_labels,
        seed,
        prep: prep.clone(),
        removed_outlier_fraction: removed,
        schema,
    };
    Ok(PreparedDataset { meta, samples, normalizer, vocab })
}

/// File names inside a prepared-dataset directory.
pub mod files {
    pub const SCHEMA: &str = "schema.json";
    pub const SAMPLES: &str = "samples.jsonl";
    pub const VOCAB: &str = "vocab.json";
    pub const NORMALIZER: &str = "normalizer.json";
    pub const SPLITS: &str = "splits.json";
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    seed: u64,
    mode: SplitMode,
    fractions: [f64; 3],
    counts: BTreeMap<String, usize>,
    entities: BTreeMap<String, usize>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

impl PreparedDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(files::SCHEMA), &self.meta)?;
        write_json(&dir.join(files::VOCAB), &self.vocab)?;
        if let Some(n) = &self.normalizer {
            write_json(&dir.join(files::NORMALIZER), n)?;
        }
        let path = dir.join(files::SAMPLES);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let mut counts = BTreeMap::new();
        let mut entities: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.split.name().to_string()).or_insert(0) += 1;
            entities.entry(s.split.name().to_string()).or_default().insert(&s.entity);
        }
        let manifest = SplitManifest {
            seed: self.meta.seed,
            mode: self.meta.prep.split_mode,
            fractions: self.meta.prep.split,
            counts,
            entities: entities.into_iter().map(|(k, v)| (k, v.len())).collect(),
        };
        write_json(&dir.join(files::SPLITS), &manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join(files::SCHEMA))?;
        let vocab: Vocabulary = read_json(&dir.join(files::VOCAB))?;
        vocab.validate()?;
        let norm_path = dir.join(files::NORMALIZER);
        let normalizer = if norm_path.exists() { Some(read_json(&norm_path)?) } else { None };
        let path = dir.join(files::SAMPLES);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
            if s.fields.len() != meta.rows || s.fields.iter().any(|r| r.len() != meta.cols) {
                return Err(Error::data(format!("{}: line {}: grid shape mismatch", path.display(), i + 1)));
            }
            samples.push(s);
        }
        Ok(PreparedDataset { meta, samples, normalizer, vocab })
    }
}

#[cfg(test)]
mod tests;
