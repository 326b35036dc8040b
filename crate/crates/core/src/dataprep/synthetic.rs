//! Seeded synthetic tabular time-series with known structure.

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{ColumnRole, ColumnSpec, LabelKind, LabelMode, RawTable, TableSchema};
use crate::tensor::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// An `Hour` column that increases by one every row (mod 24).
    HourProbe,
    /// Per-step target read from another row and another column.
    CrossFieldRegression,
    /// Per-window binary label from a trailing sum of `num0`.
    DefaultClassification,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::HourProbe => "hour_probe",
            SyntheticTask::CrossFieldRegression => "cross_field_regression",
            SyntheticTask::DefaultClassification => "default_classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hour_probe" => Ok(SyntheticTask::HourProbe),
            "cross_field_regression" => Ok(SyntheticTask::CrossFieldRegression),
            "default_classification" => Ok(SyntheticTask::DefaultClassification),
            _ => Err(Error::config(format!("unknown synthetic task {s:?}"))),
        }
    }
}

fn d_entities() -> usize {
    100
}
fn d_rows() -> usize {
    10
}
fn d_cat() -> usize {
    4
}
fn d_num() -> usize {
    2
}
fn d_levels() -> usize {
    8
}
fn d_bins() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub task: SyntheticTask,
    #[serde(default = "d_entities")]
    pub n_entities: usize,
    #[serde(default = "d_rows")]
    pub rows_per_entity: usize,
    #[serde(default = "d_cat")]
    pub n_categorical: usize,
    #[serde(default = "d_num")]
    pub n_numerical: usize,
    /// Levels of every categorical noise column.
    #[serde(default = "d_levels")]
    pub n_levels: usize,
    #[serde(default = "d_rows")]
    pub window_length: usize,
    #[serde(default = "d_bins")]
    pub n_bins: usize,
    /// Fixed first hour for every entity; random per entity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_hour: Option<u32>,
}

impl SyntheticConfig {
    pub fn new(task: SyntheticTask) -> Self {
        SyntheticConfig {
            task,
            n_entities: d_entities(),
            rows_per_entity: d_rows(),
            n_categorical: d_cat(),
            n_numerical: d_num(),
            n_levels: d_levels(),
            window_length: d_rows(),
            n_bins: d_bins(),
            start_hour: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 || self.window_length == 0 {
            return Err(Error::config("synthetic data needs at least one entity and a positive window length"));
        }
        if self.rows_per_entity < self.window_length {
            return Err(Error::config("rows_per_entity must be at least window_length"));
        }
        if self.n_levels < 2 {
            return Err(Error::config("n_levels must be at least 2"));
        }
        if self.start_hour.is_some_and(|h| h >= 24) {
            return Err(Error::config("start_hour must be below 24"));
        }
        match self.task {
            SyntheticTask::CrossFieldRegression if self.n_categorical == 0 => {
                Err(Error::config("cross_field_regression needs a categorical column"))
            }
            SyntheticTask::CrossFieldRegression if self.window_length < 2 || !self.rows_per_entity.is_multiple_of(self.window_length) => {
                Err(Error::config("cross_field_regression needs windows of at least two rows tiling each entity"))
            }
            SyntheticTask::DefaultClassification if self.n_numerical == 0 => {
                Err(Error::config("default_classification needs a numerical column"))
            }
            _ => Ok(()),
        }
    }
}

/// Target value attached to a `cat0` level: a fixed permutation of the
/// levels, so the target is not monotone in the token id.
pub fn cross_field_value(level: usize, n_levels: usize) -> f64 {
    let perm = (level * 5 + 3) % n_levels;
    10.0 + 3.0 * perm as f64
}

/// Row whose `cat0` drives the target of row `t`: the previous row,
/// or the next one at the first row of a window.
pub fn cross_field_source(t: usize, window_length: usize) -> usize {
    if t.is_multiple_of(window_length) {
        t + 1
    } else {
        t - 1
    }
}

/// Standard-normal quantile at 0.8: roughly 20% of windows default.
const DEFAULT_Z: f64 = 0.841_621_233_572_914_2;

pub fn generate_synthetic(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<(RawTable, TableSchema)> {
    cfg.validate()?;
    let mut columns = vec![ColumnSpec::new("entity", ColumnRole::Entity), ColumnSpec::new("timestamp", ColumnRole::Timestamp)];
    if cfg.task == SyntheticTask::HourProbe {
        columns.push(ColumnSpec::new("Hour", ColumnRole::Categorical));
    }
    for i in 0..cfg.n_categorical {
        columns.push(ColumnSpec::new(format!("cat{i}"), ColumnRole::Categorical));
    }
    for j in 0..cfg.n_numerical {
        columns.push(ColumnSpec::new(format!("num{j}"), ColumnRole::Numerical));
    }
    let (label_mode, label_kind) = match cfg.task {
        SyntheticTask::HourProbe => (LabelMode::PerStep, LabelKind::Regression),
        SyntheticTask::CrossFieldRegression => {
            columns.push(ColumnSpec::new("y", ColumnRole::Target));
            (LabelMode::PerStep, LabelKind::Regression)
        }
        SyntheticTask::DefaultClassification => {
            columns.push(ColumnSpec::new("default", ColumnRole::Target));
            (LabelMode::PerWindow, LabelKind::Binary)
        }
    };
    let header: Vec<String> = columns.iter().map(|c| c.name.clone()).collect();
    let schema = TableSchema {
        columns,
        window_length: cfg.window_length,
        derived: Vec::new(),
        n_bins: cfg.n_bins,
        timestamp_parts: None,
        label_mode,
        label_kind,
    };

    let epoch = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    let width = cfg.n_entities.to_string().len();
    let mut rows = Vec::with_capacity(cfg.n_entities * cfg.rows_per_entity);
    for e in 0..cfg.n_entities {
        let start = cfg.start_hour.unwrap_or_else(|| rng.below(24) as u32);
        let n = cfg.rows_per_entity;
        let cats: Vec<Vec<usize>> =
            (0..n).map(|_| (0..cfg.n_categorical).map(|_| rng.below(cfg.n_levels)).collect()).collect();
        let nums: Vec<Vec<f64>> = (0..n).map(|_| (0..cfg.n_numerical).map(|_| rng.normal()).collect()).collect();
        for t in 0..n {
            let ts = epoch + Duration::hours(start as i64 + t as i64);
            let mut row = vec![format!("e{e:0width$}"), ts.format("%Y-%m-%d %H:%M:%S").to_string()];
            if cfg.task == SyntheticTask::HourProbe {
                row.push(((start as usize + t) % 24).to_string());
            }
            row.extend(cats[t].iter().map(|l| format!("v{l}")));
            row.extend(nums[t].iter().map(|x| format!("{x:.6}")));
            match cfg.task {
                SyntheticTask::HourProbe => {}
                SyntheticTask::CrossFieldRegression => {
                    let src = cross_field_source(t, cfg.window_length);
                    row.push(format!("{}", cross_field_value(cats[src][0], cfg.n_levels)));
                }
                SyntheticTask::DefaultClassification => {
                    let lo = (t + 1).saturating_sub(cfg.window_length);
                    // Sum the printed values so the label matches the CSV exactly.
                    let sum: f64 = (lo..=t).map(|i| format!("{:.6}", nums[i][0]).parse::<f64>().unwrap()).sum();
                    let k = (t + 1 - lo) as f64;
                    row.push(if sum > DEFAULT_Z * k.sqrt() { "1" } else { "0" }.to_string());
                }
            }
            rows.push(row);
        }
    }
    Ok((RawTable { header, rows }, schema))
}
