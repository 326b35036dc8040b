//! Task metrics, batched prediction, the hour-column probe and seed
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::arch::{Ctx, HeadKind, Model};
use crate::dataprep::TargetNormalizer;
use crate::tensor::{Graph, Real, Rng};
use crate::vocab::{TokenGrid, Vocabulary, MASK};
use crate::{Error, Result};

/// Per-column RMSE over `n x k` row-major arrays, averaged over the `k`
/// columns.
pub fn rmse_avg(preds: &[f64], targets: &[f64], k: usize) -> Result<f64> {
    if k == 0 || preds.len() != targets.len() || !preds.len().is_multiple_of(k) || preds.is_empty() {
        return Err(Error::Shape { op: "rmse_avg", left: vec![preds.len(), k], right: vec![targets.len(), k] });
    }
    let n = preds.len() / k;
    let mut sq = vec![0.0; k];
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        sq[i % k] += (p - t) * (p - t);
    }
    Ok(sq.iter().map(|s| (s / n as f64).sqrt()).sum::<f64>() / k as f64)
}

/// [`rmse_avg`] after mapping normalized predictions back to label units.
pub fn rmse_avg_denormalized(
    preds_normalized: &[f64],
    targets: &[f64],
    k: usize,
    normalizer: Option<&TargetNormalizer>,
) -> Result<f64> {
    let preds: Vec<f64> = match normalizer {
        Some(norm) => preds_normalized.chunks(k.max(1)).flat_map(|row| norm.inverse(row)).collect(),
        None => preds_normalized.to_vec(),
    };
    rmse_avg(&preds, targets, k)
}

/// Step-wise average precision: mean over positives of the precision at
/// that positive's rank. Ranking is by descending score; equal scores keep
/// their input order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape { op: "average_precision", left: vec![scores.len()], right: vec![labels.len()] });
    }
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::data(format!("label {} at index {i} is not 0/1", labels[i])));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score at index {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `sort_by` is stable, so ties keep the original order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut total) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1.0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

fn stack_ids(grids: &[TokenGrid]) -> Vec<usize> {
    grids.iter().flat_map(|g| g.ids.iter().copied()).collect()
}

/// Head outputs for every grid, `n x k` row-major, computed in batches.
pub fn predict<T: Real>(model: &Model<T>, grids: &[TokenGrid], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in grids.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let y = model.head_output(&mut g, &stack_ids(chunk), chunk.len(), &mut Ctx::eval())?;
        out.extend(g.value(y).to_f64_vec());
    }
    Ok(out)
}

/// Task metric of a fine-tuned model: `rmse` (label units) for regression,
/// `average_precision` for binary heads.
pub fn task_metric<T: Real>(
    model: &Model<T>,
    grids: &[TokenGrid],
    batch_size: usize,
    normalizer: Option<&TargetNormalizer>,
) -> Result<(&'static str, f64)> {
    let preds = predict(model, grids, batch_size)?;
    let labels: Vec<f64> = grids.iter().flat_map(|g| g.labels.iter().copied()).collect();
    match model.config().head {
        HeadKind::Regression { k } => Ok(("rmse", rmse_avg_denormalized(&preds, &labels, k, normalizer)?)),
        HeadKind::Binary => Ok(("average_precision", average_precision(&preds, &labels)?)),
        HeadKind::MaskedLm => Err(Error::config("task metrics need a fine-tuning head")),
    }
}

/// Whether a larger value of `metric` is better.
pub fn higher_is_better(metric: &str) -> bool {
    matches!(metric, "average_precision" | "accuracy")
}

/// Rows hidden from the model by the probe.
pub const PROBE_MASKED_ROWS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCandidates {
    /// Argmax over every vocabulary entry.
    FullVocab,
    /// Argmax restricted to the hour column's own entries.
    ColumnRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Copy of `grid` with every cell of the last [`PROBE_MASKED_ROWS`] rows
/// replaced by `[MASK]`, plus the in-grid indices of the masked hour cells.
pub fn probe_mask(grid: &TokenGrid, hour_col: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (r, c) = grid.shape();
    if r <= PROBE_MASKED_ROWS || hour_col >= c {
        return Err(Error::config(format!(
            "probe needs more than {PROBE_MASKED_ROWS} rows and an hour column (grid {r}x{c}, column {hour_col})"
        )));
    }
    let first = r - PROBE_MASKED_ROWS;
    let mut ids = grid.ids.clone();
    ids[first * c..].iter_mut().for_each(|x| *x = MASK);
    let cells = (first..r).map(|row| row * c + hour_col).collect();
    Ok((ids, cells))
}

/// Scores a predictor that, given masked grids and the hour cells to fill,
/// returns one token id per cell.
pub fn probe_with<F>(grids: &[TokenGrid], hour_col: usize, mut predictor: F) -> Result<ProbeResult>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<usize>>,
{
    let (mut correct, mut total) = (0, 0);
    for grid in grids {
        let (masked, cells) = probe_mask(grid, hour_col)?;
        let guesses = predictor(&masked, &cells)?;
        for (&cell, &guess) in cells.iter().zip(&guesses) {
            correct += usize::from(guess == grid.ids[cell]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("probe over zero sequences".into()));
    }
    Ok(ProbeResult { correct, total, accuracy: correct as f64 / total as f64 })
}

/// Top-1 hour accuracy of a masked-LM model.
pub fn run_probe<T: Real>(
    model: &Model<T>,
    grids: &[TokenGrid],
    vocab: &Vocabulary,
    hour_column: &str,
    candidates: ProbeCandidates,
) -> Result<ProbeResult> {
    let hour_col = vocab
        .column_index(hour_column)
        .ok_or_else(|| Error::config(format!("dataset has no {hour_column:?} column to probe")))?;
    let range = match candidates {
        ProbeCandidates::FullVocab => 0..vocab.size(),
        ProbeCandidates::ColumnRange => vocab.column_range(hour_col),
    };
    probe_with(grids, hour_col, |ids, cells| {
        let mut g = Graph::new();
        let logits = model.mlm_logits(&mut g, ids, 1, cells, &mut Ctx::eval())?;
        let lv = g.value(logits);
        let v = lv.last_dim();
        Ok(lv
            .data()
            .chunks(v)
            .map(|row| {
                // First maximum wins.
                range.clone().fold(range.start, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    })
}

/// The rule the probe is built around: the last visible hour plus the row
/// offset, mod 24. Falls back to `[UNK]` when a value is not in the vocabulary.
pub fn oracle_hour_predictor<'a>(
    vocab: &'a Vocabulary,
    hour_col: usize,
    cols: usize,
) -> impl FnMut(&[usize], &[usize]) -> Result<Vec<usize>> + 'a {
    move |ids, cells| {
        let first_masked = cells[0] / cols;
        let last_seen = ids[(first_masked - 1) * cols + hour_col];
        let hour: usize = vocab
            .decode(last_seen)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::data("hour cell does not hold an integer hour"))?;
        Ok(cells
            .iter()
            .map(|&cell| {
                let h = (hour + cell / cols - first_masked + 1) % 24;
                vocab.encode(&h.to_string(), hour_col)
            })
            .collect())
    }
}

/// Guesses uniformly among the hour column's entries.
pub fn uniform_hour_predictor<'a>(
    vocab: &'a Vocabulary,
    hour_col: usize,
    rng: &'a mut Rng,
) -> impl FnMut(&[usize], &[usize]) -> Result<Vec<usize>> + 'a {
    let range = vocab.column_range(hour_col);
    move |_, cells| Ok(cells.iter().map(|_| range.start + rng.below(range.len())).collect())
}

/// One seed's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub task: String,
    pub family: String,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub family: String,
    pub metric: String,
    pub seeds: Vec<SeedValue>,
    pub mean: f64,
    /// Sample standard deviation; absent for a single seed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    /// Kept `null` so reruns produce identical files; timings go to a
    /// separate `timing.json`.
    pub runtime_s: Option<f64>,
}

pub fn aggregate_seeds(runs: &[SeedMetric]) -> Result<MetricsReport> {
    let first = runs.first().ok_or_else(|| Error::config("no seed results to aggregate"))?;
    if let Some(bad) = runs.iter().find(|r| r.task != first.task || r.family != first.family || r.metric != first.metric) {
        return Err(Error::config(format!(
            "cannot aggregate {}/{}/{} with {}/{}/{}",
            first.task, first.family, first.metric, bad.task, bad.family, bad.metric
        )));
    }
    if let Some(bad) = runs.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::NonFinite(format!("seed {} scored {}", bad.seed, bad.value)));
    }
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.value).sum::<f64>() / n;
    let std = (runs.len() >= 2).then(|| (runs.iter().map(|r| (r.value - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(MetricsReport {
        task: first.task.clone(),
        family: first.family.clone(),
        metric: first.metric.clone(),
        seeds: runs.iter().map(|r| SeedValue { seed: r.seed, value: r.value }).collect(),
        mean,
        std,
        runtime_s: None,
    })
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
