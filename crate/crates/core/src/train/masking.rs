use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;
use crate::vocab::{Vocabulary, MASK};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Per-cell selection probability.
    pub prob: f64,
    /// Among selected cells: share replaced by `[MASK]`.
    pub mask_frac: f64,
    /// Among selected cells: share replaced by a random in-column id.
    pub random_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { prob: 0.15, mask_frac: 0.8, random_frac: 0.1 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.prob) || !unit(self.mask_frac) || !unit(self.random_frac) || self.mask_frac + self.random_frac > 1.0 {
            return Err(Error::config(format!("invalid masking fractions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Mask,
    Random(usize),
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedCell {
    /// Flat index into the batch, `b*R*C + r*C + c`.
    pub index: usize,
    pub original: usize,
    pub action: MaskAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub cells: Vec<MaskedCell>,
}

impl MaskingPlan {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.index).collect()
    }

    pub fn originals(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.original).collect()
    }
}

/// Id ranges of every vocabulary column, in grid-column order.
pub fn column_ranges(vocab: &Vocabulary) -> Vec<Range<usize>> {
    (0..vocab.n_columns()).map(|c| vocab.column_range(c)).collect()
}

/// Independent Bernoulli selection per cell, then an 80/10/10-style action
/// draw per selected cell. `ids` holds whole grids of `ranges.len()`
/// columns; random replacements come from the victim's own column.
pub fn sample_masking_plan(ids: &[usize], ranges: &[Range<usize>], cfg: &MaskingConfig, rng: &mut Rng) -> MaskingPlan {
    let cols = ranges.len();
    let mut cells = Vec::new();
    for (index, &original) in ids.iter().enumerate() {
        if !rng.bernoulli(cfg.prob) {
            continue;
        }
        let u = rng.uniform();
        let action = if u < cfg.mask_frac {
            MaskAction::Mask
        } else if u < cfg.mask_frac + cfg.random_frac {
            let range = &ranges[index % cols];
            MaskAction::Random(range.start + rng.below(range.len()))
        } else {
            MaskAction::Keep
        };
        cells.push(MaskedCell { index, original, action });
    }
    MaskingPlan { cells }
}

pub fn apply_masking(ids: &[usize], plan: &MaskingPlan) -> Vec<usize> {
    let mut out = ids.to_vec();
    for cell in &plan.cells {
        match cell.action {
            MaskAction::Mask => out[cell.index] = MASK,
            MaskAction::Random(id) => out[cell.index] = id,
            MaskAction::Keep => {}
        }
    }
    out
}
