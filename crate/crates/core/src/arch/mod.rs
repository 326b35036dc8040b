//! The five attention layouts over an `R x C` token grid.
//!
//! | family        | stage 1                          | stage 2                 |
//! |---------------|----------------------------------|-------------------------|
//! | `ft_flat`     | all `R*C` fields as one sequence | -                       |
//! | `tabbie`      | rows and columns, averaged/layer | -                       |
//! | `tabbert_row` | each row, mean-pooled            | the `R` row vectors     |
//! | `tabbert_col` | each column, mean-pooled         | the `C` column vectors  |
//! | `fieldy`      | rows and columns, fused per cell | all `R*C` fused fields  |

mod checkpoint;
mod ledger;
mod model;
mod parity;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointMeta, TensorList, MAGIC, VERSION,
};
pub use ledger::{closed_form_pairs, count_attention_pairs, AttentionLedger, PairReport};
pub use model::{Ctx, Model, Target};
pub use parity::{analytic_param_count, match_param_counts, stage_param_counts, ParityEntry, PARITY_TOLERANCE};

use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FtFlat,
    Tabbie,
    TabbertRow,
    TabbertCol,
    Fieldy,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::FtFlat, Family::Tabbie, Family::TabbertRow, Family::TabbertCol, Family::Fieldy];

    pub fn name(self) -> &'static str {
        match self {
            Family::FtFlat => "ft_flat",
            Family::Tabbie => "tabbie",
            Family::TabbertRow => "tabbert_row",
            Family::TabbertCol => "tabbert_col",
            Family::Fieldy => "fieldy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model family {s:?}")))
    }

    pub fn is_two_stage(self) -> bool {
        matches!(self, Family::TabbertRow | Family::TabbertCol | Family::Fieldy)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    MaskedLm,
    Regression { k: usize },
    Binary,
}

impl HeadKind {
    /// Width of the fine-tuning output; `None` for the masked-LM head.
    pub fn out_dim(self) -> Option<usize> {
        match self {
            HeadKind::MaskedLm => None,
            HeadKind::Regression { k } => Some(k),
            HeadKind::Binary => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabbiePooling {
    /// CLS cells appended to every row and column; their states are averaged.
    #[default]
    ClsGrid,
    /// Mean over all field states.
    Mean,
}

fn yes() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub d_model: usize,
    pub heads: usize,
    pub layers1: usize,
    #[serde(default)]
    pub layers2: usize,
    /// FFN inner width; `4 * d_model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(default = "yes")]
    pub use_row_pos_emb: bool,
    #[serde(default = "yes")]
    pub use_col_index_emb: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Grid and vocabulary sizes; zero means "take from the dataset".
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub rows: usize,
    #[serde(default)]
    pub cols: usize,
    pub head: HeadKind,
    #[serde(default)]
    pub tabbie_pooling: TabbiePooling,
    /// Fieldy only: give the column-context stream its own token table.
    #[serde(default)]
    pub split_field_embeddings: bool,
}

impl ModelConfig {
    pub fn tiny(family: Family, vocab_size: usize, rows: usize, cols: usize, head: HeadKind) -> Self {
        ModelConfig {
            family,
            d_model: 64,
            heads: 4,
            layers1: 2,
            layers2: if family.is_two_stage() { 1 } else { 0 },
            ffn_dim: None,
            use_row_pos_emb: true,
            use_col_index_emb: true,
            dropout: 0.0,
            vocab_size,
            rows,
            cols,
            head,
            tabbie_pooling: TabbiePooling::ClsGrid,
            split_field_embeddings: false,
        }
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.layers1 == 0 {
            return bad("layers1 must be at least 1".into());
        }
        if self.family.is_two_stage() && self.layers2 == 0 {
            return bad(format!("{} needs layers2 >= 1", self.family));
        }
        if !self.family.is_two_stage() && self.layers2 != 0 {
            return bad(format!("{} is single-stage; layers2 must be 0", self.family));
        }
        if self.ffn_dim == Some(0) {
            return bad("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= crate::vocab::N_SPECIAL || self.rows == 0 || self.cols == 0 {
            return bad(format!(
                "vocab_size {} / grid {}x{} not set",
                self.vocab_size, self.rows, self.cols
            ));
        }
        if let HeadKind::Regression { k: 0 } = self.head {
            return bad("regression head needs k >= 1".into());
        }
        Ok(())
    }
}
