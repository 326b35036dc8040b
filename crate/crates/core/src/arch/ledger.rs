use serde::{Deserialize, Serialize};

use super::model::{Ctx, Model, Target};
use super::{Family, HeadKind, ModelConfig};
use crate::tensor::Graph;
use crate::Result;

/// Query-key score computations of one forward pass, per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLedger {
    pub stage1: u64,
    pub stage2: u64,
}

impl AttentionLedger {
    /// `seqs` sequences of length `n`, `heads` heads each: `seqs * h * n^2`.
    pub fn record(&mut self, stage: usize, seqs: usize, n: usize, heads: usize) {
        let pairs = (seqs * heads * n * n) as u64;
        match stage {
            1 => self.stage1 += pairs,
            _ => self.stage2 += pairs,
        }
    }

    pub fn total(&self) -> u64 {
        self.stage1 + self.stage2
    }
}

/// Pairs per layer, per head, per grid, without CLS tokens.
pub fn closed_form_pairs(family: Family, rows: usize, cols: usize) -> (u64, u64) {
    let (r, c) = (rows as u64, cols as u64);
    match family {
        Family::FtFlat => ((r * c).pow(2), 0),
        Family::Tabbie => (r * c * c + c * r * r, 0),
        Family::TabbertRow => (r * c * c, r * r),
        Family::TabbertCol => (c * r * r, c * c),
        Family::Fieldy => (r * c * c + c * r * r, (r * c).pow(2)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub family: Family,
    pub rows: usize,
    pub cols: usize,
    pub measured: AttentionLedger,
    pub predicted: AttentionLedger,
    /// Measured counts divided by `layers * heads` of each stage.
    pub per_layer_head: (u64, u64),
}

impl PairReport {
    pub fn matches(&self) -> bool {
        self.measured == self.predicted
    }
}

/// Runs one CLS-free forward over a single all-`[UNK]` grid and compares
/// the instrumented counts with the closed forms.
pub fn count_attention_pairs(config: &ModelConfig) -> Result<PairReport> {
    let mut config = config.clone();
    config.head = HeadKind::MaskedLm;
    config.dropout = 0.0;
    let model: Model<f32> = Model::new(config.clone(), 0)?;
    let (r, c) = (config.rows, config.cols);
    let ids = vec![crate::vocab::UNK; r * c];
    let mut g = Graph::new();
    let mut ctx = Ctx::eval();
    let all: Vec<usize> = (0..r * c).collect();
    model.forward(&mut g, &ids, 1, Target::Cells(&all), &mut ctx)?;
    let (s1, s2) = closed_form_pairs(config.family, r, c);
    let h = config.heads as u64;
    let predicted = AttentionLedger { stage1: config.layers1 as u64 * h * s1, stage2: config.layers2 as u64 * h * s2 };
    let per = |count: u64, layers: usize| if layers == 0 { 0 } else { count / (layers as u64 * h) };
    Ok(PairReport {
        family: config.family,
        rows: r,
        cols: c,
        measured: ctx.ledger,
        predicted,
        per_layer_head: (per(ctx.ledger.stage1, config.layers1), per(ctx.ledger.stage2, config.layers2)),
    })
}
