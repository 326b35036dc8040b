//! Closed-form parameter counts and parameter-budget matching.

use serde::{Deserialize, Serialize};

use super::{Family, HeadKind, ModelConfig};
use crate::{Error, Result};

/// Largest relative deviation from the reference budget.
pub const PARITY_TOLERANCE: f64 = 0.02;

fn layer(d: usize, f: usize) -> usize {
    4 * d * d + 2 * d * f + f + 9 * d
}

/// `(stage1, stage2)` encoder parameters, final norms and fusion included.
pub fn stage_param_counts(cfg: &ModelConfig) -> (usize, usize) {
    let (d, f) = (cfg.d_model, cfg.ffn());
    let ln = 2 * d;
    let (l1, l2) = (cfg.layers1, cfg.layers2);
    match cfg.family {
        Family::FtFlat => (l1 * layer(d, f) + ln, 0),
        Family::Tabbie => (2 * l1 * layer(d, f) + ln, 0),
        Family::TabbertRow | Family::TabbertCol => (l1 * layer(d, f) + ln, l2 * layer(d, f) + ln),
        Family::Fieldy => (2 * (l1 * layer(d, f) + ln) + 2 * d * d + d, l2 * layer(d, f) + ln),
    }
}

/// Total parameters of a model built from `cfg`, without building it.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let (d, v, r, c) = (cfg.d_model, cfg.vocab_size, cfg.rows, cfg.cols);
    let mut n = v * d;
    if cfg.family == Family::Fieldy && cfg.split_field_embeddings {
        n += v * d;
    }
    if cfg.use_row_pos_emb {
        n += (r + 1) * d;
    }
    if cfg.use_col_index_emb {
        n += (c + 1) * d;
    }
    let (s1, s2) = stage_param_counts(cfg);
    n += s1 + s2;
    n += match cfg.head {
        HeadKind::MaskedLm => {
            let expand = match cfg.family {
                Family::TabbertRow => d * c * d + c * d,
                Family::TabbertCol => d * r * d + r * d,
                _ => 0,
            };
            expand + d * v + v
        }
        HeadKind::Regression { k } => d * k + k,
        HeadKind::Binary => d + 1,
    };
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityEntry {
    pub config: ModelConfig,
    pub params: usize,
    /// `(params - reference) / reference`.
    pub rel_diff: f64,
}

/// Share of encoder parameters spent on stage 1.
fn stage1_share(cfg: &ModelConfig) -> f64 {
    let (a, b) = stage_param_counts(cfg);
    a as f64 / (a + b) as f64
}

/// Picks layer counts and FFN width for every family so that each total
/// lands within `tol` of the reference's. Among feasible configurations the
/// one closest to the reference's stage-1 share and to a `4d` FFN wins.
pub fn match_param_counts(reference: &ModelConfig, families: &[Family], tol: f64) -> Result<Vec<ParityEntry>> {
    reference.validate()?;
    let target = analytic_param_count(reference) as f64;
    let ref_share = stage1_share(reference);
    let max_layers = (2 * (reference.layers1 + reference.layers2)).max(12);
    let d = reference.d_model;
    let mut out = Vec::with_capacity(families.len());
    for &family in families {
        if family == reference.family {
            out.push(ParityEntry { config: reference.clone(), params: target as usize, rel_diff: 0.0 });
            continue;
        }
        let mut best: Option<(f64, ModelConfig, usize)> = None;
        let mut nearest: Option<(f64, ModelConfig)> = None;
        let l2_range = if family.is_two_stage() { 1..=max_layers } else { 0..=0 };
        for l1 in 1..=max_layers {
            for l2 in l2_range.clone() {
                let mut cfg = ModelConfig { family, layers1: l1, layers2: l2, ffn_dim: Some(1), ..reference.clone() };
                let at1 = analytic_param_count(&cfg) as f64;
                cfg.ffn_dim = Some(2);
                let slope = analytic_param_count(&cfg) as f64 - at1;
                let f = ((target - at1) / slope + 1.0).round();
                if f < 1.0 {
                    continue;
                }
                cfg.ffn_dim = Some(f as usize);
                let n = analytic_param_count(&cfg);
                let rel = (n as f64 - target) / target;
                if nearest.as_ref().is_none_or(|(r, _)| rel.abs() < r.abs()) {
                    nearest = Some((rel, cfg.clone()));
                }
                if rel.abs() > tol {
                    continue;
                }
                let share_gap = if family.is_two_stage() && reference.family.is_two_stage() {
                    (stage1_share(&cfg) - ref_share).abs()
                } else {
                    0.0
                };
                let score = share_gap + 0.25 * (f / (4 * d) as f64).ln().abs();
                if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                    best = Some((score, cfg, n));
                }
            }
        }
        match best {
            Some((_, mut cfg, n)) => {
                if cfg.ffn_dim == Some(4 * d) {
                    cfg.ffn_dim = None;
                }
                out.push(ParityEntry { config: cfg, params: n, rel_diff: (n as f64 - target) / target });
            }
            None => {
                let detail = nearest.map_or("no configuration".to_string(), |(rel, cfg)| {
                    format!("nearest {}/{} layers, ffn {:?}, off by {:.2}%", cfg.layers1, cfg.layers2, cfg.ffn_dim, rel * 100.0)
                });
                return Err(Error::config(format!(
                    "{family}: no configuration within {:.1}% of {} parameters ({detail})",
                    tol * 100.0,
                    target
                )));
            }
        }
    }
    Ok(out)
}
