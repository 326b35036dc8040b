//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string: the result, or `{"error": "..."}`.
//! Keeping errors in-band lets the same functions run in native tests.

use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use tabform::arch::{count_attention_pairs, match_param_counts, Family, HeadKind, ModelConfig, PARITY_TOLERANCE};
use tabform::tensor::{rng::stream, Rng};
use tabform::train::{sample_masking_plan, MaskAction, MaskingConfig};

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn base_config(family: &str, d_model: usize, heads: usize, rows: usize, cols: usize, vocab: usize) -> Result<ModelConfig, String> {
    let family = Family::parse(family).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::tiny(family, vocab, rows, cols, HeadKind::MaskedLm);
    cfg.d_model = d_model;
    cfg.heads = heads;
    Ok(cfg)
}

/// Query-key pairs scored by every family on an `rows x cols` grid, with
/// `layers` per stage and `heads` heads.
#[wasm_bindgen]
pub fn attention_pairs(rows: usize, cols: usize, layers: usize, heads: usize) -> String {
    respond((|| {
        let mut out = Vec::new();
        for family in Family::ALL {
            let mut cfg = base_config(family.name(), 8 * heads.max(1), heads, rows, cols, 64)?;
            cfg.layers1 = layers;
            cfg.layers2 = if family.is_two_stage() { layers } else { 0 };
            cfg.validate().map_err(|e| e.to_string())?;
            let rep = count_attention_pairs(&cfg).map_err(|e| e.to_string())?;
            out.push(json!({
                "family": family.name(),
                "stage1": rep.measured.stage1,
                "stage2": rep.measured.stage2,
                "total": rep.measured.stage1 + rep.measured.stage2,
                "per_layer_head": [rep.per_layer_head.0, rep.per_layer_head.1],
                "matches_closed_form": rep.matches(),
            }));
        }
        Ok(Value::Array(out))
    })())
}

/// Layer counts that bring every family within the parity tolerance of
/// the reference family's parameter count.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn parity_layers(reference: &str, d_model: usize, heads: usize, layers1: usize, layers2: usize, rows: usize, cols: usize, vocab: usize) -> String {
    respond((|| {
        let mut cfg = base_config(reference, d_model, heads, rows, cols, vocab)?;
        cfg.layers1 = layers1;
        cfg.layers2 = if cfg.family.is_two_stage() { layers2 } else { 0 };
        cfg.validate().map_err(|e| e.to_string())?;
        let entries = match_param_counts(&cfg, &Family::ALL, PARITY_TOLERANCE).map_err(|e| e.to_string())?;
        Ok(Value::Array(
            entries
                .iter()
                .map(|e| {
                    json!({
                        "family": e.config.family.name(),
                        "layers": [e.config.layers1, e.config.layers2],
                        "params": e.params,
                        "rel_diff": e.rel_diff,
                    })
                })
                .collect(),
        ))
    })())
}

/// One draw of the pretraining corruption over a single `rows x cols`
/// grid: a row-major list of `"mask"`, `"random"`, `"keep"` or `null`.
#[wasm_bindgen]
pub fn masking_plan(rows: usize, cols: usize, seed: u64) -> String {
    respond((|| {
        if rows == 0 || cols == 0 || rows * cols > 10_000 {
            return Err(format!("grid {rows}x{cols} must have between 1 and 10000 cells"));
        }
        // Ten tokens per column after the four special ids.
        let ranges: Vec<_> = (0..cols).map(|c| 4 + 10 * c..14 + 10 * c).collect();
        let ids: Vec<usize> = (0..rows * cols).map(|i| ranges[i % cols].start).collect();
        let plan = sample_masking_plan(&ids, &ranges, &MaskingConfig::default(), &mut Rng::new(seed, stream::MASKING));
        let mut cells = vec![Value::Null; rows * cols];
        for cell in &plan.cells {
            cells[cell.index] = json!(match cell.action {
                MaskAction::Mask => "mask",
                MaskAction::Random(_) => "random",
                MaskAction::Keep => "keep",
            });
        }
        Ok(json!({ "rows": rows, "cols": cols, "selected": plan.cells.len(), "cells": cells }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    #[test]
    fn pairs_cover_every_family() {
        let v = parse(attention_pairs(10, 16, 1, 1));
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), Family::ALL.len());
        let flat = rows.iter().find(|r| r["family"] == "ft_flat").unwrap();
        assert_eq!(flat["stage1"], 25_600);
        assert!(rows.iter().all(|r| r["matches_closed_form"] == true));
    }

    #[test]
    fn parity_is_within_tolerance() {
        let v = parse(parity_layers("fieldy", 64, 4, 2, 1, 10, 16, 804));
        for e in v.as_array().unwrap() {
            assert!(e["rel_diff"].as_f64().unwrap().abs() <= PARITY_TOLERANCE, "{e}");
        }
    }

    #[test]
    fn masking_grid_has_one_entry_per_cell() {
        let v = parse(masking_plan(10, 16, 3));
        let cells = v["cells"].as_array().unwrap();
        assert_eq!(cells.len(), 160);
        let marked = cells.iter().filter(|c| !c.is_null()).count();
        assert_eq!(marked as u64, v["selected"].as_u64().unwrap());
    }

    #[test]
    fn errors_are_reported_in_band() {
        assert!(parse(attention_pairs(0, 4, 1, 1))["error"].is_string());
        assert!(parse(parity_layers("transformer", 64, 4, 1, 1, 4, 4, 40))["error"].is_string());
        assert!(parse(masking_plan(0, 3, 1))["error"].is_string());
    }
}
