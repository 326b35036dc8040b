//! Built-in run configurations, selected with `--config preset:<name>`.
//!
//! The `*-ref` presets carry the reference hyper-parameters and layer
//! counts; at full width they are far beyond a desktop CPU. The `tiny-*`
//! presets are what the test suites run.

use std::collections::BTreeMap;

use anyhow::{bail, Result};

use tabform::arch::{Family, HeadKind, ModelConfig, TabbiePooling};
use tabform::dataprep::{SyntheticConfig, SyntheticTask};
use tabform::tensor::AdamWConfig;
use tabform::train::{MaskingConfig, TrainConfig};

use crate::config::{BenchConfig, DatasetConfig, ProbeConfig, Recipe, RunConfig};

pub const NAMES: [&str; 6] = ["tiny-probe", "tiny-regression", "tiny-classification", "pollution-ref", "pollution-ref-ft10", "loan-ref"];

fn train(epochs: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
        masking: MaskingConfig::default(),
        freeze_stage1: false,
    }
}

fn model(family: Family, d_model: usize, heads: usize, layers1: usize, layers2: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        family,
        d_model,
        heads,
        layers1,
        layers2,
        ffn_dim: None,
        use_row_pos_emb: true,
        use_col_index_emb: true,
        dropout,
        vocab_size: 0,
        rows: 0,
        cols: 0,
        head: HeadKind::MaskedLm,
        tabbie_pooling: TabbiePooling::ClsGrid,
        split_field_embeddings: false,
    }
}

fn tiny(name: &str, task: SyntheticTask, synthetic: SyntheticConfig, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        name: name.into(),
        dataset: DatasetConfig {
            recipe: Recipe::Synthetic(task),
            path: None,
            schema: None,
            synthetic: Some(synthetic),
            prep: None,
            seed: 0,
        },
        model: model(Family::Fieldy, 64, 4, 2, 1, 0.0),
        families: vec![Family::Fieldy, Family::TabbertRow],
        layers: BTreeMap::new(),
        parity: false,
        pretrain: train(10, 16, 1e-3),
        finetune: train(20, 16, 1e-3),
        seeds,
        out: None,
        probe: ProbeConfig::default(),
        bench: BenchConfig::default(),
    }
}

/// Layer counts per family, stage-1 heavy variant of the hierarchical models.
fn reference_layers(pollution: bool) -> BTreeMap<Family, [usize; 2]> {
    let rows: [(Family, [usize; 2], [usize; 2]); 5] = [
        (Family::FtFlat, [14, 0], [8, 0]),
        (Family::Tabbie, [4, 0], [4, 0]),
        (Family::TabbertCol, [6, 10], [6, 6]),
        (Family::TabbertRow, [6, 10], [6, 6]),
        (Family::Fieldy, [8, 4], [5, 4]),
    ];
    rows.into_iter().map(|(f, p, l)| (f, if pollution { p } else { l })).collect()
}

fn reference(name: &str, recipe: Recipe, pollution: bool, finetune_epochs: usize) -> RunConfig {
    let (pre_epochs, batch, dropout, d) = if pollution { (24, 64, 0.1, 800) } else { (60, 100, 0.3, 500) };
    RunConfig {
        name: name.into(),
        dataset: DatasetConfig { recipe, path: None, schema: None, synthetic: None, prep: None, seed: 0 },
        model: model(Family::Fieldy, d, 10, 1, 1, dropout),
        families: Family::ALL.to_vec(),
        layers: reference_layers(pollution),
        parity: false,
        pretrain: train(pre_epochs, batch, 5e-5),
        finetune: train(finetune_epochs, batch, 5e-5),
        seeds: vec![1, 2, 3, 4, 5],
        out: None,
        probe: ProbeConfig::default(),
        bench: BenchConfig::default(),
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "tiny-probe" => {
            let mut syn = SyntheticConfig::new(SyntheticTask::HourProbe);
            syn.n_entities = 2000;
            syn.n_categorical = 1;
            syn.n_numerical = 1;
            let mut cfg = tiny(name, SyntheticTask::HourProbe, syn, vec![1, 2, 3]);
            cfg.model.dropout = 0.1;
            cfg.pretrain = train(60, 16, 3e-3);
            cfg
        }
        "tiny-regression" => {
            let mut syn = SyntheticConfig::new(SyntheticTask::CrossFieldRegression);
            syn.n_entities = 600;
            tiny(name, SyntheticTask::CrossFieldRegression, syn, vec![1, 2, 3, 4, 5])
        }
        "tiny-classification" => {
            let mut syn = SyntheticConfig::new(SyntheticTask::DefaultClassification);
            syn.n_entities = 600;
            tiny(name, SyntheticTask::DefaultClassification, syn, vec![1, 2, 3])
        }
        "pollution-ref" => reference(name, Recipe::Pollution, true, 20),
        "pollution-ref-ft10" => reference(name, Recipe::Pollution, true, 10),
        "loan-ref" => reference(name, Recipe::Loan, false, 20),
        _ => bail!("unknown preset {name:?}; available: {}", NAMES.join(", ")),
    })
}
