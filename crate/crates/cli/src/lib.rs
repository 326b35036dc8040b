//! `tabform` command-line driver.

pub mod commands;
pub mod config;
mod output;
pub mod presets;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tabform::arch::Family;

pub use config::RunConfig;

/// Environment variable capping the number of parallel seed workers.
pub const THREADS_ENV: &str = "TABFORM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tabform", version, about = "Transformer layouts for tabular time-series")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration: a JSON file or `preset:<name>`.
    #[arg(long, global = true, value_name = "PATH|preset:NAME")]
    pub config: Option<String>,
    /// Single model seed (overrides the config's seed list).
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated model seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output root (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Continue interrupted training from `state.ckpt`.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Comma-separated families (overrides the config).
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_family)]
    pub family: Option<Vec<Family>>,
    /// Raw CSV path (overrides `dataset.path`).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the prepared dataset under `<out>/data`.
    Prepare,
    /// Masked-token pretraining, one run per family and seed.
    Pretrain,
    /// Fine-tune with a task head and score the test split.
    Finetune {
        /// Pretrained checkpoint file, or a directory holding
        /// `<family>/seed-<s>/best.ckpt` (or `seed-<s>/best.ckpt`).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Score fine-tuned checkpoints on a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoints to score; defaults to the fine-tuning outputs.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Hour-column prediction probe on masked-LM checkpoints.
    Probe {
        /// Checkpoints to probe; defaults to the pretraining outputs.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Attention-pair counts and forward timing per family and grid.
    Bench {
        /// Grid as `ROWSxCOLS`; repeatable.
        #[arg(long = "grid", value_parser = parse_grid)]
        grids: Vec<[usize; 2]>,
    },
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    Family::parse(s).map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 2], String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid {s:?} is not ROWSxCOLS"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("grid {s:?}: {e}"));
    let g = [num(r)?, num(c)?];
    if g[0] == 0 || g[1] == 0 {
        return Err(format!("grid {s:?} needs positive sizes"));
    }
    Ok(g)
}

impl GlobalArgs {
    /// Loads, overrides and resolves the run configuration.
    pub fn run_config(&self) -> Result<RunConfig> {
        let spec = self.config.as_deref().context("--config <path|preset:name> is required")?;
        let mut cfg = RunConfig::load(spec)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(f) = &self.family {
            cfg.families = f.clone();
        }
        if let Some(p) = &self.data {
            cfg.dataset.path = Some(p.clone());
        }
        cfg.resolve()
    }
}

/// Number of parallel workers from `TABFORM_THREADS` (default 1).
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("{THREADS_ENV}={v:?} is not a positive integer"),
        },
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.global.run_config()?;
    let resume = cli.global.resume;
    match &cli.command {
        Command::Prepare => commands::prepare(&cfg).map(drop),
        Command::Pretrain => commands::pretrain(&cfg, resume).map(drop),
        Command::Finetune { from } => commands::finetune(&cfg, from.as_deref(), resume).map(drop),
        Command::Evaluate { split, checkpoints } => commands::evaluate(&cfg, split, checkpoints).map(drop),
        Command::Probe { checkpoints } => commands::probe(&cfg, checkpoints).map(drop),
        Command::Bench { grids } => {
            let families = cli.global.family.clone().unwrap_or_else(|| Family::ALL.to_vec());
            commands::bench(&cfg, &families, grids).map(drop)
        }
    }
}
