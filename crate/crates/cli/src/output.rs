use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const RUN_FILE: &str = "run.json";
pub const TIMING_FILE: &str = "timing.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct Stamp<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: String,
    config: &'a RunConfig,
}

/// Echoes the resolved configuration and tool version into `dir`.
pub fn stamp(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let stamp = Stamp { tool: "tabform", version: env!("CARGO_PKG_VERSION"), command, config_hash: cfg.hash(), config: cfg };
    write_json(&dir.join(RUN_FILE), &stamp)
}

/// Wall-clock time lives apart from the deterministic outputs.
pub fn timing(dir: &Path, seconds: f64) -> Result<()> {
    write_json(&dir.join(TIMING_FILE), &serde_json::json!({ "runtime_s": seconds }))
}
