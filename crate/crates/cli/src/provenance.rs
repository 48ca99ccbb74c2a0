use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Machine-readable record of what produced a command's outputs. It holds
/// no timestamps, so identical invocations write identical files.
#[derive(Debug, Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub argv: &'a [String],
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub parameters: Value,
}

impl Provenance<'_> {
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(PROVENANCE_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn record<'a>(
    command: &'a str,
    argv: &'a [String],
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    parameters: Value,
) -> Provenance<'a> {
    Provenance {
        tool: "lvtq",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv,
        seed,
        inputs,
        parameters,
    }
}
