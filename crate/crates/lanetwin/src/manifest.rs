//! One `manifest.json` per output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Files written by the command, relative to the output directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub deterministic: bool,
    pub jobs: usize,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        io::read_json(&dir.join(MANIFEST_FILE))
    }
}
