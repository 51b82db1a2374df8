//! Per-command record of everything needed to rerun it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kern_core::tensor::write_atomic;
use kern_core::Result;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector as invoked.
    pub args: Vec<String>,
    /// Resolved configuration with every default materialised.
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, (text + "\n").as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| kern_core::Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}
