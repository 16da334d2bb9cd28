use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coopdrive_core::hash::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written beside every artifact a command produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    /// sha256 of every input file, by path.
    pub input_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    /// Output files, relative to the manifest's directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_paths: config.map(Path::to_path_buf).into_iter().collect(),
            input_hashes: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs: Vec::new(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> CliResult<String> {
        let hash = sha256_hex(&std::fs::read(path)?);
        self.input_hashes.insert(path.display().to_string(), hash.clone());
        Ok(hash)
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| crate::CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes)?;
        Ok(path)
    }
}
