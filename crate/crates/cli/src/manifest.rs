use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

/// Written next to every output; its `config` field reproduces the run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config: Config,
    pub weights_sha256: Option<String>,
    pub artifacts: Vec<String>,
    pub notes: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created_unix_secs: Option<u64>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &Config, timestamps: bool) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config: config.clone(),
            weights_sha256: None,
            artifacts: Vec::new(),
            notes: BTreeMap::new(),
            created_unix_secs: timestamps.then(|| {
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            }),
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.json");
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::failed(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read weights {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
