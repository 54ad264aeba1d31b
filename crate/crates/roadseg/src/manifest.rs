//! Run manifest: everything needed to repeat a command, written before the command works.
//! Output locations are left out so that repeated runs into different directories produce
//! identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub role: String,
    pub path: PathBuf,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command-specific settings other than the output location.
    pub options: serde_json::Value,
    pub seed: Option<u64>,
    /// Resolved configuration after defaults and command-line overrides.
    pub config: Option<RunConfig>,
    pub data: Vec<DataSource>,
    pub resumed_from: Option<PathBuf>,
    /// Files the command produces, relative to its output directory.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            options: serde_json::Value::Null,
            seed: None,
            config: None,
            data: Vec::new(),
            resumed_from: None,
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> AppResult<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| AppError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }
}
