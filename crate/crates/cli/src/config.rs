//! Run-configuration plumbing.
//!
//! Every settable field has a single source of truth, resolved in strict
//! precedence order: command-line flag > config file > built-in default.
//! The fully resolved configuration is serialized (canonical JSON) into
//! every run's output directory so any run can be reproduced from its
//! artifacts alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use mcga_core::ganet::Stage2Config;
use mcga_core::io::canonical_json;
use mcga_core::msvqvae::Stage1Config;
use mcga_core::tta::TtaConfig;

use crate::CliError;

/// Shape of the generated synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 8,
            val: 2,
            channels: 16,
            height: 32,
            width: 32,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.train == 0 {
            return Err(CliError::Usage("data.train must be at least 1".into()));
        }
        if self.channels < 2 || self.height == 0 || self.width == 0 {
            return Err(CliError::Usage(format!(
                "data shape {}x{}x{} is not generatable (need >=2 channels and positive extents)",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A config file: canonical JSON with any subset of the sections below.
/// Omitted sections (and omitted fields within a section) fall back to the
/// built-in defaults. `command` and `args` are provenance written by previous
/// runs; they are accepted and ignored so a run's emitted `config.json` can
/// be fed straight back in via `--config`.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub command: Option<String>,
    pub args: Option<Value>,
    pub data: Option<DataConfig>,
    pub stage1: Option<Stage1Config>,
    pub stage2: Option<Stage2Config>,
    pub tta: Option<TtaConfig>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
}

/// Overwrite `slot` when a flag was given; flags sit at the top of the
/// precedence order.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// The resolved configuration of one run, written to `<out>/config.json`.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub args: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<Stage1Config>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2: Option<Stage2Config>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tta: Option<TtaConfig>,
}

impl RunConfig {
    pub fn new(command: &str, args: Value) -> Self {
        RunConfig {
            command: command.to_string(),
            args,
            data: None,
            stage1: None,
            stage2: None,
            tta: None,
        }
    }

    /// Serialize into `dir/config.json` (canonical key order).
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let json = canonical_json(self).map_err(CliError::from)?;
        fs::write(dir.join("config.json"), json + "\n")
            .map_err(|e| CliError::Runtime(format!("cannot write run config: {e}")))
    }
}
