//! Run configuration: a TOML file with `[synth]`, `[model]`, `[train]` and
//! `[eval]` sections, overridden by command-line flags and written back to
//! every output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vidsal::{ModelConfig, SynthConfig, TrainConfig};

use crate::failure::Failure;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    /// Command line as invoked.
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// s-AUC splits per frame.
    pub splits: usize,
    pub seed: u64,
    /// Inference-time EMA α, replacing the model's own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: vidsal::metrics::DEFAULT_SPLITS,
            seed: 0,
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunInfo,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    /// Write the resolved configuration to `dir/config.toml`, keeping the
    /// `[run]` block and the named sections.
    pub fn write(&self, dir: &Path, command: &str, sections: &[&str]) -> Result<(), Failure> {
        let mut resolved = self.clone();
        resolved.run = RunInfo {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: std::env::args().skip(1).collect(),
        };
        let mut table = toml::Table::try_from(&resolved)
            .map_err(|e| Failure::data(format!("serializing config: {e}")))?;
        table.retain(|k, _| k == "run" || sections.contains(&k));
        let text = toml::to_string(&table)
            .map_err(|e| Failure::data(format!("serializing config: {e}")))?;
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))
    }
}
