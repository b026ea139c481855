use std::path::Path;

use serde::{Deserialize, Serialize};

use erasure_core::{DpoConfig, TrainConfig, World};

use crate::commands::{CliError, CliResult};

/// Everything needed to rerun one stage. Paths are relative to the run
/// directory so manifests compare equal across directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub method: Option<String>,
    pub preset: Option<String>,
    pub world: World,
    pub train: Option<TrainConfig>,
    pub dpo: Option<DpoConfig>,
    pub settings: serde_json::Map<String, serde_json::Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, world: &World) -> RunManifest {
        RunManifest {
            stage: stage.to_string(),
            version: erasure_core::VERSION.to_string(),
            seed,
            method: None,
            preset: None,
            world: world.clone(),
            train: None,
            dpo: None,
            settings: serde_json::Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("plain settings serialise");
        self.settings.insert(key.to_string(), v);
    }

    /// Writes `manifest_<name>.json` into `dir` and lists it among the outputs.
    pub fn write(mut self, dir: &Path, name: &str) -> CliResult<()> {
        let file = format!("manifest_{name}.json");
        self.outputs.push(file.clone());
        let mut text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::other(e.to_string()))?;
        text.push('\n');
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
