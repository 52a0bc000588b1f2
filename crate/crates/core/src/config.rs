//! Run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::train::TrainConfig;

/// Every field is optional in the JSON file; missing ones take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Use one seed for model initialization, training and data synthesis.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_and_typos() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"steps": 5}, "model": {"base_channels": 8}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.model.base_channels, 8);
        assert_eq!(c.model.unet_levels, ModelConfig::default().unet_levels);

        std::fs::write(&p, r#"{"trian": {}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::InvalidConfig(_))));
    }
}
