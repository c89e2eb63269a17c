//! Experiment configuration files: one JSON document describing the corpus,
//! the model (a named preset or explicit layers), the training recipe, and
//! the input/output paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convgeom::{validate, LayerSpec, ModelSpec};
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::presets::{acoustic_spec, toy_spec};
use crate::trainer::TrainConfig;

/// Model selection: either a named preset sized from the corpus section, or
/// an explicit layer stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub freq_pool: bool,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

fn default_width() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus_file: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every section and resolves the model to prove the whole
    /// document is usable before anything runs.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        let spec = self.model_spec(&self.corpus)?;
        validate(&spec)?;
        Ok(())
    }

    /// The architecture this config describes, sized to a corpus.
    pub fn model_spec(&self, corpus: &CorpusConfig) -> Result<ModelSpec> {
        match (&self.model.preset, &self.model.layers) {
            (Some(_), Some(_)) => Err(Error::Config(
                "model cannot set both a preset and explicit layers".into(),
            )),
            (None, None) => Err(Error::Config(
                "model needs a preset or explicit layers".into(),
            )),
            (Some(name), None) => {
                if self.model.width == 0 {
                    return Err(Error::Config("model width must be >= 1".into()));
                }
                match name.as_str() {
                    "toy" => Ok(toy_spec(
                        corpus.mel_bins,
                        corpus.num_states,
                        self.model.width,
                    )),
                    "acoustic" => Ok(acoustic_spec(
                        corpus.mel_bins,
                        corpus.num_states,
                        self.model.width,
                        self.model.freq_pool,
                    )),
                    other => Err(Error::Config(format!(
                        "unknown preset {other:?}; expected \"toy\" or \"acoustic\""
                    ))),
                }
            }
            (None, Some(layers)) => Ok(ModelSpec {
                input_channels: 3,
                mel_bins: corpus.mel_bins,
                num_targets: corpus.num_states,
                layers: layers.clone(),
            }),
        }
    }
}
