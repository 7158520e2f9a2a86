//! Experiment configuration file.
//!
//! A run is described by one TOML document whose tables mirror the config
//! structs of each stage:
//!
//! ```toml
//! seed = 0
//! workers = 1
//!
//! [synth]        # SynthSpec
//! n_videos_per_class = 50
//!
//! [predictor]    # PredictorTrainConfig
//! epochs = 20
//!
//! [train]        # TrainConfig, including the detector fields
//! batch_size = 64
//! variant = "CA_FUSION"
//!
//! [degrade]      # DegradeTemplate
//! operations = ["BIT_ERROR", "H265_ABR", "H265_CRF"]
//!
//! [embedder]     # EmbedderSpec
//! kind = "random_patch"
//! dim = 128
//! seed = 0
//!
//! [transcoder]   # TranscoderConfig
//! fps = 24
//! ```
//!
//! Every field is optional. Command-line flags override the matching fields
//! after the file is read, and the effective configuration is written next
//! to the outputs as `config.toml`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::DegradeTemplate;
use crate::detector::EmbedderSpec;
use crate::error::{Error, Result};
use crate::local_branch::PredictorTrainConfig;
use crate::synthetic::SynthSpec;
use crate::training::TrainConfig;
use crate::transcoder::TranscoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every stage that takes one.
    pub seed: u64,
    pub workers: usize,
    pub synth: SynthSpec,
    pub predictor: PredictorTrainConfig,
    pub train: TrainConfig,
    pub degrade: DegradeTemplate,
    pub embedder: EmbedderSpec,
    pub transcoder: TranscoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            synth: SynthSpec::default(),
            predictor: PredictorTrainConfig::default(),
            train: TrainConfig::default(),
            degrade: DegradeTemplate::default(),
            embedder: EmbedderSpec::default(),
            transcoder: TranscoderConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub stride: Option<usize>,
    pub clip_length: Option<usize>,
    pub videos_per_class: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Read `path` if given, otherwise start from defaults, then apply flags.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(s) = o.stride {
            self.train.stride = s;
        }
        if let Some(l) = o.clip_length {
            self.train.clip_length = l;
        }
        if let Some(n) = o.videos_per_class {
            self.synth.n_videos_per_class = n;
        }
        self.synth.seed = self.seed;
        self.predictor.seed = self.seed;
        self.train.seed = self.seed;
        self.degrade.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.train.validate()?;
        if let EmbedderSpec::RandomPatch { dim, .. } = self.embedder {
            if dim != self.train.model.embed_dim {
                return Err(Error::Config(format!(
                    "embedder dim {dim} differs from the detector embed_dim {}",
                    self.train.model.embed_dim
                )));
            }
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Write the effective configuration to `<dir>/config.toml`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        std::fs::write(dir.as_ref().join("config.toml"), self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::parse("seed = 3\n[train]\nbatch_size = 32\nvariant = \"CONCAT\"\n").unwrap();
        cfg.apply(&Overrides {
            stride: Some(2),
            ..Default::default()
        });
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.stride, 2);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn embedder_width_must_match_detector() {
        let cfg = RunConfig::parse("[train]\nembed_dim = 16\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig::parse("[train]\nembed_dim = 16\n[embedder]\nkind = \"random_patch\"\ndim = 16\n").unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sed = 1"), Err(Error::Config(_))));
    }
}
