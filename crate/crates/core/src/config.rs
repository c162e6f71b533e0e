//! TOML run configuration.
//!
//! One root `seed` feeds every random stream. Subsystem seeds are
//! the low 63 bits of `derive_seed(seed, label, 0)` with labels `corpus`,
//! `model`, `train` and `synth` (TOML integers are signed); [`RunConfig::resolve`] fills them in, so the effective config
//! written next to outputs shows the values actually used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::inference::GuidanceConfig;
use crate::seed::derive_seed;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub downsample: u32,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            downsample: 320,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub min_seg_len: usize,
    pub gap_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_seg_len: 30,
            gap_ms: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Model init seed after resolution.
    pub model_seed: u64,
    pub double_precision: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            model_seed: 0,
            double_precision: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub audio: AudioConfig,
    pub synth: SynthConfig,
    pub run: RunOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            audio: AudioConfig::default(),
            synth: SynthConfig::default(),
            run: RunOptions::default(),
        }
    }
}

pub fn sub_seed(root: u64, label: &str) -> u64 {
    derive_seed(root, label, 0) & i64::MAX as u64
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Derives subsystem seeds from `seed` and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::InvalidConfig(format!("seed {} exceeds 2^63 - 1", self.seed)));
        }
        self.corpus.seed = sub_seed(self.seed, "corpus");
        self.run.model_seed = sub_seed(self.seed, "model");
        self.train.seed = sub_seed(self.seed, "train");
        self.guidance.seed = sub_seed(self.seed, "synth");
        self.model.validate()?;
        self.guidance.validate()?;
        crate::vocab::derive_frame_rate(self.audio.sample_rate, self.audio.downsample)?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Writes `effective_config.toml` into `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("effective_config.toml"), self.to_toml()?)?;
        Ok(())
    }
}
