use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::SplitBy;
use super::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::interlink::InterlinkConfig;
use crate::mbsm::MbsmConfig;
use crate::nn::AdamConfig;
use crate::preprocess::PreprocessConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Score-weighted pair fusion followed by self-attention fusion.
    Mlf,
    /// Plain concatenation and a linear projection.
    Cf,
}

/// Which modules a model instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub interlink: bool,
    pub encoder: bool,
    pub eye: bool,
    pub fusion: FusionKind,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { interlink: true, encoder: false, eye: true, fusion: FusionKind::Mlf }
    }
}

pub const PRESETS: [&str; 6] =
    ["STB+CF", "STIB+CF", "STIB+Encoder+CF", "STIB+Encoder+MLF", "STIB+Eye+CF", "STIB+Eye+MLF"];

impl Ablation {
    /// Parses one of the six named arms.
    pub fn preset(name: &str) -> Result<Self> {
        let flags = |interlink, encoder, eye, fusion| Self { interlink, encoder, eye, fusion };
        Ok(match name {
            "STB+CF" => flags(false, false, false, FusionKind::Cf),
            "STIB+CF" => flags(true, false, false, FusionKind::Cf),
            "STIB+Encoder+CF" => flags(true, true, false, FusionKind::Cf),
            "STIB+Encoder+MLF" => flags(true, true, false, FusionKind::Mlf),
            "STIB+Eye+CF" => flags(true, false, true, FusionKind::Cf),
            "STIB+Eye+MLF" => flags(true, false, true, FusionKind::Mlf),
            _ => return Err(Error::Config(format!("unknown ablation arm `{name}`; expected one of {PRESETS:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion == FusionKind::Mlf && !self.encoder && !self.eye {
            return Err(Error::Config("multi-level fusion needs the encoder or the eye stream".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.interlink { "STIB" } else { "STB" })?;
        if self.encoder {
            f.write_str("+Encoder")?;
        }
        if self.eye {
            f.write_str("+Eye")?;
        }
        f.write_str(match self.fusion {
            FusionKind::Mlf => "+MLF",
            FusionKind::Cf => "+CF",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Named arm; overrides `ablation` when set.
    pub preset: Option<String>,
    pub ablation: Ablation,
    pub interlink: InterlinkConfig,
    pub fusion: FusionConfig,
    pub encoder_checkpoint: Option<PathBuf>,
    pub fine_tune_encoder: bool,
}

impl ModelConfig {
    pub fn resolved_ablation(&self) -> Result<Ablation> {
        let a = match &self.preset {
            Some(p) => Ablation::preset(p)?,
            None => self.ablation,
        };
        a.validate()?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub cosine_decay: bool,
    pub split_ratio: f64,
    pub split_by: SplitBy,
    /// Seeded repetitions used for the accuracy standard deviation.
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            cosine_decay: false,
            split_ratio: 0.8,
            split_by: SplitBy::Subject,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest of recorded trials; the synthetic corpus is used when absent.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mbsm: MbsmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mbsm: MbsmConfig { d_model: 32, encoder_depth: 2, decoder_depth: 1, ..MbsmConfig::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolved_ablation()?;
        self.mbsm.validate()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalisation".into()));
        }
        if !(self.train.split_ratio > 0.0 && self.train.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.train.split_ratio)));
        }
        if self.model.fusion.d_unified < 2 {
            return Err(Error::Config("unified dimension must be at least 2".into()));
        }
        Ok(())
    }
}
