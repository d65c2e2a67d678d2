//! One declarative run configuration covering every stage, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::MelConfig;
use crate::captioning::CaptionConfig;
use crate::contrastive::{ClapConfig, ClapTrainConfig};
use crate::corpus::CorpusConfig;
use crate::encoders::{AudioEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::zeroshot::SuiteConfig;

/// Where the contrastive text encoder starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextInit {
    #[default]
    Random,
    /// The caption decoder trained during multitask pretraining.
    PretrainedDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for parameter initialization and clip cropping.
    pub seed: u64,
    pub vocab_size: usize,
    pub text_init: TextInit,
    pub mel: MelConfig,
    pub corpus: CorpusConfig,
    pub audio_encoder: AudioEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub clap: ClapConfig,
    pub train: ClapTrainConfig,
    pub pretrain: PretrainConfig,
    pub caption: CaptionConfig,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Laptop-sized defaults.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            vocab_size: 256,
            text_init: TextInit::Random,
            mel: MelConfig::default(),
            corpus: CorpusConfig::default(),
            audio_encoder: AudioEncoderConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            clap: ClapConfig::default(),
            train: ClapTrainConfig::default(),
            pretrain: PretrainConfig::default(),
            caption: CaptionConfig::default(),
            suite: SuiteConfig::default(),
        }
    }

    /// Published training hyperparameters: 1536-pair batches, 1024-dim joint space,
    /// 40 epochs, plateau factor 0.1 with patience 15.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.clap.embed_dim = 1024;
        cfg.train.batch_size = 1536;
        cfg.train.epochs = 40;
        cfg.train.learning_rate = 1e-3;
        cfg.train.plateau_factor = 0.1;
        cfg.train.plateau_patience = 15;
        cfg
    }

    /// The smaller model used by the end-to-end checks, sized for a single core.
    pub fn reference() -> Self {
        let mut cfg = Self::desk();
        cfg.audio_encoder.width = 64;
        cfg.audio_encoder.depth = 2;
        cfg.text_encoder.width = 64;
        cfg.text_encoder.depth = 2;
        cfg.text_encoder.max_text_len = 16;
        cfg.caption.max_decode_len = 16;
        cfg.pretrain.mapper.hidden = 128;
        cfg.caption.mapper.hidden = 128;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "reference" => Ok(Self::reference()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk, paper or reference)"
            ))),
        }
    }

    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.corpus.validate()?;
        self.audio_encoder.validate(self.mel.n_mels)?;
        self.text_encoder.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.caption.validate()?;
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must leave room for words beyond the 3 reserved tokens".into()));
        }
        let frames = self.mel.frame_count(self.mel.clip_samples()).ok_or_else(|| {
            Error::Config("mel.clip_seconds is shorter than one analysis window".into())
        })?;
        if frames < self.audio_encoder.patch_time {
            return Err(Error::Config(format!(
                "a clip has {frames} frames, fewer than audio_encoder.patch_time {}",
                self.audio_encoder.patch_time
            )));
        }
        let (pf, pt) = self.audio_encoder.patch_grid(self.mel.n_mels, frames);
        if pf * pt > self.audio_encoder.max_patches {
            return Err(Error::Config(format!(
                "a clip yields {} patches but audio_encoder.max_patches is {}",
                pf * pt,
                self.audio_encoder.max_patches
            )));
        }
        if self.clap.embed_dim == 0 || !(self.clap.temperature > 0.0) {
            return Err(Error::Config("clap.embed_dim and clap.temperature must be positive".into()));
        }
        let max_prefix = self.text_encoder.max_prefix;
        for (name, p) in [
            ("pretrain", self.pretrain.mapper.prefix_tokens),
            ("caption", self.caption.mapper.prefix_tokens),
        ] {
            if p > max_prefix {
                return Err(Error::Config(format!(
                    "{name}.mapper.prefix_tokens {p} exceeds text_encoder.max_prefix {max_prefix}"
                )));
            }
        }
        let classes = self.corpus.classes.len();
        if self.suite.binary_classes.iter().any(|&c| c >= classes)
            || self.suite.binary_classes[0] == self.suite.binary_classes[1]
        {
            return Err(Error::Config(format!(
                "suite.binary_classes must be two distinct indices below {classes}"
            )));
        }
        if self.suite.retrieval_pool < 2 || self.suite.batch_size == 0 {
            return Err(Error::Config("suite.retrieval_pool must be >= 2 and suite.batch_size > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "paper", "reference"] {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn paper_preset_matches_published_settings() {
        let p = RunConfig::paper();
        assert_eq!(p.train.batch_size, 1536);
        assert_eq!(p.clap.embed_dim, 1024);
        assert_eq!(p.train.learning_rate, 1e-3);
        assert_eq!(p.clap.temperature, 0.007);
        let d = RunConfig::desk();
        assert_eq!(d.train.batch_size, 32);
        assert_eq!(d.clap.embed_dim, 64);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::reference();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.digest().unwrap(), RunConfig::from_toml(&text).unwrap().digest().unwrap());
        assert_ne!(cfg.digest().unwrap(), RunConfig::desk().digest().unwrap());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 3\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[mel]\nn_mel = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[train]\nbatch_size = 1\n",
            "[mel]\nfmax_hz = 30000.0\n",
            "[audio_encoder]\nwidth = 30\nheads = 4\n",
            "[audio_encoder]\npatch_freq = 5\n",
            "[audio_encoder]\nmax_patches = 4\n",
            "[suite]\nbinary_classes = [0, 9]\n",
            "[caption.mapper]\nprefix_tokens = 40\n",
            "vocab_size = 2\n",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
