//! The JSON model configuration file.
//!
//! ```json
//! {
//!   "text_encoder": {"vocab_size": 30522, "max_len": 128, "layers": 2, "heads": 2, "dim": 128},
//!   "image_encoder": {"kind": "xcit_nano", "input_size": 128},
//!   "fusion": {"dim": 512, "activation": "tanh"},
//!   "head": {"hidden": 512, "answers": 1000, "dropout": 0.25},
//!   "train": {"base_lr": 0.0005, "warmup_steps": 100, "total_steps": 1000, "batch_size": 16}
//! }
//! ```
//!
//! Unknown keys are rejected and every dimension is checked before any
//! tensor is allocated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionActivation, FusionConfig};
use crate::image::{ImageArch, ImageEncoderConfig, ImageEncoderKind};
use crate::text::TextEncoderConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    /// Common fusion dimension `d_f`.
    pub dim: usize,
    #[serde(default)]
    pub activation: FusionActivation,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            dim: 512,
            activation: FusionActivation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub hidden: usize,
    /// Number of answer classes `n_A`.
    pub answers: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.25
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            hidden: 512,
            answers: 1000,
            dropout: default_dropout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub text_encoder: TextEncoderConfig,
    pub image_encoder: ImageEncoderConfig,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub head: HeadSection,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A validated configuration with the image encoder shape resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub text: TextEncoderConfig,
    pub image: ImageArch,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    /// Default full-size configuration for an image encoder kind.
    pub fn default_for(kind: ImageEncoderKind) -> Self {
        Self {
            text_encoder: TextEncoderConfig::default(),
            image_encoder: ImageEncoderConfig::new(kind),
            fusion: FusionSection::default(),
            head: HeadSection::default(),
            train: TrainConfig::default(),
        }
    }

    /// Parses JSON; syntax and type errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        self.text_encoder.validate("text_encoder")?;
        let image = self.image_encoder.resolve("image_encoder")?;
        let fusion = FusionConfig {
            d_t: self.text_encoder.output_dim(),
            d_v: image.output_dim(),
            d_f: self.fusion.dim,
            n_answers: self.head.answers,
            head_hidden: self.head.hidden,
            dropout_p: self.head.dropout,
            activation: self.fusion.activation,
        };
        fusion.validate()?;
        self.train.validate("train")?;
        Ok(ResolvedConfig {
            text: self.text_encoder,
            image,
            fusion,
            train: self.train.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ModelConfig::default_for(ImageEncoderKind::XcitNano).to_json()).unwrap();
        v["fusion"]["colour"] = serde_json::json!(3);
        let err = ModelConfig::parse(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ModelConfig::default_for(ImageEncoderKind::MobilevitS);
        assert_eq!(ModelConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn heads_mismatch_names_field() {
        let mut cfg = ModelConfig::default_for(ImageEncoderKind::XcitNano);
        cfg.image_encoder.heads = Some(5);
        let err = cfg.resolve().unwrap_err().to_string();
        assert!(err.contains("image_encoder.heads"), "{err}");
    }
}
