use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::AugmentKind;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::fusion::FusionOptions;
use crate::head::{HeadConfig, LossWeights};

/// Which fusion stages are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "basic")]
    Basic,
    #[serde(rename = "basic+inter")]
    BasicInter,
    #[serde(rename = "basic+intra")]
    BasicIntra,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::BasicInter, Variant::BasicIntra, Variant::Full];

    pub fn inter(self) -> bool {
        matches!(self, Variant::BasicInter | Variant::Full)
    }

    pub fn intra(self) -> bool {
        matches!(self, Variant::BasicIntra | Variant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::BasicInter => "basic+inter",
            Variant::BasicIntra => "basic+intra",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Row label in ablation tables; defaults to the variant name.
    pub name: Option<String>,
    pub variant: Variant,
    pub use_video_classifier: bool,
    /// Applied to the shuffled stream only.
    pub augmentation: AugmentKind,
    /// Random horizontal flip and resized crop of whole training samples.
    pub sample_augmentation: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub loss: LossWeights,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub fusion: FusionOptions,
    pub eval_mode: EvalMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: None,
            variant: Variant::Full,
            use_video_classifier: true,
            augmentation: AugmentKind::RandomPepper,
            sample_augmentation: true,
            epochs: 50,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            warmup_steps: 0,
            grad_clip: 10.0,
            seed: 0,
            dataset: None,
            loss: LossWeights::default(),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            fusion: FusionOptions { gated: true, scaled: true, ..Default::default() },
            eval_mode: EvalMode::ClassAgnostic,
        }
    }
}

impl RunConfig {
    /// Reduced model for single-core runs: stem stride 4 (levels 12/6/3 on
    /// 96×96 input), channels 8/16/32, width 32, one encoder and one
    /// decoder layer, and a higher learning rate.
    pub fn desk() -> Self {
        RunConfig {
            epochs: 8,
            learning_rate: 1e-3,
            backbone: BackboneConfig { stem_channels: 8, stem_stride: 4, channels: [8, 16, 32], d: 32, ..Default::default() },
            head: HeadConfig { d: 32, heads: 4, encoder_layers: 1, decoder_layers: 1, ffn_dim: 64, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.variant.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.loss.validate()?;
        if self.backbone.d != self.head.d {
            return Err(Error::Config(format!(
                "backbone width {} differs from head width {}",
                self.backbone.d, self.head.d
            )));
        }
        if self.head.levels != 3 {
            return Err(Error::Config(format!("the pyramid has 3 levels, head expects {}", self.head.levels)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("gradient clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..6])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = RunConfig { variant: Variant::BasicIntra, seed: 9, ..RunConfig::desk() };
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_json(r#"{"epochs": 3, "learning_rat": 1e-3}"#).is_err());
        let partial = RunConfig::from_json(r#"{"variant": "basic+inter", "epochs": 3}"#).unwrap();
        assert_eq!(partial.variant, Variant::BasicInter);
        assert_eq!(partial.learning_rate, 2e-4);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn variant_flags() {
        assert!(!Variant::Basic.inter() && !Variant::Basic.intra());
        assert!(Variant::Full.inter() && Variant::Full.intra());
        assert_eq!("basic+intra".parse::<Variant>().unwrap(), Variant::BasicIntra);
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.head.d = 32;
        assert!(cfg.validate().is_err());
    }
}
