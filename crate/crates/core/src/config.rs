//! Training configuration, read from and written to TOML.
//!
//! ```toml
//! frames = 5
//! input_size = 544
//! batch_size = 4
//! epochs = 20
//! lr = 1e-4
//! seed = 0
//!
//! [adam]
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//!
//! [loss]
//! lambda_reg = 5.0
//! eta_mc = 1.0
//!
//! [ablation]
//! tda = true
//! mc_loss = true
//! fr = true
//! afs = true
//! agdf = true
//! ```
//!
//! Architecture widths live under `[model.backbone]`, `[model.tda]`,
//! `[model.refine]` and `[model.head]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::losses::LossWeights;
use crate::refine::{RefineConfig, RefineStages};
use crate::tda::TdaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Component switches. Alignment supervision only applies when alignment is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub tda: bool,
    pub mc_loss: bool,
    pub fr: bool,
    pub afs: bool,
    pub agdf: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self {
        tda: true,
        mc_loss: true,
        fr: true,
        afs: true,
        agdf: true,
    };

    /// Wide-convolution fusion without alignment or refinement.
    pub const BASELINE: Self = Self {
        tda: false,
        mc_loss: false,
        fr: false,
        afs: true,
        agdf: true,
    };

    pub fn stages(&self) -> RefineStages {
        RefineStages {
            fr: self.fr,
            afs: self.afs,
            agdf: self.agdf,
        }
    }

    pub fn uses_mc(&self) -> bool {
        self.tda && self.mc_loss
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tda: TdaConfig,
    pub refine: RefineConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Clip length `2R + 1`.
    pub frames: usize,
    /// Square network input side; frames are resized to it.
    pub input_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_iterations: Option<usize>,
    /// Constant learning rate.
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            input_size: 544,
            batch_size: 4,
            epochs: 20,
            max_iterations: None,
            lr: 1e-4,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn radius(&self) -> usize {
        self.frames / 2
    }

    /// Alignment-supervision weight after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            eta_mc: if self.ablation.uses_mc() { self.loss.eta_mc } else { 0.0 },
            ..self.loss
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames == 0 || self.frames % 2 == 0 {
            return bad(format!("frames must be odd (2R+1), got {}", self.frames));
        }
        let stride = self.model.backbone.stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!("input_size {} must be a positive multiple of {stride}", self.input_size));
        }
        let stages = self.ablation.stages();
        if !stages.is_baseline() && stages.agdf && (self.input_size / stride) % 2 != 0 {
            return bad(format!(
                "input_size {} gives an odd feature grid; the refinement blocks need it even",
                self.input_size
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam parameters {a:?}"));
        }
        if self.model.tda.channels != self.model.backbone.out_channels || self.model.refine.channels != self.model.backbone.out_channels {
            return bad("backbone, alignment and refinement channel counts must agree".into());
        }
        self.loss.validate()?;
        self.model.tda.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.ablation.afs = false;
        cfg.max_iterations = Some(7);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = TrainConfig::from_toml("input_size = 128\n[ablation]\ntda = false\n").unwrap();
        assert_eq!(cfg.input_size, 128);
        assert!(!cfg.ablation.tda && cfg.ablation.fr);
        assert_eq!(cfg.frames, 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_toml("frame = 5").is_err());
        assert!(TrainConfig::from_toml("frames = 4").is_err());
        assert!(TrainConfig::from_toml("input_size = 100").is_err());
        assert!(TrainConfig::from_toml("input_size = 136").is_err());
        assert!(TrainConfig::from_toml("input_size = 136\n[ablation]\nfr = false").is_ok());
        assert!(TrainConfig::from_toml("[loss]\neta_mc = -1.0").is_err());
    }

    #[test]
    fn mc_weight_follows_switches() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.effective_weights().eta_mc, 1.0);
        cfg.ablation.mc_loss = false;
        assert_eq!(cfg.effective_weights().eta_mc, 0.0);
        cfg.ablation = Ablation { tda: false, ..Ablation::FULL };
        assert_eq!(cfg.effective_weights().eta_mc, 0.0);
    }
}
