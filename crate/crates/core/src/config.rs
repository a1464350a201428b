//! Plain-text (TOML) run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::train::TrainConfig;

pub const DEFAULT_LAMBDA: f64 = 0.001;
pub const DEFAULT_W_CLS: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideKind {
    #[default]
    None,
    Continuous,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideConfig {
    #[serde(default)]
    pub kind: SideKind,
    /// Number of classes for categorical labels.
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Weight of the discriminator losses.
    #[serde(default = "default_w_cls")]
    pub w_cls: f64,
    /// Hidden width of each discriminator's two dense layers.
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
}

fn default_classes() -> usize {
    2
}

fn default_w_cls() -> f64 {
    DEFAULT_W_CLS
}

fn default_disc_hidden() -> usize {
    64
}

impl Default for SideConfig {
    fn default() -> Self {
        SideConfig {
            kind: SideKind::None,
            classes: default_classes(),
            w_cls: DEFAULT_W_CLS,
            disc_hidden: default_disc_hidden(),
        }
    }
}

impl SideConfig {
    pub fn continuous() -> Self {
        SideConfig {
            kind: SideKind::Continuous,
            ..Default::default()
        }
    }

    pub fn categorical(classes: usize) -> Self {
        SideConfig {
            kind: SideKind::Categorical,
            classes,
            ..Default::default()
        }
    }

    /// Width of the label vector: 0 without side information.
    pub fn width(&self) -> usize {
        match self.kind {
            SideKind::None => 0,
            SideKind::Continuous => 1,
            SideKind::Categorical => self.classes,
        }
    }

    pub fn enabled(&self) -> bool {
        self.kind != SideKind::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Architecture shared by both flows.
    pub flow: FlowConfig,
    /// Kernel size of the one-layer relation networks.
    #[serde(default = "default_relation_kernel")]
    pub relation_kernel: usize,
    /// Weight of the source-side marginal likelihood regularizer.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub side: SideConfig,
}

fn default_relation_kernel() -> usize {
    3
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl ModelConfig {
    pub fn new(flow: FlowConfig) -> Self {
        ModelConfig {
            flow,
            relation_kernel: default_relation_kernel(),
            lambda: DEFAULT_LAMBDA,
            side: SideConfig::default(),
        }
    }

    /// Desk-scale default: 1×16×16 images, 3 levels of 4 steps.
    pub fn desk_default() -> Self {
        Self::new(FlowConfig::new([1, 16, 16], 3, 4))
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if !(self.side.w_cls >= 0.0) || !self.side.w_cls.is_finite() {
            return Err(Error::config(format!("w_cls must be finite and ≥ 0, got {}", self.side.w_cls)));
        }
        if self.relation_kernel.is_multiple_of(2) {
            return Err(Error::config("relation kernel must be odd"));
        }
        if self.side.kind == SideKind::Categorical && self.side.classes < 2 {
            return Err(Error::config("categorical side labels need at least 2 classes"));
        }
        if self.side.enabled() && self.side.disc_hidden == 0 {
            return Err(Error::config("discriminator width must be positive"));
        }
        Ok(())
    }
}

/// A complete run description as stored in `--config` files and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(cfg.model.lambda, 0.001);
        assert_eq!(cfg.model.side.w_cls, 0.01);
    }

    #[test]
    fn minimal_file() {
        let cfg = RunConfig::parse(
            "seed = 7\n[model.flow]\ninput = [1, 8, 8]\nlevels = 2\ndepth = 2\nhidden = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.model.flow.inv1x1);
        assert_eq!(cfg.model.side.kind, SideKind::None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[model.flow]\ninput = [1, 8, 8]\nlevels = 2\ndepth = 2\nhidden = 8\nbogus = 1\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.flow.input = [1, 10, 10];
        assert!(cfg.validate().is_err());
    }
}
