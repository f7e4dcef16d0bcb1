//! Model, loss and training hyperparameters, loadable from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variant.
///
/// `A` uses leaky ReLU, standard convolutions and additive skip fusion; `B`
/// uses Padé activation units, modulated deformable convolutions and
/// pixel-adaptive skip fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            other => Err(Error::Config(format!("unknown variant '{other}' (expected A or B)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub input_size: usize,
    pub backbone_filters: [usize; 4],
    pub transformer_dim: usize,
    pub transformer_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ffnn_hidden: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub seg_decoder_blocks: usize,
    pub seg_heads: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Width of the skip-feature projection used as pixel-adaptive guidance.
    pub guidance_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::A,
            in_channels: 1,
            input_size: 128,
            backbone_filters: [64, 128, 256, 256],
            transformer_dim: 128,
            transformer_heads: 8,
            encoder_blocks: 3,
            decoder_blocks: 2,
            ffnn_hidden: 512,
            num_queries: 20,
            num_classes: 3,
            seg_decoder_blocks: 3,
            seg_heads: 8,
            dropout: 0.1,
            leaky_slope: 0.01,
            guidance_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Default::default()
        }
    }

    /// Side length of the token grid fed to the transformer.
    pub fn grid_size(&self) -> usize {
        self.input_size >> 4
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return fail("input_size must be a positive multiple of 16");
        }
        if self.transformer_heads == 0 || self.transformer_dim % self.transformer_heads != 0 {
            return fail("transformer_dim must be divisible by transformer_heads");
        }
        if self.seg_heads == 0 || self.transformer_dim % self.seg_heads != 0 {
            return fail("transformer_dim must be divisible by seg_heads");
        }
        if self.seg_decoder_blocks != 3 {
            return fail("seg_decoder_blocks must be 3 (one per skip connection)");
        }
        if self.num_classes < 2 || self.num_queries == 0 {
            return fail("need at least one query and two classes");
        }
        if self.backbone_filters.iter().any(|&f| f < 4 || f % 4 != 0) {
            return fail("backbone filters must be positive multiples of 4");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Loss weights and constants of the set-prediction objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub num_queries: usize,
    pub num_classes: usize,
    /// Class weights, index 0 is the no-object class.
    pub class_weights: Vec<f64>,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Floor applied to probabilities inside logarithms.
    pub prob_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            num_queries: 20,
            num_classes: 3,
            class_weights: vec![0.5, 0.5, 1.5],
            lambda_giou: 0.4,
            lambda_l1: 0.6,
            lambda_focal: 0.05,
            lambda_dice: 1.0,
            gamma: 2.0,
            epsilon: 1.0,
            prob_floor: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_giou,
            self.lambda_l1,
            self.lambda_focal,
            self.lambda_dice,
            self.gamma,
            self.epsilon,
        ];
        if weights.iter().chain(&self.class_weights).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.class_weights.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                self.num_classes
            )));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(Error::Config("prob_floor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub betas: (f64, f64),
    pub total_epochs: usize,
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub augment_probability: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weight_decay: 1e-6,
            lr_backbone: 1e-5,
            lr_rest: 1e-4,
            betas: (0.9, 0.999),
            total_epochs: 200,
            lr_drops: vec![50, 100],
            lr_drop_factor: 0.1,
            batch_size: 8,
            augment_probability: 0.6,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_drops must be strictly increasing".into()));
        }
        if self.lr_drops.last().is_some_and(|&d| d >= self.total_epochs) {
            return Err(Error::Config("lr_drops must precede total_epochs".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(Error::Config("augment_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| epoch >= d).count();
        self.lr_drop_factor.powi(drops as i32)
    }
}

/// Contents of a configuration file. Every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.num_queries != self.loss.num_queries || self.model.num_classes != self.loss.num_classes {
            return Err(Error::Config("model and loss disagree on queries/classes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_by_decades() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_factor(0), 1.0);
        assert_eq!(t.lr_factor(49), 1.0);
        assert!((t.lr_factor(50) - 0.1).abs() < 1e-15);
        assert!((t.lr_factor(99) - 0.1).abs() < 1e-15);
        assert!((t.lr_factor(100) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let partial = Config::from_toml_str("[model]\nvariant = \"B\"\n[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(partial.model.variant, Variant::B);
        assert_eq!(partial.train.batch_size, 4);
        assert_eq!(partial.loss, LossConfig::default());
        assert!(Config::from_toml_str("[train]\nlr_drops = [100, 50]\n").is_err());
        assert!(Config::from_toml_str("[model]\nbogus = 1\n").is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut m = ModelConfig::default();
        m.transformer_heads = 7;
        assert!(m.validate().is_err());
    }
}
