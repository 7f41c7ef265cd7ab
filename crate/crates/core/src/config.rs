//! Model and training configuration, loadable from a TOML file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults for query/link counts, block count,
/// head count, and the fusion downsample factor follow the reference setting;
/// embedding widths are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_object_queries: usize,
    pub num_link_queries: usize,
    pub num_vitd_blocks: usize,
    pub num_heads: usize,
    pub fusion_downsample: usize,
    pub embed_dim: usize,
    pub backbone_channels: [usize; 4],
    pub mask_dim: usize,
    /// FFN hidden width as a multiple of `embed_dim` (unstated upstream).
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_object_queries: 100,
            num_link_queries: 50,
            num_vitd_blocks: 10,
            num_heads: 8,
            fusion_downsample: 4,
            embed_dim: 64,
            backbone_channels: [32, 64, 128, 256],
            mask_dim: 64,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 4 (positional encoding)",
                self.embed_dim
            )));
        }
        for (name, v) in [
            ("num_object_queries", self.num_object_queries),
            ("num_link_queries", self.num_link_queries),
            ("num_vitd_blocks", self.num_vitd_blocks),
            ("num_heads", self.num_heads),
            ("fusion_downsample", self.fusion_downsample),
            ("embed_dim", self.embed_dim),
            ("mask_dim", self.mask_dim),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentFlags {
    pub flip: bool,
    pub rotation: bool,
    pub brightness_contrast: bool,
    pub random_scale: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags { flip: true, rotation: true, brightness_contrast: true, random_scale: true }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags { flip: false, rotation: false, brightness_contrast: false, random_scale: false }
    }
}

/// Weights of the composite objective. Classification/mask weights follow the
/// inherited defaults (2.0 / 5.0 / 5.0, no-object down-weight 0.1); the three
/// top-level terms default to 1.0 each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
    pub detection: f64,
    pub linker: f64,
    pub malignancy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
            detection: 1.0,
            linker: 1.0,
            malignancy: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub augment: AugmentFlags,
    pub loss_weights: LossWeights,
    pub max_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 5,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            augment: AugmentFlags::default(),
            loss_weights: LossWeights::default(),
            max_steps: 1000,
            seed: 0,
            eval_every: 200,
            checkpoint_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lw = &self.loss_weights;
        for (name, v) in [
            ("loss_weights.class", lw.class),
            ("loss_weights.bce", lw.bce),
            ("loss_weights.dice", lw.dice),
            ("loss_weights.no_object", lw.no_object),
            ("loss_weights.detection", lw.detection),
            ("loss_weights.linker", lw.linker),
            ("loss_weights.malignancy", lw.malignancy),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// On-disk configuration file: `[model]`, `[train]`, and `[phantom]` sections,
/// all optional with documented defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: crate::datagen::PhantomConfig,
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: FileConfig =
            toml::from_str(&text).map_err(|e| Error::Toml(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.phantom.validate()?;
        Ok(cfg)
    }
}
