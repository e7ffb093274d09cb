use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
    Tiny,
}

/// How stage outputs are merged inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each stage ends in an aggregation node that concatenates the stage
    /// input with every residual block output and fuses them with a 1×1
    /// convolution.
    Hierarchical,
}

/// Encoder-decoder topology. Everything that determines the shape of a
/// `backbone.*` parameter lives here; head settings do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub scale: Scale,
    pub stem_width: usize,
    /// Channel widths of the four encoder stages (strides 2, 4, 8, 16).
    pub stage_widths: Vec<usize>,
    /// Residual blocks per stage.
    pub stage_blocks: Vec<usize>,
    pub aggregation: Aggregation,
    /// Nominal patch size in pixels.
    pub input_size: u32,
    /// Stride of the finest decoder map (1 or 2).
    pub output_stride: u32,
    /// Batch normalization after every backbone convolution; off means
    /// plain biased convolutions.
    #[serde(default)]
    pub batch_norm: bool,
}

impl BackboneConfig {
    pub fn full() -> Self {
        BackboneConfig {
            scale: Scale::Full,
            stem_width: 32,
            stage_widths: vec![64, 128, 256, 512],
            stage_blocks: vec![1, 2, 2, 1],
            aggregation: Aggregation::Hierarchical,
            input_size: 512,
            output_stride: 2,
            batch_norm: true,
        }
    }

    pub fn desk() -> Self {
        BackboneConfig {
            scale: Scale::Desk,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            stage_blocks: vec![1, 1, 1, 1],
            aggregation: Aggregation::Hierarchical,
            input_size: 512,
            output_stride: 2,
            batch_norm: true,
        }
    }

    /// Smallest useful model; used in tests and quick pipeline runs.
    pub fn tiny() -> Self {
        BackboneConfig {
            scale: Scale::Tiny,
            stem_width: 4,
            stage_widths: vec![4, 8, 16, 32],
            stage_blocks: vec![1, 1, 1, 1],
            aggregation: Aggregation::Hierarchical,
            input_size: 512,
            output_stride: 2,
            batch_norm: true,
        }
    }

    pub fn with_input_size(mut self, input_size: u32) -> Self {
        self.input_size = input_size;
        self
    }

    /// Total encoder down-sampling factor (the class-grid cell size).
    pub fn down_factor(&self) -> u32 {
        1 << self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != 4 || self.stage_blocks.len() != 4 {
            return Err(Error::Config("backbone needs exactly four encoder stages".into()));
        }
        if self.stem_width == 0 || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !matches!(self.output_stride, 1 | 2) {
            return Err(Error::Config(format!(
                "output_stride must be 1 or 2, got {}",
                self.output_stride
            )));
        }
        if self.input_size == 0 || self.input_size % self.down_factor() != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.down_factor()
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reading of the pooled PPN representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpnPooling {
    /// Spatial mean gives a channel vector; a C→1 linear map gives the logit.
    #[default]
    ChannelVector,
    /// Mean over channels and space gives one scalar; a 1→1 linear map.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub head_width: usize,
    pub ppn_pooling: PpnPooling,
    /// Initial localization bias; sigmoid(-2.19) ≈ 0.1.
    pub heatmap_bias_init: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            head_width: 32,
            ppn_pooling: PpnPooling::ChannelVector,
            heatmap_bias_init: -2.19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            heads: HeadConfig::default(),
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full(),
            heads: HeadConfig {
                head_width: 64,
                ..Default::default()
            },
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneConfig::tiny(),
            heads: HeadConfig {
                head_width: 8,
                ..Default::default()
            },
        }
    }

    pub fn with_input_size(mut self, input_size: u32) -> Self {
        self.backbone.input_size = input_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.heads.head_width == 0 {
            return Err(Error::Config("head_width must be positive".into()));
        }
        Ok(())
    }
}

/// Detector loss composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub heatmap_weight: f64,
    pub class_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 2.0,
            focal_beta: 4.0,
            heatmap_weight: 1.0,
            class_weight: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::desk(), ModelConfig::full(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
        assert_eq!(BackboneConfig::desk().down_factor(), 16);
    }

    #[test]
    fn bad_input_size_rejected() {
        let c = BackboneConfig::desk().with_input_size(500);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_topology_only() {
        let a = BackboneConfig::desk();
        assert_eq!(a.config_hash(), BackboneConfig::desk().config_hash());
        assert_eq!(a.config_hash().len(), 64);
        let mut b = a.clone();
        b.stage_widths[3] = 96;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
