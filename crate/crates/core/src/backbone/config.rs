use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder, aggregation, and head hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each encoder stage (strides 4, 8, 16, 32 for four stages).
    pub stage_channels: Vec<usize>,
    /// Channel width of the aggregated map fed to the heads.
    pub pfa_channels: usize,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    /// Pixel shifts of each anchor from its cell center.
    pub anchor_offsets: Vec<(f64, f64)>,
    pub head_stride: usize,
    /// Multiplier on the raw regression output, in pixels per unit.
    pub offset_scale: f64,
    /// When false only the deepest stage reaches the heads.
    pub pfa_enabled: bool,
    /// When false the classification head reuses the detection tower.
    pub independent_classifier_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            pfa_channels: 128,
            num_classes: 2,
            anchors_per_cell: 5,
            anchor_offsets: vec![(0.0, 0.0), (-8.0, -8.0), (-8.0, 8.0), (8.0, 8.0), (8.0, -8.0)],
            head_stride: 32,
            offset_scale: 1.0,
            pfa_enabled: true,
            independent_classifier_enabled: true,
        }
    }
}

impl BackboneConfig {
    /// Downsampling factor of the deepest stage: 4 for the stem, then ×2 per extra stage.
    pub fn encoder_stride(&self) -> usize {
        4 << self.stage_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "backbone.stage_channels must be non-empty positive widths, got {:?}",
                self.stage_channels
            )));
        }
        if self.pfa_channels == 0 {
            return Err(Error::Config("backbone.pfa_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "backbone.num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.anchors_per_cell == 0 || self.anchor_offsets.len() != self.anchors_per_cell {
            return Err(Error::Config(format!(
                "backbone.anchor_offsets has {} entries but anchors_per_cell is {}",
                self.anchor_offsets.len(),
                self.anchors_per_cell
            )));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::Config(format!(
                "backbone.offset_scale must be positive, got {}",
                self.offset_scale
            )));
        }
        if !self.head_stride.is_power_of_two() || self.head_stride != self.encoder_stride() {
            return Err(Error::Config(format!(
                "backbone.head_stride {} must be a power of two equal to the encoder stride {}",
                self.head_stride,
                self.encoder_stride()
            )));
        }
        Ok(())
    }
}
